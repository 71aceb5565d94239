"""Command-line front end: ``msnd {train,denoise,evaluate,add-noise,check-grad}``.

Exit codes: 0 success, 1 gradient check failed, 2 invalid configuration or
model/image mismatch, 3 corpus/input-directory errors, 4 training diverged.
Output files are written through a temporary name and renamed on success,
so failing commands leave nothing behind.
"""

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import modelfile
from .dataset import build_corpus, list_images, read_image, sample_seed, write_image
from .gradients import loss_and_grad
from .influence import RbfConfig
from .metrics import NoiseSpec, psnr, ssim
from .model import ModelParams, StageParams, TaskKind, infer, init_model
from .optim import DivergenceError, GradientDescentConfig, LbfgsConfig, OptimizerState
from .training import (LossReport, TrainConfig, TrainingSample, TrainMode, dataset_psnr,
                       finite_diff_check, train)

log = logging.getLogger("msnd")

EXIT_FAIL, EXIT_CONFIG, EXIT_CORPUS, EXIT_DIVERGED = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass
class TrainSettings:
    """Resolved ``train`` configuration (defaults < config file < flags)."""

    corpus: str = ""
    task: str = "gaussian"
    sigma: float = 25.0
    peak: float = 1.0
    seed: int = 0
    crop: int = 180
    limit: int = 400
    stages: int = 5
    filter_size: int = 7
    filters: int = 0
    scales: str = "1.5,2,3"
    rbf_num: int = 63
    rbf_range: float = 0.0
    lambda0: float = 0.1
    mode: str = "greedy_then_joint"
    iters: int = 200
    joint_iters: int = 200
    optimizer: str = "lbfgs"
    history: int = 10
    workers: int = 1
    out: str = "model.msnd"
    log: str = ""
    checkpoint: str = ""
    resume: str = ""

    @property
    def scale_factors(self) -> tuple[float, ...]:
        return parse_scales(self.scales)

    @property
    def noise(self) -> NoiseSpec:
        level = self.sigma if self.task == "gaussian" else self.peak
        return NoiseSpec(self.task, level, self.seed)

    def rbf(self) -> RbfConfig:
        amp = self.rbf_range
        if amp <= 0:
            amp = 310.0 if self.task == "gaussian" else 310.0 * self.peak / 255.0
        return RbfConfig.for_range(amp, self.rbf_num)

    def validate(self) -> None:
        if self.task not in ("gaussian", "poisson"):
            raise ValueError(f"task must be gaussian or poisson, got {self.task!r}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd and positive")
        if self.stages < 1 or self.iters < 1 or self.joint_iters < 1 or self.crop < 1:
            raise ValueError("stages, iters, joint_iters and crop must be positive")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ValueError("optimizer must be lbfgs or gd")
        TrainMode(self.mode)
        self.noise
        self.scale_factors
        self.rbf()
        if not self.corpus:
            raise ValueError("no corpus directory configured")

    def describe(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in dataclasses.fields(self))


def parse_scales(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text or text.lower() == "none":
        return ()
    return tuple(float(s) for s in text.split(","))


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_settings(file_values: dict[str, str], overrides: dict) -> TrainSettings:
    fields = {f.name: f for f in dataclasses.fields(TrainSettings)}
    kw = {}
    for key, value in list(file_values.items()) + [(k, v) for k, v in overrides.items() if v is not None]:
        if key not in fields:
            raise ValueError(f"unknown configuration key {key!r}")
        typ = type(getattr(TrainSettings(), key))
        kw[key] = typ(value) if not isinstance(value, typ) else value
    s = TrainSettings(**kw)
    s.validate()
    return s


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_save_model(model: ModelParams, path) -> None:
    tmp = f"{path}.tmp"
    modelfile.save(model, tmp)
    os.replace(tmp, path)


def save_checkpoint(path, model: ModelParams, phase: str, done: int, loss: float,
                    state: OptimizerState) -> None:
    _atomic_save_model(model, path)
    tmp = f"{path}.state.tmp.npz"
    np.savez(tmp, phase=np.array(phase), done=np.array(done), loss=np.array(loss),
             **state.to_arrays())
    os.replace(tmp, f"{path}.state.npz")


def load_checkpoint(path):
    model = modelfile.load(path)
    with np.load(f"{path}.state.npz") as d:
        return model, str(d["phase"]), int(d["done"]), float(d["loss"]), OptimizerState.from_arrays(d)


def cmd_train(args) -> int:
    try:
        file_values = read_config(args.config) if args.config else {}
        overrides = {k: getattr(args, k, None) for k in
                     ("corpus", "task", "sigma", "peak", "seed", "stages", "filters", "scales",
                      "out", "mode", "iters", "joint_iters", "crop", "limit", "log",
                      "checkpoint", "resume", "workers")}
        overrides["filter_size"] = args.filter_size
        s = resolve_settings(file_values, overrides)
    except (OSError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG)
    print("# resolved configuration")
    print(s.describe(), flush=True)

    try:
        corpus = build_corpus(s.corpus, s.crop, s.noise, s.limit, s.seed)
    except OSError as exc:
        raise CliError(f"corpus error: {exc}", EXIT_CORPUS)
    if not len(corpus):
        raise CliError(f"corpus error: no usable images in {s.corpus}", EXIT_CORPUS)
    print(f"# corpus: {len(corpus)} samples, digest {corpus.digest()[:16]}", flush=True)

    peak = s.peak if s.task == "poisson" else None
    opt = LbfgsConfig(history=s.history) if s.optimizer == "lbfgs" else GradientDescentConfig()
    config = TrainConfig(TrainMode(s.mode), s.iters, s.joint_iters, opt, s.seed, s.workers, peak,
                         s.checkpoint or None)
    resume = None
    if s.resume:
        try:
            model, phase, done, loss, state = load_checkpoint(s.resume)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"cannot resume from {s.resume}: {exc}", EXIT_CONFIG)
        resume = (phase, done, state)
        print(f"# resuming {phase} after {done} iterations, checkpoint loss {loss!r}", flush=True)
    else:
        model = init_model(s.task, s.stages, s.filter_size, s.filters or None, s.scale_factors,
                           s.rbf(), s.lambda0, s.seed)
    offsets = {resume[0]: resume[1]} if resume else {}
    log_fh = open(f"{s.log}.tmp", "w") if s.log else None

    def on_iteration(phase, it, m, state):
        done = offsets.get(phase, 0) + it
        rec = report.records[-1]
        line = f"{phase}\t{done}\t{rec.loss:.17g}\t{rec.grad_norm:.6g}\t{rec.seconds:.3f}"
        print(line, flush=True)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        if s.checkpoint:
            save_checkpoint(s.checkpoint, m, phase, done, rec.loss, state)

    report = LossReport()
    try:
        model = train(model, corpus.samples, config, report, on_iteration, resume)
    except DivergenceError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_DIVERGED)
    finally:
        if log_fh:
            log_fh.close()
            if sys.exc_info()[0] is not None:
                os.remove(f"{s.log}.tmp")
    if log_fh:
        os.replace(f"{s.log}.tmp", s.log)
    _atomic_save_model(model, s.out)
    noisy = dataset_psnr(None, corpus.samples, peak)
    print(f"# train PSNR noisy {noisy:.3f} dB -> denoised {report.final_psnr:.3f} dB")
    print(f"# wrote {s.out}")
    return 0


def _load_model(path) -> ModelParams:
    try:
        return modelfile.load(path)
    except (OSError, modelfile.ModelFileError) as exc:
        raise CliError(f"cannot load model {path}: {exc}", EXIT_CONFIG)


def cmd_denoise(args) -> int:
    model = _load_model(args.model)
    try:
        f = read_image(args.input)
    except Exception as exc:  # noqa: BLE001
        raise CliError(f"cannot read {args.input}: {exc}", EXIT_CONFIG)
    poisson = model.task is TaskKind.POISSON
    if poisson and args.peak is None:
        raise CliError("--peak is required for Poisson models", EXIT_CONFIG)
    start = time.perf_counter()
    try:
        u = infer(model, f, args.peak if poisson else None)
    except ValueError as exc:
        raise CliError(f"model/image mismatch: {exc}", EXIT_CONFIG)
    elapsed = time.perf_counter() - start
    out = args.out or str(Path(args.input).with_suffix(".denoised.png"))
    write_image(out, u, 255.0 / args.peak if poisson else 1.0)
    print(f"{args.input}\t{f.shape[0]}x{f.shape[1]}\t{elapsed:.3f} s\t-> {out}")
    return 0


def model_label(model: ModelParams) -> str:
    m = model.filter_size
    return f"MSND_{m}x{m}^{model.num_stages}"


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    poisson = model.task is TaskKind.POISSON
    if poisson and args.peak is None:
        raise CliError("--peak is required for Poisson models", EXIT_CONFIG)
    level = args.peak if poisson else (args.sigma if args.sigma is not None else 25.0)
    noise = NoiseSpec(model.task.value, level, args.seed)
    try:
        paths = list_images(args.gt_dir)
    except OSError as exc:
        raise CliError(str(exc), EXIT_CORPUS)
    if not paths:
        raise CliError(f"no images in {args.gt_dir}", EXIT_CORPUS)
    ref = level if poisson else 255.0

    def run(item):
        i, path = item
        gt = noise.clean(read_image(path))
        f = noise.apply(read_image(path), sample_seed(args.seed, i))
        u = infer(model, f, level if poisson else None)
        return (path.name, psnr(f, gt, ref), ssim(f, gt, ref), psnr(u, gt, ref), ssim(u, gt, ref))

    try:
        with ThreadPoolExecutor(max(1, args.workers)) as pool:
            rows = list(pool.map(run, enumerate(paths)))
    except ValueError as exc:
        raise CliError(f"model/image mismatch: {exc}", EXIT_CONFIG)
    mean = np.mean([r[1:] for r in rows], axis=0)
    lines = [f"# model\t{args.model}", f"# noise\t{noise.kind}\t{noise.label}", f"# seed\t{args.seed}",
             "image\tnoisy_psnr\tnoisy_ssim\tpsnr\tssim"]
    lines += [f"{r[0]}\t{r[1]:.2f}\t{r[2]:.3f}\t{r[3]:.2f}\t{r[4]:.3f}" for r in rows]
    lines.append(f"mean\t{mean[0]:.2f}\t{mean[1]:.3f}\t{mean[2]:.2f}\t{mean[3]:.3f}")
    lines += ["", "method\tlevel\tPSNR/SSIM", f"{model_label(model)}\t{noise.label}\t{mean[2]:.2f}/{mean[3]:.3f}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def cmd_add_noise(args) -> int:
    kind = "poisson" if args.task == "poisson" or (args.peak is not None and args.sigma is None) else "gaussian"
    level = args.peak if kind == "poisson" else args.sigma
    if level is None:
        raise CliError("give --sigma (Gaussian) or --peak (Poisson)", EXIT_CONFIG)
    try:
        spec = NoiseSpec(kind, level, args.seed)
        u = read_image(args.input)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    out = args.out or str(Path(args.input).with_suffix(".noisy.png"))
    write_image(out, spec.apply(u))
    print(f"{args.input} + {spec.kind} {spec.label} seed {spec.seed} -> {out}")
    return 0


def random_model(task, stages=2, filter_size=3, filters=4, scales=(1.5, 2.0, 3.0), seed=0,
                 amplitude=2.0) -> ModelParams:
    """Model with random kernels/weights, for gradient checks."""
    rng = np.random.default_rng(seed)
    rbf = RbfConfig(9, -amplitude, amplitude)
    m = init_model(task, stages, filter_size, filters, scales, rbf, 0.3, seed)
    st = [StageParams(s.lambda_raw + 0.2 * rng.standard_normal(),
                      0.4 * rng.standard_normal(s.kernels.shape),
                      0.5 * rng.standard_normal(s.weights.shape)) for s in m.stages]
    return m.replace(stages=st)


def random_sample(model: ModelParams, size: int, seed: int) -> TrainingSample:
    rng = np.random.default_rng(seed + 1)
    amp = model.rbf.vmax / 1.2
    gt = rng.uniform(0.25 * amp, amp, (size, size))
    if model.task is TaskKind.POISSON:
        return TrainingSample(gt, gt * rng.uniform(0.7, 1.3, gt.shape))
    return TrainingSample(gt, gt + 0.1 * amp * rng.standard_normal(gt.shape))


def cmd_check_grad(args) -> int:
    if args.model:
        model = _load_model(args.model)
    else:
        model = random_model(args.task or "gaussian", args.stages or 2, args.filter_size or 3,
                             args.filters or 4, parse_scales(args.scales or "1.5,2,3"), args.seed)
    sample = random_sample(model, args.size, args.seed)

    def skewed(m, samples):
        # negative control: a gradient that is 1% off must fail the check
        _, grads = loss_and_grad(m, samples)
        return 1.01 * np.concatenate([p.to_vector() for p in grads])

    grad_fn = skewed if args.corrupt_gradient else None
    report = finite_diff_check(model, sample, args.probes, args.h, args.seed, grad_fn=grad_fn)
    for j, a, n, e in report.probes:
        print(f"{j}\t{a:.10g}\t{n:.10g}\t{e:.3g}")
    ok = report.passed(args.tol)
    print(f"max relative error {report.max_rel_err:.3g} (tol {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--task", choices=["gaussian", "poisson"])
    shared.add_argument("--sigma", type=float)
    shared.add_argument("--peak", type=float)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--model")
    shared.add_argument("--out")
    shared.add_argument("--scales", help="comma-separated scale factors, or 'none'")
    shared.add_argument("--filter-size", type=int)
    shared.add_argument("--stages", type=int)
    shared.add_argument("--filters", type=int)
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msnd", description="Multi-scale nonlinear diffusion denoising")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[shared], help="train a model on a directory of images")
    t.add_argument("--config")
    t.add_argument("--corpus")
    t.add_argument("--mode", choices=[m.value for m in TrainMode])
    t.add_argument("--iters", type=int, help="iterations per greedy phase")
    t.add_argument("--joint-iters", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--limit", type=int)
    t.add_argument("--log", help="per-iteration loss log (tab-separated)")
    t.add_argument("--checkpoint")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", parents=[shared], help="denoise one image")
    d.add_argument("input")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("evaluate", parents=[shared], help="PSNR/SSIM over a ground-truth directory")
    e.add_argument("gt_dir")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_evaluate, seed=0)

    a = sub.add_parser("add-noise", parents=[shared], help="degrade an image with synthetic noise")
    a.add_argument("input")
    a.set_defaults(func=cmd_add_noise, seed=0)

    c = sub.add_parser("check-grad", parents=[shared], help="finite-difference gradient check")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--h", type=float, default=1e-4)
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check_grad, seed=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"msnd: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
