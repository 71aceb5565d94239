"""Greedy stage-wise and joint training of diffusion models."""

import logging
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .gradients import loss_and_grad
from .model import ModelParams, TaskKind, infer
from .optim import (DivergenceError, GradientDescentConfig, LbfgsConfig, OptimizerState,
                    gradient_descent, lbfgs)

log = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    ground_truth: np.ndarray
    degraded: np.ndarray

    def __post_init__(self):
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        self.degraded = np.asarray(self.degraded, dtype=np.float64)
        if self.ground_truth.shape != self.degraded.shape:
            raise ValueError("ground truth and degraded image differ in size")


class TrainMode(Enum):
    GREEDY = "greedy"
    JOINT = "joint"
    GREEDY_THEN_JOINT = "greedy_then_joint"


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.GREEDY_THEN_JOINT
    max_iters_per_phase: int = 200
    joint_iters: int | None = None
    optimizer: LbfgsConfig | GradientDescentConfig = field(default_factory=LbfgsConfig)
    seed: int = 0
    workers: int = 1
    peak: float | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        if self.max_iters_per_phase < 1 or (self.joint_iters is not None and self.joint_iters < 1):
            raise ValueError("iteration budgets must be >= 1")

    @property
    def joint_budget(self) -> int:
        return self.max_iters_per_phase if self.joint_iters is None else self.joint_iters


@dataclass
class IterationRecord:
    phase: str
    iteration: int
    loss: float
    grad_norm: float
    seconds: float


@dataclass
class LossReport:
    records: list[IterationRecord] = field(default_factory=list)
    final_psnr: float | None = None

    def phase(self, name: str) -> list[IterationRecord]:
        return [r for r in self.records if r.phase == name]

    def phases(self) -> list[str]:
        return list(dict.fromkeys(r.phase for r in self.records))

    def lines(self):
        for r in self.records:
            yield f"{r.phase}\t{r.iteration}\t{r.loss:.17g}\t{r.grad_norm:.6g}\t{r.seconds:.3f}"


def _check_samples(model: ModelParams, samples) -> list[TrainingSample]:
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    if model.task is TaskKind.POISSON and any(np.any(s.degraded < 0) for s in samples):
        raise ValueError("Poisson training data has negative observations")
    return samples


def _optimize(model, samples, stages, upto, config, report, phase, max_iter, state=None,
              on_iteration=None):
    def fun(x):
        m = model.with_vector(x, stages)
        loss, grads = loss_and_grad(m, samples, stages, upto, config.peak, config.workers)
        return loss, np.concatenate([g.to_vector() for g in grads])

    start = time.perf_counter()

    def callback(it, x, f, g):
        report.records.append(IterationRecord(phase, it, float(f), float(np.linalg.norm(g)),
                                              time.perf_counter() - start))
        log.info("%s iter %d loss %.6g |g| %.3g", phase, it, f, np.linalg.norm(g))
        if on_iteration:
            on_iteration(phase, it, model.with_vector(x, stages), state_box[0])

    state_box = [state or OptimizerState()]
    x0 = model.to_vector(stages)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            if isinstance(config.optimizer, GradientDescentConfig):
                x, f, st = gradient_descent(fun, x0, max_iter, config.optimizer, state_box[0], callback)
            else:
                x, f, st = lbfgs(fun, x0, max_iter, config.optimizer, state_box[0], callback)
        except DivergenceError as exc:
            raise DivergenceError(f"{phase}: {exc}") from None
    return model.with_vector(x, stages), f


def train_greedy(model_init: ModelParams, samples, config: TrainConfig | None = None,
                 report: LossReport | None = None, on_iteration=None) -> ModelParams:
    """Train stage ``t`` against the loss on ``u_t`` with earlier stages frozen, for t = 1..T."""
    config = config or TrainConfig(mode=TrainMode.GREEDY)
    report = report if report is not None else LossReport()
    samples = _check_samples(model_init, samples)
    model = model_init.copy()
    for t in range(model.num_stages):
        model, _ = _optimize(model, samples, [t], t + 1, config, report, f"greedy{t + 1}",
                             config.max_iters_per_phase, on_iteration=on_iteration)
    return model


def train_joint(model_init: ModelParams, samples, config: TrainConfig | None = None,
                report: LossReport | None = None, state: OptimizerState | None = None,
                max_iter: int | None = None, on_iteration=None) -> ModelParams:
    """Optimise all stages together against the loss on ``u_T``."""
    config = config or TrainConfig(mode=TrainMode.JOINT)
    report = report if report is not None else LossReport()
    samples = _check_samples(model_init, samples)
    stages = list(range(model_init.num_stages))
    model, _ = _optimize(model_init.copy(), samples, stages, model_init.num_stages, config, report,
                         "joint", config.joint_budget if max_iter is None else max_iter, state,
                         on_iteration)
    return model


def phase_plan(model: ModelParams, config: TrainConfig) -> list[tuple[str, list[int], int, int]]:
    """``(name, trainable stages, rollout length, iteration budget)`` per phase."""
    plan = []
    T = model.num_stages
    if config.mode in (TrainMode.GREEDY, TrainMode.GREEDY_THEN_JOINT):
        plan += [(f"greedy{t + 1}", [t], t + 1, config.max_iters_per_phase) for t in range(T)]
    if config.mode in (TrainMode.JOINT, TrainMode.GREEDY_THEN_JOINT):
        plan.append(("joint", list(range(T)), T, config.joint_budget))
    return plan


def train(model_init: ModelParams, samples, config: TrainConfig | None = None,
          report: LossReport | None = None, on_iteration=None, resume=None) -> ModelParams:
    """Run every phase of ``config.mode`` in order.

    ``resume = (phase_name, iterations_done, OptimizerState)`` skips the
    phases before ``phase_name`` and continues that phase with its
    remaining budget and restored curvature history.
    """
    config = config or TrainConfig()
    report = report if report is not None else LossReport()
    samples = _check_samples(model_init, samples)
    model = model_init.copy()
    plan = phase_plan(model, config)
    skip_to, done, state = resume if resume else (None, 0, None)
    if skip_to is not None and skip_to not in [p[0] for p in plan]:
        raise ValueError(f"unknown phase {skip_to!r} for mode {config.mode.value}")
    for name, stages, upto, budget in plan:
        if skip_to is not None:
            if name != skip_to:
                continue
            skip_to = None
            budget -= done
            if budget <= 0:
                continue
        else:
            state = None
        model, _ = _optimize(model, samples, stages, upto, config, report, name, budget, state,
                             on_iteration)
    report.final_psnr = dataset_psnr(model, samples, config.peak)
    return model


def objective(model: ModelParams, samples, peak: float | None = None) -> float:
    """``sum_s |infer(f_s) - gt_s|^2 / 2`` computed from plain inference."""
    total = 0.0
    for s in samples:
        r = infer(model, s.degraded, peak) - s.ground_truth
        total += 0.5 * float(np.vdot(r, r))
    return total


def dataset_psnr(model: ModelParams | None, samples, peak: float | None = None) -> float:
    """PSNR of the pooled MSE over ``samples``; ``model=None`` scores the noisy inputs."""
    from .metrics import psnr

    outs, gts = [], []
    for s in samples:
        outs.append((s.degraded if model is None else infer(model, s.degraded, peak)).ravel())
        gts.append(s.ground_truth.ravel())
    ref = 255.0 if peak is None else peak
    return psnr(np.concatenate(outs), np.concatenate(gts), ref)


@dataclass
class GradCheckReport:
    probes: list[tuple[int, float, float, float]]
    max_rel_err: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def finite_diff_check(model: ModelParams, sample, num_probes: int = 20, h: float = 1e-4,
                      seed: int = 0, peak: float | None = None, grad_fn=None) -> GradCheckReport:
    """Compare analytic and central-difference gradients on random scalar parameters.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6 * max|grad|)``; the floor
    keeps parameters whose gradient is numerically zero from dominating.
    ``grad_fn`` replaces the analytic gradient (used to test the checker).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    samples = [sample] if isinstance(sample, TrainingSample) else list(sample)
    x0 = model.to_vector()

    def loss_at(x):
        return loss_and_grad(model.with_vector(x), samples, peak=peak)[0]

    if grad_fn is None:
        _, grads = loss_and_grad(model, samples, peak=peak)
        analytic = np.concatenate([g.to_vector() for g in grads])
    else:
        analytic = np.asarray(grad_fn(model, samples))
    floor = 1e-6 * max(np.abs(analytic).max(), 1e-300)
    rng = np.random.default_rng(seed)
    idx = rng.choice(x0.size, size=min(num_probes, x0.size), replace=False)
    probes = []
    worst = 0.0
    for j in sorted(idx):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        num = (loss_at(xp) - loss_at(xm)) / (2 * h)
        a = analytic[j]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        probes.append((int(j), float(a), float(num), float(err)))
        worst = max(worst, err)
    return GradCheckReport(probes, worst)
