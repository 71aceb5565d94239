"""Desk-scale training run on 64x64 crops of scikit-image's bundled pictures.

Trains a multi-scale model and, with ``--compare``, a single-scale twin with
the same parameter count, then reports train and held-out PSNR.

    python3 scripts/desk_experiment.py --sigma 25
    python3 scripts/desk_experiment.py --sigma 50 --compare --out multi.msnd
"""

import argparse
import time

import numpy as np
from skimage import data

from msnd import modelfile
from msnd.dataset import center_crop, to_gray
from msnd.influence import RbfConfig
from msnd.metrics import add_gaussian_noise, ssim
from msnd.model import infer, init_model
from msnd.training import LossReport, TrainConfig, TrainingSample, dataset_psnr, train

TRAIN = ("camera", "astronaut", "coins", "clock")
HELD_OUT = ("chelsea", "coffee")


def crops(names, size, sigma, seed0):
    out = []
    for i, name in enumerate(names):
        img = to_gray(np.asarray(getattr(data, name)(), dtype=np.float64))
        gt = center_crop(img, size)[0]
        out.append(TrainingSample(gt, add_gaussian_noise(gt, sigma, seed0 + i)))
    return out


def run(label, scales, filters, args, train_set, test_set):
    model = init_model("gaussian", args.stages, args.filter_size, filters, scales, RbfConfig(),
                       lam=0.1, seed=args.seed)
    report = LossReport()
    cfg = TrainConfig(max_iters_per_phase=args.greedy_iters, joint_iters=args.joint_iters,
                      workers=args.workers)
    start = time.perf_counter()
    model = train(model, train_set, cfg, report)
    secs = time.perf_counter() - start
    for phase in report.phases():
        recs = report.phase(phase)
        print(f"  {label} {phase}: loss {recs[0].loss:.6g} -> {recs[-1].loss:.6g} in {len(recs) - 1} iterations")
    held = dataset_psnr(model, test_set)
    mean_ssim = np.mean([ssim(infer(model, s.degraded), s.ground_truth) for s in test_set])
    print(f"{label}\tparams {model.to_vector().size}\ttrain {report.final_psnr:.2f} dB\t"
          f"held-out {held:.2f} dB / {mean_ssim:.3f}\t{secs:.0f} s")
    return model


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--filter-size", type=int, default=3)
    p.add_argument("--filters", type=int, default=8, help="filters per scale")
    p.add_argument("--scales", default="2", help="extra scale factors, comma-separated")
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--greedy-iters", type=int, default=100)
    p.add_argument("--joint-iters", type=int, default=200)
    p.add_argument("--compare", action="store_true", help="also train the matched single-scale twin")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="save the multi-scale model here")
    args = p.parse_args()

    scales = tuple(float(s) for s in args.scales.split(",") if s)
    train_set = crops(TRAIN, args.crop, args.sigma, args.seed)
    test_set = crops(HELD_OUT, args.crop, args.sigma, args.seed + 100)
    print(f"noisy input: train {dataset_psnr(None, train_set):.2f} dB, "
          f"held-out {dataset_psnr(None, test_set):.2f} dB (sigma {args.sigma:g})")
    model = run("multi-scale", scales, args.filters, args, train_set, test_set)
    if args.out:
        modelfile.save(model, args.out)
    if args.compare:
        run("single-scale", (), args.filters * (1 + len(scales)), args, train_set, test_set)


if __name__ == "__main__":
    main()
