import numpy as np
import pytest

from msnd.gradients import loss_and_grad
from msnd.influence import RbfConfig
from msnd.metrics import add_gaussian_noise, psnr
from msnd.model import StageParams, infer, init_model
from msnd.optim import GradientDescentConfig, OptimizerState
from msnd.training import (LossReport, TrainConfig, TrainingSample, TrainMode, dataset_psnr,
                           finite_diff_check, objective, phase_plan, train, train_greedy,
                           train_joint)

from conftest import image_crop, random_model, random_pair


def small_set(rng, n=2, size=12, sigma=25.0):
    gts = [rng.uniform(40, 200, (size, size)) for _ in range(n)]
    for g in gts:
        g[:, : size // 2] -= 30
    return [TrainingSample(g, add_gaussian_noise(g, sigma, i)) for i, g in enumerate(gts)]


def small_model(stages=2, scales=(2.0,)):
    return init_model("gaussian", stages, 3, 4, scales, RbfConfig(21, -200, 200), lam=0.1)


def non_increasing(records):
    losses = [r.loss for r in records]
    return all(b <= a for a, b in zip(losses, losses[1:]))


def test_deterministic(rng):
    samples = small_set(rng)
    cfg = TrainConfig(max_iters_per_phase=4, joint_iters=4)
    a = train(small_model(), samples, cfg)
    b = train(small_model(), samples, TrainConfig(max_iters_per_phase=4, joint_iters=4, workers=3))
    assert np.array_equal(a.to_vector(), b.to_vector())


def test_reported_loss_matches_objective(rng):
    samples = small_set(rng)
    seen = []
    report = LossReport()
    train(small_model(), samples, TrainConfig(max_iters_per_phase=3, joint_iters=3), report,
          on_iteration=lambda phase, it, m, st: seen.append((phase, m)))
    recs = report.records
    assert len(seen) == len(recs)
    for rec, (phase, m) in zip(recs, seen):
        if phase == "joint":
            ref = objective(m, samples)
        else:
            upto = int(phase[len("greedy"):])
            ref = objective(m.replace(stages=m.stages[:upto]), samples)
        assert abs(rec.loss - ref) <= 1e-10 * ref


def test_phases_are_monotone_and_joint_starts_at_greedy_end(rng):
    samples = small_set(rng)
    report = LossReport()
    train(small_model(), samples, TrainConfig(max_iters_per_phase=5, joint_iters=5), report)
    assert report.phases() == ["greedy1", "greedy2", "joint"]
    for name in report.phases():
        assert non_increasing(report.phase(name))
    assert report.phase("joint")[0].loss == report.phase("greedy2")[-1].loss
    assert report.phase("joint")[-1].loss <= report.phase("greedy2")[-1].loss
    assert report.final_psnr == pytest.approx(dataset_psnr(None, samples), abs=30)


def test_greedy_with_one_stage_is_single_stage_training(rng):
    samples = small_set(rng)
    cfg = TrainConfig(mode=TrainMode.GREEDY, max_iters_per_phase=4)
    a = train_greedy(small_model(1), samples, cfg)
    b = train_joint(small_model(1), samples, TrainConfig(mode=TrainMode.JOINT, max_iters_per_phase=4))
    assert np.array_equal(a.to_vector(), b.to_vector())


def test_greedy_freezes_earlier_stages(rng):
    samples = small_set(rng)
    m0 = small_model()
    seen = []
    train_greedy(m0, samples, TrainConfig(mode="greedy", max_iters_per_phase=3),
                 on_iteration=lambda phase, it, m, st: seen.append((phase, m)))
    first_done = [m for p, m in seen if p == "greedy1"][-1]
    for p, m in seen:
        if p == "greedy2":
            assert np.array_equal(m.stages[0].to_vector(), first_done.stages[0].to_vector())


def test_gradient_descent_fallback(rng):
    samples = small_set(rng, n=1)
    report = LossReport()
    cfg = TrainConfig(mode="joint", max_iters_per_phase=5, optimizer=GradientDescentConfig())
    train(small_model(1), samples, cfg, report)
    assert non_increasing(report.records)
    assert report.records[-1].loss < report.records[0].loss


def test_phase_plan():
    m = small_model(3)
    plan = phase_plan(m, TrainConfig(max_iters_per_phase=7, joint_iters=11))
    assert [p[0] for p in plan] == ["greedy1", "greedy2", "greedy3", "joint"]
    assert plan[1][1:] == ([1], 2, 7) and plan[-1][1:] == ([0, 1, 2], 3, 11)
    assert [p[0] for p in phase_plan(m, TrainConfig(mode="joint"))] == ["joint"]


def test_resume_continues_phase(rng):
    samples = small_set(rng)
    cfg = TrainConfig(max_iters_per_phase=4, joint_iters=6)
    full = train(small_model(), samples, cfg)
    snap = {}

    def grab(phase, it, m, st):
        if phase == "joint" and it == 3:
            snap["m"], snap["s"] = m, OptimizerState.from_arrays(st.to_arrays())

    train(small_model(), samples, cfg, on_iteration=grab)
    report = LossReport()
    resumed = train(snap["m"], samples, cfg, report, resume=("joint", 3, snap["s"]))
    assert report.phases() == ["joint"]
    assert report.records[0].loss == objective(snap["m"], samples)
    np.testing.assert_allclose(resumed.to_vector(), full.to_vector(), rtol=1e-12, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_iters_per_phase=0)
    with pytest.raises(ValueError):
        TrainConfig(mode="sometimes")
    with pytest.raises(ValueError):
        train(small_model(), [], TrainConfig())


def test_finite_diff_check_zero_weight_lambda(rng):
    m = random_model("gaussian", rng, stages=1, filters=2)
    m = m.replace(stages=[StageParams(s.lambda_raw, s.kernels, np.zeros_like(s.weights)) for s in m.stages])
    sample = TrainingSample(*random_pair("gaussian", rng, (8, 8)))
    _, grads = loss_and_grad(m, [sample])
    x0 = m.to_vector()
    h = 1e-4
    up = m.with_vector(x0 + h * np.eye(x0.size)[0])
    dn = m.with_vector(x0 - h * np.eye(x0.size)[0])
    fd = (objective(up, [sample]) - objective(dn, [sample])) / (2 * h)
    assert abs(grads[0].d_lambda_raw - fd) <= 1e-6 * abs(fd)


@pytest.mark.parametrize("task", ["gaussian", "poisson"])
def test_finite_diff_check_random_models(task, rng):
    m = random_model(task, rng, stages=2, filters=2)
    sample = TrainingSample(*random_pair(task, rng, (8, 8)))
    rep = finite_diff_check(m, sample, num_probes=100, h=1e-4, seed=3)
    assert len(rep.probes) == 100
    assert rep.passed(1e-4), rep.max_rel_err


def test_finite_diff_check_catches_wrong_gradient(rng):
    m = random_model("gaussian", rng, stages=1, filters=2)
    sample = TrainingSample(*random_pair("gaussian", rng, (6, 6)))

    def skewed(model, samples):
        _, g = loss_and_grad(model, samples)
        return 1.01 * np.concatenate([x.to_vector() for x in g])

    assert not finite_diff_check(m, sample, 30, grad_fn=skewed).passed(1e-4)
    with pytest.raises(ValueError):
        finite_diff_check(m, sample, h=1e-2)


@pytest.mark.slow
def test_desk_overfit_single_image():
    gt = image_crop("camera")
    sample = TrainingSample(gt, add_gaussian_noise(gt, 25.0, 0))
    m = init_model("gaussian", 1, 3, 8, (2.0,))
    report = LossReport()
    trained = train(m, [sample], TrainConfig(mode="greedy", max_iters_per_phase=200), report)
    assert non_increasing(report.records)
    before = psnr(sample.degraded, gt)
    after = psnr(infer(trained, sample.degraded), gt)
    assert after >= before + 2.0

