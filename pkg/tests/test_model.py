import numpy as np
import pytest

from msnd.imaging import conv2, rotate180
from msnd.influence import basis
from msnd.model import (StageParams, TaskKind, dct_filters, diffusion_force, gaussian_step, infer,
                        init_model, initial_state, poisson_prox, poisson_step)

from conftest import dense, prox_oracle, random_model, random_pair, tnrd_step


def zero_weights(model):
    return model.replace(stages=[StageParams(s.lambda_raw, s.kernels, np.zeros_like(s.weights))
                                 for s in model.stages])


def test_zero_weights_give_zero_force(rng):
    m = zero_weights(random_model("gaussian", rng))
    u = rng.standard_normal((9, 9))
    assert np.array_equal(diffusion_force(m.stages[0], u, m.operators(9, 9), m.rbf), np.zeros((9, 9)))


def test_force_single_filter_dense_oracle(rng):
    m = random_model("gaussian", rng, stages=1, filters=1, scales=())
    st = m.stages[0]
    k = st.kernels[0, 0]
    u = rng.standard_normal((5, 5))
    K = dense(lambda x: conv2(x, k), (5, 5))
    Kbar = dense(lambda x: conv2(x, rotate180(k)), (5, 5))
    z = K @ u.ravel()
    phi = basis(z, m.rbf.centers, m.rbf.width) @ st.weights[0, 0]
    expected = Kbar @ phi
    got = diffusion_force(st, u, m.operators(5, 5), m.rbf)
    np.testing.assert_allclose(got.ravel(), expected, atol=1e-12)


def test_force_multiscale_dense_oracle(rng):
    m = random_model("gaussian", rng, stages=1, filters=2)
    st = m.stages[0]
    u = rng.standard_normal((8, 7))
    ops = m.operators(8, 7)
    total = np.zeros(56)
    for l, op in enumerate(ops):
        A = op.matrix()
        sh = (op.dst_h, op.dst_w)
        for i in range(2):
            k = st.kernels[l, i]
            K = dense(lambda x: conv2(x, k), sh)
            Kbar = dense(lambda x: conv2(x, rotate180(k)), sh)
            z = K @ (A @ u.ravel())
            total += A.T @ (Kbar @ (basis(z, m.rbf.centers, m.rbf.width) @ st.weights[l, i]))
    np.testing.assert_allclose(diffusion_force(st, u, ops, m.rbf).ravel(), total, atol=1e-12)


def test_force_linear_in_weights(rng):
    m = random_model("gaussian", rng)
    st = m.stages[0]
    u = rng.standard_normal((8, 8))
    ops = m.operators(8, 8)
    doubled = StageParams(st.lambda_raw, st.kernels, 2 * st.weights)
    np.testing.assert_allclose(diffusion_force(doubled, u, ops, m.rbf),
                               2 * diffusion_force(st, u, ops, m.rbf), atol=1e-12)


def test_gaussian_step_limits(rng):
    m = zero_weights(random_model("gaussian", rng))
    u, f = rng.standard_normal((2, 8, 8))
    ops = m.operators(8, 8)
    tiny = StageParams(-40.0, m.stages[0].kernels, m.stages[0].weights)
    out = gaussian_step(tiny, u, f, ops, m.rbf)
    ulp = 4 * np.finfo(float).eps * np.abs(u).max()
    assert np.max(np.abs(out - u)) <= tiny.lam * np.linalg.norm(u - f) + ulp
    one = StageParams(0.0, m.stages[0].kernels, m.stages[0].weights)
    assert np.array_equal(gaussian_step(one, u, f, ops, m.rbf), f)
    # fixed point: f = u_prev
    assert np.array_equal(gaussian_step(m.stages[0], u, u, ops, m.rbf), u)


def test_gaussian_step_dense_reference(rng):
    m = random_model("gaussian", rng, stages=1, filters=2, scales=(2.0,))
    st = m.stages[0]
    u, f = rng.standard_normal((2, 6, 6))
    ops = m.operators(6, 6)
    force = np.zeros(36)
    for l, op in enumerate(ops):
        A = op.matrix()
        sh = (op.dst_h, op.dst_w)
        for i in range(2):
            k = st.kernels[l, i]
            K = dense(lambda x: conv2(x, k), sh)
            Kbar = dense(lambda x: conv2(x, rotate180(k)), sh)
            z = K @ A @ u.ravel()
            force += A.T @ Kbar @ (basis(z, m.rbf.centers, m.rbf.width) @ st.weights[l, i])
    expected = u.ravel() - force - st.lam * (u.ravel() - f.ravel())
    np.testing.assert_allclose(gaussian_step(st, u, f, ops, m.rbf).ravel(), expected, atol=1e-12)


def test_single_scale_matches_independent_tnrd(rng):
    for _ in range(20):
        m = random_model("gaussian", rng, stages=1, filters=4, scales=(), filter_size=int(rng.choice([3, 5])))
        st = m.stages[0]
        u, f = rng.standard_normal((2, 9, 10))
        ours = gaussian_step(st, u, f, m.operators(9, 10), m.rbf)
        ref = tnrd_step(u, f, st.kernels[0], st.weights[0], st.lam, m.rbf.centers, m.rbf.width)
        np.testing.assert_allclose(ours, ref, atol=1e-12, rtol=0)


def test_prox_closed_form_cases():
    ut = np.array([0.3, 2.0, -1.0])
    f = np.array([1.0, 0.5, 2.0])
    assert np.array_equal(poisson_prox(ut, 0.0, f), ut)
    lam = 0.7
    np.testing.assert_allclose(poisson_prox(np.full(3, lam), lam, f), np.sqrt(lam * f), rtol=1e-15)
    ut = np.array([3.0, 0.5, -2.0])
    np.testing.assert_array_equal(poisson_prox(ut, 1.0, np.zeros(3)), np.maximum(ut - 1.0, 0))


def test_prox_matches_golden_section(rng):
    for _ in range(300):
        ut = rng.uniform(-5, 10)
        lam = rng.uniform(0.01, 5)
        f = rng.uniform(0.01, 10)
        got = poisson_prox(np.array([ut]), lam, np.array([f]))[0]
        assert got > 0
        assert abs(got - prox_oracle(ut, lam, f)) <= 1e-6


def test_prox_rejects_negative():
    with pytest.raises(ValueError):
        poisson_prox(np.ones(2), 1.0, np.array([1.0, -0.1]))
    with pytest.raises(ValueError):
        poisson_prox(np.ones(2), -1.0, np.ones(2))


def test_poisson_step_cases(rng):
    m = zero_weights(random_model("poisson", rng))
    u = rng.uniform(0.1, 3, (8, 8))
    f = rng.uniform(0.1, 3, (8, 8))
    ops = m.operators(8, 8)
    tiny = StageParams(-40.0, m.stages[0].kernels, m.stages[0].weights)
    np.testing.assert_allclose(poisson_step(tiny, u, f, ops, m.rbf), u, atol=1e-12)
    st = m.stages[0]
    out = poisson_step(st, u, f, ops, m.rbf)
    assert np.array_equal(out, poisson_prox(u, st.lam, f)) and np.all(out > 0)


def test_poisson_step_composition(rng):
    m = random_model("poisson", rng, stages=1, filters=2)
    st = m.stages[0]
    u, f = random_pair("poisson", rng, (6, 6))
    ops = m.operators(6, 6)
    ut = u - diffusion_force(st, u, ops, m.rbf)
    out = poisson_step(st, u, f, ops, m.rbf)
    for p in range(0, 36, 7):
        i, j = divmod(p, 6)
        assert abs(out[i, j] - prox_oracle(ut[i, j], st.lam, f[i, j])) <= 1e-6


def test_poisson_positivity(rng):
    for _ in range(1000):
        m = random_model("poisson", rng, stages=1, filters=1, scales=(2.0,))
        s = m.stages[0]
        st = StageParams(s.lambda_raw, 3 * s.kernels, 3 * s.weights)
        u = rng.uniform(0, 3, (5, 5))
        f = rng.uniform(1e-3, 3, (5, 5))
        assert np.all(poisson_step(st, u, f, m.operators(5, 5), m.rbf) > 0)


def test_infer_single_stage_is_one_step(rng):
    m = random_model("gaussian", rng, stages=1)
    f = rng.standard_normal((8, 8))
    assert np.array_equal(infer(m, f), gaussian_step(m.stages[0], f, f, m.operators(8, 8), m.rbf))


def test_infer_identity_model(rng):
    m = zero_weights(random_model("gaussian", rng, stages=3))
    m = m.replace(stages=[StageParams(0.0, s.kernels, s.weights) for s in m.stages])
    f = rng.standard_normal((8, 8))
    assert np.array_equal(infer(m, f), f)


def test_infer_deterministic(rng):
    m = random_model("poisson", rng)
    _, f = random_pair("poisson", rng, (9, 9))
    assert infer(m, f).tobytes() == infer(m, f).tobytes()


def test_initial_state():
    f = np.array([[0.0, 2.0], [4.0, 1.0]])
    assert np.array_equal(initial_state(TaskKind.GAUSSIAN, f), f)
    assert np.array_equal(initial_state(TaskKind.POISSON, f, peak=4.0), [[4e-4, 2], [4, 1]])


def test_init_model_shapes():
    m = init_model("gaussian", 3, 5)
    assert m.num_filters == 24 and m.num_scales == 4
    assert m.stages[0].kernels.shape == (4, 24, 5, 5)
    assert m.stages[0].weights.shape == (4, 24, 63)
    assert m.stages[0].lam == pytest.approx(0.1)


def test_dct_filters():
    k = dct_filters(3, 8)
    flat = k.reshape(8, -1)
    np.testing.assert_allclose(flat @ flat.T, np.eye(8), atol=1e-14)
    np.testing.assert_allclose(flat.sum(axis=1), 0, atol=1e-14)
    extra = dct_filters(3, 12, seed=1)
    np.testing.assert_allclose(np.linalg.norm(extra.reshape(12, -1), axis=1), 1)
    np.testing.assert_allclose(extra.reshape(12, -1).sum(axis=1), 0, atol=1e-14)


def test_model_validation(rng):
    m = random_model("gaussian", rng)
    with pytest.raises(ValueError):
        m.replace(scale_factors=(2.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        m.replace(scale_factors=(0.5, 2.0, 3.0))
    with pytest.raises(ValueError):
        m.replace(stages=[])
    with pytest.raises(ValueError):
        m.replace(scale_factors=(2.0,))
    with pytest.raises(ValueError):
        gaussian_step(m.stages[0], np.ones((8, 8)), np.ones((8, 9)), m.operators(8, 8), m.rbf)
    with pytest.raises(ValueError):
        diffusion_force(m.stages[0], np.ones((8, 8)), m.operators(9, 9), m.rbf)
    with pytest.raises(ValueError):
        infer(random_model("poisson", rng), -np.ones((8, 8)))


def test_vector_round_trip(rng):
    m = random_model("gaussian", rng, stages=3)
    v = m.to_vector()
    assert np.array_equal(m.with_vector(v).to_vector(), v)
    part = m.to_vector([2, 0])
    assert part.size == 2 * m.stages[0].size
    assert part[0] == m.stages[0].lambda_raw
    m2 = m.with_vector(np.zeros_like(part), [0, 2])
    assert np.array_equal(m2.stages[1].to_vector(), m.stages[1].to_vector())
    assert not m2.stages[0].to_vector().any()
