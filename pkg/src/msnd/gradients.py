"""Reverse-mode gradients through the unrolled diffusion.

Everything is expressed as vector-Jacobian products: given a cotangent
``v`` on a stage output ``u_t``, :func:`stage_vjp` returns the cotangent on
``u_prev`` and the gradient with respect to that stage's parameters.  No
Jacobian is ever materialised.

For one branch ``(l, i)`` with ``x = A_l u``, ``z = k * x`` and
``w = A_l v`` (the pullback through ``A_l.T``), the diffusion force
contributes ``-<kbar * phi(z), w>`` to ``<u_t, v>``.  Writing
``q = Kbar.T w``:

* kernel gradient: ``-(rot180(V.T w) + U.T (phi'(z) q))``
* weight gradient: ``-G(z).T q``
* state cotangent: ``-A_l.T K.T (phi'(z) q)``
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .imaging import conv2, conv2_adjoint, conv2_kernel_vjp, rotate180
from .influence import RbfConfig, evaluate
from .model import ModelParams, StageParams, TaskKind, diffusion_force, rollout


@dataclass
class ParamGradient:
    d_lambda_raw: float
    d_kernels: np.ndarray
    d_weights: np.ndarray

    @classmethod
    def zeros_like(cls, stage: StageParams) -> "ParamGradient":
        return cls(0.0, np.zeros_like(stage.kernels), np.zeros_like(stage.weights))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.d_lambda_raw], self.d_kernels.ravel(), self.d_weights.ravel()])

    def __add__(self, other: "ParamGradient") -> "ParamGradient":
        return ParamGradient(self.d_lambda_raw + other.d_lambda_raw,
                             self.d_kernels + other.d_kernels,
                             self.d_weights + other.d_weights)


def _diffusion_vjp(stage: StageParams, u_prev: np.ndarray, v: np.ndarray, ops, rbf: RbfConfig,
                   need_state: bool = True):
    """Pullback of ``v`` through ``u -> -F(u)`` (state and kernel/weight parts)."""
    centers, gamma = rbf.centers, rbf.width
    d_kernels = np.zeros_like(stage.kernels)
    d_weights = np.zeros_like(stage.weights)
    state = np.zeros_like(u_prev)
    m = stage.kernels.shape[-1]
    for l, op in enumerate(ops):
        x = op.down(u_prev)
        w = op.down(v)
        acc = np.zeros_like(x)
        for i in range(stage.kernels.shape[1]):
            k = stage.kernels[l, i]
            kbar = rotate180(k)
            z = conv2(x, k)
            phi, dphi, G = evaluate(z, stage.weights[l, i], centers, gamma)
            q = conv2_adjoint(w, kbar)
            d_weights[l, i] = -(G.T @ q.ravel())
            g = dphi.reshape(x.shape) * q
            d_kernels[l, i] = -(rotate180(conv2_kernel_vjp(phi.reshape(x.shape), w, m))
                                + conv2_kernel_vjp(x, g, m))
            if need_state:
                acc += conv2_adjoint(g, k)
        if need_state:
            state -= op.up(acc)
    return state, d_kernels, d_weights


def prox_vjp(u_tilde, lam: float, f, v):
    """Pullback through ``poisson_prox``.

    Returns ``(v * y, <z, v> * lam)`` where ``y = d u / d u_tilde`` and
    ``z = d u / d lam`` elementwise; the factor ``lam`` converts the
    lambda gradient to the log-parameterisation.  Where the radicand
    ``(u_tilde - lam)**2 + 4 lam f`` vanishes the symmetric subgradients
    ``y = 1/2`` and ``z = -1/2`` are used.
    """
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if lam == 0:
        return v.copy(), 0.0
    d = u_tilde - lam
    root = np.sqrt(d * d + 4.0 * lam * f)
    safe = root > 0
    denom = np.where(safe, root, 1.0)
    y = np.where(safe, 0.5 * (1.0 + d / denom), 0.5)
    z = np.where(safe, 0.5 * (-1.0 + (2.0 * f - d) / denom), -0.5)
    return v * y, float(np.vdot(z, v)) * lam


def stage_vjp(task: TaskKind, stage: StageParams, u_prev, f, v, ops, rbf: RbfConfig,
              need_state: bool = True) -> tuple[np.ndarray, ParamGradient]:
    """Cotangent on ``u_prev`` and parameter gradient of ``<u_t, v>``."""
    u_prev = np.asarray(u_prev, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (u_prev.shape == f.shape == v.shape):
        raise ValueError(f"dimension mismatch {u_prev.shape}, {f.shape}, {v.shape}")
    for op in ops:
        if (op.src_h, op.src_w) != u_prev.shape:
            raise ValueError("scale operators do not match the image size")
    lam = stage.lam
    if TaskKind(task) is TaskKind.GAUSSIAN:
        state, dk, dw = _diffusion_vjp(stage, u_prev, v, ops, rbf, need_state)
        if need_state:
            state += (1.0 - lam) * v
        d_lam_raw = -lam * float(np.vdot(u_prev - f, v))
    else:
        u_tilde = u_prev - diffusion_force(stage, u_prev, ops, rbf)
        vy, d_lam_raw = prox_vjp(u_tilde, lam, f, v)
        state, dk, dw = _diffusion_vjp(stage, u_prev, vy, ops, rbf, need_state)
        if need_state:
            state += vy
    return state, ParamGradient(d_lam_raw, dk, dw)


def state_vjp_gaussian(stage, u_prev, f, v, ops, rbf) -> np.ndarray:
    return stage_vjp(TaskKind.GAUSSIAN, stage, u_prev, f, v, ops, rbf)[0]


def param_vjp_gaussian(stage, u_prev, f, v, ops, rbf) -> ParamGradient:
    return stage_vjp(TaskKind.GAUSSIAN, stage, u_prev, f, v, ops, rbf, need_state=False)[1]


def state_vjp_poisson(stage, u_prev, f, v, ops, rbf) -> np.ndarray:
    return stage_vjp(TaskKind.POISSON, stage, u_prev, f, v, ops, rbf)[0]


def param_vjp_poisson(stage, u_prev, f, v, ops, rbf) -> ParamGradient:
    return stage_vjp(TaskKind.POISSON, stage, u_prev, f, v, ops, rbf, need_state=False)[1]


def _sample_loss_and_grad(model: ModelParams, sample, trainable: list[int], upto: int,
                          peak: float | None):
    f = np.asarray(sample.degraded, dtype=np.float64)
    gt = np.asarray(sample.ground_truth, dtype=np.float64)
    ops = model.operators(*f.shape)
    states = rollout(model, f, stages=upto, peak=peak, ops=ops)
    r = states[-1] - gt
    loss = 0.5 * float(np.vdot(r, r))
    grads = {}
    v = r
    first = min(trainable)
    for t in range(upto - 1, first - 1, -1):
        need_state = t > first
        state, pg = stage_vjp(model.task, model.stages[t], states[t], f, v, ops, model.rbf, need_state)
        if t in trainable:
            grads[t] = pg
        v = state
    return loss, grads


def loss_and_grad(model: ModelParams, samples, trainable_stages=None, upto: int | None = None,
                  peak: float | None = None, workers: int = 1):
    """Loss ``sum_s |u_upto^s - u_gt^s|^2 / 2`` and gradients for the trainable stages.

    Returns ``(loss, grads)`` where ``grads`` lists one :class:`ParamGradient`
    per index in ``sorted(trainable_stages)``.  ``upto`` truncates the
    rollout (greedy training); it defaults to all stages.  Per-sample work
    may run on ``workers`` threads; the reduction order is always the
    sample order, so results do not depend on the thread count.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    upto = model.num_stages if upto is None else upto
    if trainable_stages is None:
        trainable_stages = range(upto)
    trainable = sorted(set(trainable_stages))
    if not trainable or trainable[0] < 0 or trainable[-1] >= upto:
        raise ValueError(f"trainable stages {trainable} outside the rollout of {upto} stages")

    def run(s):
        return _sample_loss_and_grad(model, s, trainable, upto, peak)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, samples))
    else:
        results = [run(s) for s in samples]

    loss = 0.0
    total = {t: ParamGradient.zeros_like(model.stages[t]) for t in trainable}
    for l, g in results:
        loss += l
        for t in trainable:
            total[t] = total[t] + g[t]
    return loss, [total[t] for t in trainable]
