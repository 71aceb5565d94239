"""Multi-scale nonlinear diffusion: parameters and forward inference.

One stage maps ``u_prev`` to ``u_t`` through the diffusion force

    F(u) = sum_l sum_i A_l.T ( kbar_{l,i} * phi_{l,i}( k_{l,i} * (A_l u) ) )

where ``l = 0`` is the native scale (``A_0 = I``) and ``kbar`` is the kernel
rotated by 180 degrees.  The Gaussian task takes an explicit reaction step,
``u_t = u_prev - F(u_prev) - lam * (u_prev - f)``; the Poisson task applies
the closed-form proximal map of the I-divergence to ``u_prev - F(u_prev)``.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .imaging import conv2, rotate180
from .influence import RbfConfig, basis, lorentzian_weights
from .pyramid import ScaleOperator, scale_operators


class TaskKind(Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


@dataclass
class StageParams:
    """Trainables of one stage.

    ``kernels`` has shape ``(S, N_k, m, m)`` and ``weights`` ``(S, N_k, M)``
    where ``S = L + 1`` counts the native scale plus each extra scale.
    ``lam = exp(lambda_raw)`` stays positive.
    """

    lambda_raw: float
    kernels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.lambda_raw = float(self.lambda_raw)
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.kernels.ndim != 4 or self.weights.ndim != 3:
            raise ValueError("kernels must be (S, N, m, m) and weights (S, N, M)")
        if self.kernels.shape[:2] != self.weights.shape[:2]:
            raise ValueError("kernels and weights disagree on scale/filter counts")

    @property
    def lam(self) -> float:
        return math.exp(self.lambda_raw)

    @property
    def size(self) -> int:
        return 1 + self.kernels.size + self.weights.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.lambda_raw], self.kernels.ravel(), self.weights.ravel()])

    def with_vector(self, vec: np.ndarray) -> "StageParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        nk = self.kernels.size
        return StageParams(
            vec[0],
            vec[1 : 1 + nk].reshape(self.kernels.shape).copy(),
            vec[1 + nk :].reshape(self.weights.shape).copy(),
        )

    def copy(self) -> "StageParams":
        return StageParams(self.lambda_raw, self.kernels.copy(), self.weights.copy())


@dataclass
class ModelParams:
    task: TaskKind
    stages: list[StageParams]
    filter_size: int
    num_filters: int
    scale_factors: tuple[float, ...] = (1.5, 2.0, 3.0)
    rbf: RbfConfig = field(default_factory=RbfConfig)

    def __post_init__(self):
        self.task = TaskKind(self.task)
        self.scale_factors = tuple(float(s) for s in self.scale_factors)
        if not self.stages:
            raise ValueError("a model needs at least one stage")
        if self.num_filters < 1:
            raise ValueError("num_filters must be >= 1")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd")
        if any(not math.isfinite(s) or s <= 1 for s in self.scale_factors):
            raise ValueError("scale factors must be finite and > 1")
        if len(set(self.scale_factors)) != len(self.scale_factors):
            raise ValueError("scale factors must be distinct")
        shape_k = (self.num_scales, self.num_filters, self.filter_size, self.filter_size)
        shape_w = (self.num_scales, self.num_filters, self.rbf.num)
        for t, st in enumerate(self.stages):
            if st.kernels.shape != shape_k or st.weights.shape != shape_w:
                raise ValueError(f"stage {t} has shapes {st.kernels.shape}/{st.weights.shape}, "
                                 f"expected {shape_k}/{shape_w}")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def num_scales(self) -> int:
        return 1 + len(self.scale_factors)

    def operators(self, h: int, w: int) -> list[ScaleOperator]:
        return scale_operators(self.scale_factors, h, w)

    def to_vector(self, stage_indices=None) -> np.ndarray:
        if stage_indices is None:
            stage_indices = range(self.num_stages)
        return np.concatenate([self.stages[t].to_vector() for t in sorted(stage_indices)])

    def with_vector(self, vec: np.ndarray, stage_indices=None) -> "ModelParams":
        """Copy of the model with the given stages replaced from a packed vector.

        Packing order: stages ascending; within a stage ``lambda_raw``, then
        kernels (scale-major, filter-minor, row-major), then RBF weights.
        """
        if stage_indices is None:
            stage_indices = range(self.num_stages)
        stages = [st.copy() for st in self.stages]
        pos = 0
        for t in sorted(stage_indices):
            n = stages[t].size
            stages[t] = stages[t].with_vector(vec[pos : pos + n])
            pos += n
        if pos != len(vec):
            raise ValueError(f"vector has {len(vec)} values, model slice needs {pos}")
        return self.replace(stages=stages)

    def replace(self, **changes) -> "ModelParams":
        kw = dict(task=self.task, stages=self.stages, filter_size=self.filter_size,
                  num_filters=self.num_filters, scale_factors=self.scale_factors, rbf=self.rbf)
        kw.update(changes)
        return ModelParams(**kw)

    def copy(self) -> "ModelParams":
        return self.replace(stages=[st.copy() for st in self.stages])


def dct_filters(m: int, count: int, seed: int = 0) -> np.ndarray:
    """``count`` unit-norm ``m x m`` filters from the 2D DCT basis minus the DC atom.

    Atoms are taken in order of increasing frequency.  Requests beyond the
    ``m*m - 1`` available atoms are filled with seeded random zero-mean
    unit-norm filters.
    """
    n = np.arange(m)
    C = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * m))
    C[0] *= 1.0 / math.sqrt(m)
    C[1:] *= math.sqrt(2.0 / m)
    order = sorted(((p, q) for p in range(m) for q in range(m) if (p, q) != (0, 0)),
                   key=lambda pq: (pq[0] + pq[1], pq[0]))
    atoms = [np.outer(C[p], C[q]) for p, q in order[:count]]
    rng = np.random.default_rng(seed)
    while len(atoms) < count:
        k = rng.standard_normal((m, m))
        k -= k.mean()
        atoms.append(k / np.linalg.norm(k))
    return np.array(atoms)


def init_model(task, stages: int, filter_size: int, num_filters: int | None = None,
               scale_factors=(1.5, 2.0, 3.0), rbf: RbfConfig | None = None,
               lam: float = 0.1, seed: int = 0) -> ModelParams:
    """Fresh model: DCT kernels, Lorentzian-derivative influences, ``lam`` everywhere."""
    task = TaskKind(task)
    if num_filters is None:
        num_filters = filter_size * filter_size - 1
    if rbf is None:
        rbf = RbfConfig()
    if stages < 1:
        raise ValueError("stages must be >= 1")
    n_scales = 1 + len(tuple(scale_factors))
    kernels = np.broadcast_to(dct_filters(filter_size, num_filters, seed),
                              (n_scales, num_filters, filter_size, filter_size))
    weights = np.broadcast_to(lorentzian_weights(rbf), (n_scales, num_filters, rbf.num))
    stage_list = [StageParams(math.log(lam), kernels.copy(), weights.copy()) for _ in range(stages)]
    return ModelParams(task, stage_list, filter_size, num_filters, tuple(scale_factors), rbf)


def _check_ops(u: np.ndarray, ops: list[ScaleOperator], stage: StageParams) -> None:
    if len(ops) != stage.kernels.shape[0]:
        raise ValueError(f"stage has {stage.kernels.shape[0]} scales but {len(ops)} operators given")
    for op in ops:
        if (op.src_h, op.src_w) != u.shape:
            raise ValueError(f"operator source {op.src_h}x{op.src_w} does not match image {u.shape}")


def diffusion_force(stage: StageParams, u: np.ndarray, ops: list[ScaleOperator],
                    rbf: RbfConfig) -> np.ndarray:
    """``sum_l A_l.T sum_i kbar * phi(k * A_l u)`` for one stage."""
    u = np.asarray(u, dtype=np.float64)
    _check_ops(u, ops, stage)
    centers, gamma = rbf.centers, rbf.width
    force = np.zeros_like(u)
    for l, op in enumerate(ops):
        x = op.down(u)
        acc = np.zeros_like(x)
        for i in range(stage.kernels.shape[1]):
            w = stage.weights[l, i]
            if not w.any():
                continue
            k = stage.kernels[l, i]
            z = conv2(x, k)
            phi = (basis(z, centers, gamma) @ w).reshape(x.shape)
            acc += conv2(phi, rotate180(k))
        force += op.up(acc)
    return force


def _check_pair(u_prev: np.ndarray, f: np.ndarray) -> None:
    if u_prev.shape != f.shape:
        raise ValueError(f"dimension mismatch {u_prev.shape} vs {f.shape}")


def gaussian_step(stage: StageParams, u_prev, f, ops, rbf: RbfConfig) -> np.ndarray:
    u_prev = np.asarray(u_prev, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    _check_pair(u_prev, f)
    # f + (1 - lam) (u - f) is exact both for lam = 1 and for u == f
    return f + (1.0 - stage.lam) * (u_prev - f) - diffusion_force(stage, u_prev, ops, rbf)


def poisson_prox(u_tilde, lam: float, f) -> np.ndarray:
    """Pointwise minimiser of ``(u - u_tilde)**2 / 2 + lam * (u - f log u)``."""
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if np.any(f < 0):
        raise ValueError("Poisson observation has negative entries")
    if lam == 0:
        return u_tilde.copy()
    d = u_tilde - lam
    return 0.5 * (d + np.sqrt(d * d + 4.0 * lam * f))


def poisson_step(stage: StageParams, u_prev, f, ops, rbf: RbfConfig) -> np.ndarray:
    u_prev = np.asarray(u_prev, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    _check_pair(u_prev, f)
    u_tilde = u_prev - diffusion_force(stage, u_prev, ops, rbf)
    return poisson_prox(u_tilde, stage.lam, f)


def initial_state(task: TaskKind, f: np.ndarray, peak: float | None = None) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if TaskKind(task) is TaskKind.GAUSSIAN:
        return f.copy()
    if peak is None:
        peak = float(f.max()) if f.max() > 0 else 1.0
    return np.maximum(f, 1e-4 * peak)


def step(model: ModelParams, t: int, u_prev, f, ops) -> np.ndarray:
    fn = gaussian_step if model.task is TaskKind.GAUSSIAN else poisson_step
    return fn(model.stages[t], u_prev, f, ops, model.rbf)


def rollout(model: ModelParams, f, stages: int | None = None, peak: float | None = None,
            ops=None) -> list[np.ndarray]:
    """States ``[u_0, u_1, ..., u_stages]``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("expected a 2D image")
    if model.task is TaskKind.POISSON and np.any(f < 0):
        raise ValueError("Poisson observation has negative entries")
    if ops is None:
        ops = model.operators(*f.shape)
    n = model.num_stages if stages is None else stages
    states = [initial_state(model.task, f, peak)]
    for t in range(n):
        states.append(step(model, t, states[-1], f, ops))
    return states


def infer(model: ModelParams, f, peak: float | None = None) -> np.ndarray:
    """Run all ``T`` stages on the degraded image ``f`` and return ``u_T``.

    ``peak`` only sets the positivity floor of the Poisson starting point;
    it defaults to ``max(f)``.
    """
    return rollout(model, f, peak=peak)[-1]
