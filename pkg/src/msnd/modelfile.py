"""Binary model files.

Layout (all numbers little-endian)::

    b"MSND"  u32 version  u8 task (0 gaussian, 1 poisson)
    u32 T  u32 m  u32 N_k  u32 n_scales  f64 * n_scales  (scale factors)
    u32 M  f64 min_center  f64 max_center  f64 gamma
    per stage:  f64 lambda_raw
                f64 * (S * N_k * m * m)   kernels, scale-major, filter-minor, row-major
                f64 * (S * N_k * M)       RBF weights
    u32 CRC-32 of every preceding byte
"""

import struct
import zlib

import numpy as np

from .influence import RbfConfig
from .model import ModelParams, StageParams, TaskKind

MAGIC = b"MSND"
VERSION = 1
_TASKS = {TaskKind.GAUSSIAN: 0, TaskKind.POISSON: 1}


class ModelFileError(ValueError):
    pass


def dumps(model: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<IB", VERSION, _TASKS[model.task])]
    parts.append(struct.pack("<IIII", model.num_stages, model.filter_size, model.num_filters,
                             len(model.scale_factors)))
    parts.append(np.asarray(model.scale_factors, dtype="<f8").tobytes())
    rbf = model.rbf
    parts.append(struct.pack("<Iddd", rbf.num, rbf.vmin, rbf.vmax, rbf.width))
    for st in model.stages:
        parts.append(struct.pack("<d", st.lambda_raw))
        parts.append(np.ascontiguousarray(st.kernels, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(st.weights, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ModelFileError("truncated model file")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        if self.pos + 8 * n > len(self.buf):
            raise ModelFileError("truncated model file")
        a = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos)
        self.pos += 8 * n
        return a.astype(np.float64).reshape(shape)


def loads(data: bytes) -> ModelParams:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ModelFileError("not an MSND model file")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ModelFileError("checksum mismatch")
    r = _Reader(payload)
    r.pos = 4
    version, task_tag = r.unpack("<IB")
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    tasks = {v: k for k, v in _TASKS.items()}
    if task_tag not in tasks:
        raise ModelFileError(f"unknown task tag {task_tag}")
    T, m, nk, ns = r.unpack("<IIII")
    factors = tuple(r.array((ns,)))
    M, vmin, vmax, gamma = r.unpack("<Iddd")
    rbf = RbfConfig(M, vmin, vmax, gamma)
    S = ns + 1
    stages = []
    for _ in range(T):
        (lam_raw,) = r.unpack("<d")
        stages.append(StageParams(lam_raw, r.array((S, nk, m, m)), r.array((S, nk, M))))
    if r.pos != len(payload):
        raise ModelFileError("trailing bytes in model file")
    try:
        return ModelParams(tasks[task_tag], stages, m, nk, factors, rbf)
    except ValueError as exc:
        raise ModelFileError(str(exc)) from None


def save(model: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads(fh.read())
