import numpy as np
import pytest
from scipy import ndimage

from msnd.influence import RbfConfig
from msnd.model import StageParams, init_model


def reflect_index(i, n):
    """Half-sample symmetric reflection of index ``i`` into ``[0, n)``."""
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


def naive_conv(u, k):
    """Nested-loop same-size convolution with explicit symmetric padding."""
    h, w = u.shape
    r = k.shape[0]
    c = r // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for a in range(r):
                for b in range(r):
                    s += k[a, b] * u[reflect_index(i + c - a, h), reflect_index(j + c - b, w)]
            out[i, j] = s
    return out


def dense(fn, in_shape):
    """Matrix of the linear map ``fn`` acting on images of ``in_shape``."""
    n = int(np.prod(in_shape))
    cols = []
    for p in range(n):
        e = np.zeros(n)
        e[p] = 1.0
        cols.append(np.asarray(fn(e.reshape(in_shape))).ravel())
    return np.array(cols).T


def random_model(task, rng, stages=2, filter_size=3, filters=3, scales=(1.5, 2.0, 3.0),
                 amplitude=2.0, num=9):
    rbf = RbfConfig(num, -amplitude, amplitude)
    m = init_model(task, stages, filter_size, filters, scales, rbf, 0.3)
    st = [StageParams(np.log(rng.uniform(0.1, 0.6)),
                      0.4 * rng.standard_normal(s.kernels.shape),
                      0.5 * rng.standard_normal(s.weights.shape)) for s in m.stages]
    return m.replace(stages=st)


def random_pair(task, rng, shape, amplitude=2.0):
    amp = amplitude / 1.2
    gt = rng.uniform(0.25 * amp, amp, shape)
    if task == "poisson":
        return gt, gt * rng.uniform(0.7, 1.3, shape)
    return gt, gt + 0.1 * amp * rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def golden_min(fn, lo, hi, tol=1e-12):
    inv = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def prox_oracle(ut, lam, f):
    obj = lambda u: 0.5 * (u - ut) ** 2 + lam * (u - f * np.log(u))
    return golden_min(obj, 1e-300, ut + lam + f + 10)


def tnrd_step(u, f, kernels, weights, lam, centers, gamma):
    """Single-scale reaction-diffusion step written directly against scipy.ndimage."""
    out = u - lam * (u - f)
    for k, w in zip(kernels, weights):
        z = ndimage.convolve(u, k, mode="reflect")
        d = z[..., None] - centers
        phi = np.exp(-d * d / (2 * gamma**2)) @ w
        out -= ndimage.convolve(phi, k[::-1, ::-1], mode="reflect")
    return out


def tnrd_vjp(u, f, v, kernels, weights, lam, centers, gamma):
    """Dense-matrix pullback of ``v`` through :func:`tnrd_step`.

    Returns ``(state, d_lambda_raw, d_kernels, d_weights)``.  Every operator
    is materialised from ``scipy.ndimage.convolve`` and differentiated by
    hand, sharing no code with the package.
    """
    shape = u.shape
    conv = lambda k: dense(lambda x: ndimage.convolve(x, k, mode="reflect"), shape)
    uf, vf = u.ravel(), v.ravel()
    state = (1 - lam) * vf
    m = kernels.shape[-1]
    d_k = np.zeros_like(kernels)
    d_w = np.zeros_like(weights)
    for i, (k, w) in enumerate(zip(kernels, weights)):
        K, Kb = conv(k), conv(k[::-1, ::-1])
        z = K @ uf
        d = z[:, None] - centers
        G = np.exp(-d * d / (2 * gamma**2))
        phi, dphi = G @ w, (-d / gamma**2 * G) @ w
        q = Kb.T @ vf
        state -= K.T @ (dphi * q)
        d_w[i] = -G.T @ q
        for a in range(m):
            for b in range(m):
                E = np.zeros((m, m))
                E[a, b] = 1.0
                dK, dKb = conv(E), conv(E[::-1, ::-1])
                d_k[i, a, b] = -(vf @ (dKb @ phi) + q @ (dphi * (dK @ uf)))
    d_lam_raw = -lam * float((uf - f.ravel()) @ vf)
    return state.reshape(shape), d_lam_raw, d_k, d_w


def central_diff(fn, x, h, idx=None):
    """Central differences of scalar ``fn`` at ``x`` along the coordinates ``idx``."""
    idx = range(x.size) if idx is None else idx
    out = []
    for j in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        out.append((fn(xp) - fn(xm)) / (2 * h))
    return np.array(out)


def rel_err(a, n):
    """Worst ``|a - n| / max(|a|, |n|, 1e-6 max|a|)`` over entries."""
    a, n = np.ravel(a), np.ravel(n)
    floor = 1e-6 * max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def image_crop(name, size=64):
    """Centered grayscale crop of a bundled scikit-image picture, in [0, 255]."""
    from skimage import data

    from msnd.dataset import center_crop, to_gray

    img = getattr(data, name)()
    if img.dtype != np.uint8:
        img = np.clip(img * 255.0 if img.max() <= 1 else img, 0, 255)
    return center_crop(to_gray(np.asarray(img, dtype=np.float64)), size)[0]


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""

    def record(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        print(line)
        request.config.acceptance_lines.append(line)
        assert ok, line

    return record
