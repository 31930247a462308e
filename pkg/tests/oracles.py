"""Test doubles with known closed-form behaviour, and independent reference computations."""

import mpmath
import numpy as np
from scipy import ndimage


def coeffs_from_c(c, scale=0.25):
    sigma = np.exp(np.asarray(c, dtype=np.float64) / scale)
    d = np.sqrt(1.0 + sigma**2)
    return 1.0 / d, sigma / d


class PerfectDenoiser:
    """Knows the single clean image (model space) and returns the exact v."""

    cond_mode = "none"

    def __init__(self, image_t):
        self.image_t = np.asarray(image_t, dtype=np.float64)
        self.params = [np.ones(1)]
        self._last = None

    def forward(self, x_t, c, cond=None):
        a, s = coeffs_from_c(c)
        a = np.broadcast_to(a.reshape(-1), (x_t.shape[0],)).reshape(-1, 1, 1, 1)
        s = np.broadcast_to(s.reshape(-1), (x_t.shape[0],)).reshape(-1, 1, 1, 1)
        v = (a * x_t - self.image_t) / s
        self._last = v
        return self.params[0][0] * v

    def backward(self, upstream):
        return [np.array([np.sum(upstream * self._last)])]


class GaussianPosteriorDenoiser:
    """Exact posterior-mean denoiser for data t ~ N(mu, cov) over flattened pixels."""

    cond_mode = "none"
    params: list = []

    def __init__(self, mu, cov):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)

    def forward(self, x_t, c, cond=None):
        n = x_t.shape[0]
        flat = x_t.reshape(n, -1).astype(np.float64)
        a, s = coeffs_from_c(np.asarray(c).reshape(-1)[0])
        k = self.mu.size
        gain = a * self.cov @ np.linalg.inv(a * a * self.cov + s * s * np.eye(k))
        x0 = self.mu + (flat - a * self.mu) @ gain.T
        v = (a * flat - x0) / s
        return v.reshape(x_t.shape)

    def backward(self, upstream):
        return []


class ZeroModel:
    cond_mode = "none"

    def __init__(self):
        self.params = [np.zeros(1)]

    def forward(self, x_t, c, cond=None):
        return np.zeros_like(x_t)

    def backward(self, upstream):
        return [np.zeros(1)]


def _v_for(x_t, c, x0):
    a, s = coeffs_from_c(c)
    a = np.broadcast_to(np.reshape(a, -1), (x_t.shape[0],)).reshape(-1, 1, 1, 1)
    s = np.broadcast_to(np.reshape(s, -1), (x_t.shape[0],)).reshape(-1, 1, 1, 1)
    return (a * x_t - x0) / s


class ConstantDenoiser:
    """Predicts a flat image of one model-space value at any size."""

    def __init__(self, value_t, cond_mode="none"):
        self.value_t = value_t
        self.cond_mode = cond_mode
        self.params = []

    def forward(self, x_t, c, cond=None):
        return _v_for(np.asarray(x_t, np.float64), c, np.full(x_t.shape, self.value_t))

    def backward(self, upstream):
        return []


class CopyCondDenoiser:
    """A perfect upsampler: the clean image is the first 3 conditioning channels."""

    cond_mode = "concat"

    def __init__(self, cond_channels=3):
        self.cond_channels = cond_channels
        self.params = []

    def forward(self, x_t, c, cond=None):
        if cond is None:
            raise ValueError("needs cond")
        return _v_for(np.asarray(x_t, np.float64), c, np.asarray(cond, np.float64)[..., :3])

    def backward(self, upstream):
        return []


def fd_worst_per_param(model, x, c, cond, upstream, h=1e-5):
    """Worst relative error of ``model.backward`` against central differences, per parameter array."""

    def objective():
        return float(np.sum(model.forward(x, c, cond) * upstream))

    objective()
    grads = model.backward(upstream)
    out = []
    for p, g in zip(model.params, grads):
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = objective()
            p[idx] = orig - h
            down = objective()
            p[idx] = orig
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
        out.append(worst)
    return out


def oracle_fid(a, b):
    """Frechet distance with Tr((Sa Sb)^1/2) from mpmath's general sqrtm at 50 digits."""
    mpmath.mp.dps = 50
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    A = mpmath.matrix(ca.tolist())
    B = mpmath.matrix(cb.tolist())
    s = mpmath.sqrtm(A * B)
    tr = sum(s[i, i] for i in range(s.rows))
    d = mpmath.matrix((mu_a - mu_b).tolist())
    val = sum(x * x for x in d) + sum(A[i, i] + B[i, i] for i in range(A.rows)) - 2 * tr
    return float(mpmath.re(val))


def resample_rect_oracle(prev, rect, out_side, pad=8):
    """Bilinear sample of ``prev`` over a real-valued rect, white outside, via scipy."""
    padded = np.pad(prev, ((pad, pad), (pad, pad), (0, 0)), constant_values=1.0)
    cx, cy, cw, ch = rect
    xs = cx + (np.arange(out_side) + 0.5) * cw / out_side - 0.5 + pad
    ys = cy + (np.arange(out_side) + 0.5) * ch / out_side - 0.5 + pad
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(padded[..., c], [gy, gx], order=1, mode="nearest") for c in range(3)], axis=-1)
