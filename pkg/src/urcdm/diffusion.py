"""Noise schedule, v-parametrization, training objective and samplers.

Noise levels are expressed as variance-exploding sigmas (``x + sigma * eps``)
for conditioning, and as the equivalent variance-preserving coefficients
``alpha = 1/sqrt(1+sigma^2)``, ``sigma' = sigma/sqrt(1+sigma^2)`` for the
v-parametrized arithmetic.  Model-space images live in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .resample import from_model, to_model


class NumericError(FloatingPointError):
    """A loss or sampler state went non-finite."""


class Denoiser(Protocol):
    """The F(c_noise, x_t, cond) contract every stage model satisfies."""

    cond_mode: str  # "none" or "concat"
    params: list[np.ndarray]

    def forward(self, x_t: np.ndarray, c_noise_val, cond: np.ndarray | None = None) -> np.ndarray: ...

    def backward(self, upstream: np.ndarray) -> list[np.ndarray]: ...


C_NOISE_SCALE = 0.25


def c_noise(sigma, scale: float = C_NOISE_SCALE):
    """Scalar noise-level feature fed to the network: ``scale * ln(sigma)``."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~(s > 0)):
        raise ValueError(f"sigma must be > 0, got {sigma}")
    out = np.log(s) * scale
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class VParam:
    """Signal/noise coefficients of one step (variance-preserving view)."""

    alpha: float
    sigma: float

    def noised(self, x0, eps):
        return self.alpha * x0 + self.sigma * eps

    def v_target(self, x0, eps):
        return self.alpha * eps - self.sigma * x0

    def x0_from(self, x_t, v):
        return self.alpha * x_t - self.sigma * v

    def eps_from(self, x_t, v):
        return self.sigma * x_t + self.alpha * v


def v_target(x0: np.ndarray, eps: np.ndarray, step: VParam) -> np.ndarray:
    if np.shape(x0) != np.shape(eps):
        raise ValueError(f"shape mismatch: {np.shape(x0)} vs {np.shape(eps)}")
    return step.v_target(x0, eps)


@dataclass(frozen=True)
class NoiseSchedule:
    """Descending noise levels; ``sigmas`` are variance-exploding values."""

    sigmas: tuple[float, ...]
    c_noise_scale: float = C_NOISE_SCALE

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("need at least one sigma")
        if np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("sigmas must be positive and strictly decreasing")

    @classmethod
    def geometric(cls, num_steps: int = 50, sigma_max: float = 80.0, sigma_min: float = 0.002, **kw) -> "NoiseSchedule":
        if num_steps == 1:
            return cls((float(sigma_max),), **kw)
        return cls(tuple(float(v) for v in np.geomspace(sigma_max, sigma_min, num_steps)), **kw)

    @property
    def num_steps(self) -> int:
        return len(self.sigmas)

    @property
    def alphas(self) -> np.ndarray:
        s = np.asarray(self.sigmas)
        return 1.0 / np.sqrt(1.0 + s * s)

    @property
    def vp_sigmas(self) -> np.ndarray:
        s = np.asarray(self.sigmas)
        return s / np.sqrt(1.0 + s * s)

    def step(self, i: int) -> VParam:
        s = self.sigmas[i]
        d = np.sqrt(1.0 + s * s)
        return VParam(float(1.0 / d), float(s / d))

    def c_noise(self, i: int) -> float:
        return c_noise(self.sigmas[i], self.c_noise_scale)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _check_cond(model, cond) -> None:
    wants = getattr(model, "cond_mode", "none") != "none"
    if wants and cond is None:
        raise ValueError("this stage requires a conditioning image")
    if not wants and cond is not None:
        raise ValueError("this stage is unconditional but a conditioning image was given")


def training_loss(model: Denoiser, x0, cond, schedule: NoiseSchedule, rng) -> tuple[float, list[np.ndarray]]:
    """MSE between the model's v-prediction and the true v at random steps.

    ``x0`` is a batch (N, H, W, C) in [0, 1]; each sample draws its own step
    index uniformly.  Returns the loss and its gradient w.r.t. ``model.params``.
    """
    _check_cond(model, cond)
    rng = _rng(rng)
    x0 = np.asarray(x0)
    dtype = x0.dtype if x0.dtype.kind == "f" else np.float64
    t0 = to_model(x0.astype(dtype))
    n = t0.shape[0]
    idx = rng.integers(0, schedule.num_steps, size=n)
    eps = rng.standard_normal(t0.shape).astype(dtype)
    alpha = schedule.alphas[idx].astype(dtype).reshape(n, 1, 1, 1)
    sig = schedule.vp_sigmas[idx].astype(dtype).reshape(n, 1, 1, 1)
    x_t = alpha * t0 + sig * eps
    target = alpha * eps - sig * t0
    c = c_noise(np.asarray(schedule.sigmas)[idx], schedule.c_noise_scale)
    cond_t = None if cond is None else to_model(np.asarray(cond, dtype=dtype))
    pred = model.forward(x_t, c, cond_t)
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")
    grads = model.backward(diff * (2.0 / diff.size))
    return loss, grads


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> list[np.ndarray]:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    g = global_norm(grads)
    if g <= max_norm:
        return [np.array(x, copy=True) for x in grads]
    scale = max_norm / g
    return [x * x.dtype.type(scale) if x.dtype.kind == "f" else x * scale for x in grads]


def _sampler(
    model, schedule, cond, shape, seed, known=None, mask=None, eta=0.0, dtype=np.float32, known_noise="fixed", init_noise=None
):
    _check_cond(model, cond)
    main_seq, constraint_seq = np.random.SeedSequence(_seed_entropy(seed)).spawn(2)
    rng = np.random.default_rng(main_seq)
    rng_known = np.random.default_rng(constraint_seq)
    x = rng.standard_normal(shape).astype(dtype)
    if init_noise is not None:
        if np.shape(init_noise) != tuple(shape):
            raise ValueError(f"init_noise has shape {np.shape(init_noise)}, expected {tuple(shape)}")
        x = np.asarray(init_noise, dtype=dtype)
    cond_t = None if cond is None else to_model(np.asarray(cond, dtype=dtype))
    known_t = None if known is None else to_model(np.asarray(known, dtype=dtype))
    n = shape[0]
    x0_hat = x
    if known_noise not in ("fixed", "fresh"):
        raise ValueError(f"known_noise must be 'fixed' or 'fresh', got {known_noise!r}")
    eps_known = None
    if known_t is not None:
        # with a supplied starting noise the pinned pixels ride on that same draw
        eps_known = x if init_noise is not None else rng_known.standard_normal(shape).astype(dtype)
    for i in range(schedule.num_steps):
        st = schedule.step(i)
        if known_t is not None:
            if known_noise == "fresh" and i > 0:
                eps_known = rng_known.standard_normal(shape).astype(dtype)
            noisy = st.alpha * known_t + st.sigma * eps_known
            x = np.where(mask, noisy, x).astype(dtype)
        c = np.full(n, schedule.c_noise(i))
        v = model.forward(x, c, cond_t)
        x0_hat = np.clip(st.x0_from(x, v), -1.0, 1.0).astype(dtype)
        # eps re-derived from the clipped x0 keeps the update consistent with it
        eps_hat = ((x - st.alpha * x0_hat) / st.sigma).astype(dtype)
        if not np.all(np.isfinite(x0_hat)):
            raise NumericError(f"non-finite sampler state at step {i}")
        if i + 1 < schedule.num_steps:
            nxt = schedule.step(i + 1)
            if eta > 0:
                a2, a2n = st.alpha**2, nxt.alpha**2
                s_eta = eta * np.sqrt((1 - a2n) / (1 - a2) * (1 - a2 / a2n))
                dir_coef = np.sqrt(max(nxt.sigma**2 - s_eta**2, 0.0))
                x = nxt.alpha * x0_hat + dir_coef * eps_hat + s_eta * rng.standard_normal(shape).astype(dtype)
            else:
                x = nxt.alpha * x0_hat + nxt.sigma * eps_hat
            x = x.astype(dtype)
    out = from_model(x0_hat)
    if known is not None:
        out = np.where(mask, np.asarray(known, dtype=dtype), out)
    return out


def _seed_entropy(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed.entropy if seed.spawn_key == () else [seed.entropy, *seed.spawn_key]
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return int(seed)


def sample(
    model: Denoiser, schedule: NoiseSchedule, cond, shape, rng, *, eta: float = 0.0, init_noise=None, dtype=np.float32
) -> np.ndarray:
    """Draw images of ``shape`` (N, H, W, C); returns floats in [0, 1].

    Deterministic in (model parameters, cond, seed).  ``eta=0`` is the
    deterministic DDIM-style update; ``eta>0`` adds ancestral noise.
    ``init_noise`` replaces the seeded starting noise.
    """
    return _sampler(model, schedule, cond, tuple(shape), rng, eta=eta, dtype=dtype, init_noise=init_noise)


def sample_constrained(
    model: Denoiser,
    schedule: NoiseSchedule,
    cond,
    known: np.ndarray,
    mask: np.ndarray,
    rng,
    *,
    eta: float = 0.0,
    known_noise: str = "fixed",
    init_noise=None,
    dtype=np.float32,
) -> np.ndarray:
    """Sample with the pixels under ``mask`` pinned to ``known`` ([0, 1]).

    Before every model call the masked pixels are overwritten with ``known``
    forward-noised to the current level; the returned image equals ``known``
    exactly where ``mask`` is set.  ``known_noise="fixed"`` noises ``known``
    with one draw for all steps, so the pinned region follows a consistent
    trajectory; ``"fresh"`` redraws that noise every step.  A supplied
    ``init_noise`` is both the starting noise and the fixed draw for the
    pinned pixels.
    """
    known = np.asarray(known)
    mask = np.asarray(mask, dtype=bool)
    if known.ndim != 4:
        raise ValueError("known must be (N, H, W, C)")
    if mask.ndim == 2:
        mask = mask[None, :, :, None]
    elif mask.ndim == 3:
        mask = mask[..., None]
    try:
        mask = np.broadcast_to(mask, known.shape)
    except ValueError:
        raise ValueError(f"mask shape {mask.shape} does not fit known {known.shape}") from None
    return _sampler(
        model, schedule, cond, known.shape, rng, known=known, mask=mask, eta=eta, dtype=dtype, known_noise=known_noise,
        init_noise=init_noise,
    )
