"""Desk-scale denoiser networks with hand-written backward passes.

Tensors are channels-last ``(N, H, W, C)``.  Every model exposes ``params``
(a list of arrays updated in place by the optimizer), ``forward`` and
``backward``; ``backward`` returns gradients aligned with ``params``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .diffusion import NoiseSchedule, NumericError, clip_gradients, training_loss
from .resample import resize_bilinear

log = logging.getLogger(__name__)

MAGIC = b"URCD"
CHECKPOINT_VERSION = 1


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


def _row_cols(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H+2, W, 3*C): each padded row holds its 3 horizontal taps."""
    _, _, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, :, dx : dx + w, :] for dx in range(3)], axis=-1)


def _conv_rows(cols: np.ndarray, weight: np.ndarray, h: int) -> np.ndarray:
    # three matmuls over row-shifted views instead of one over a 9x im2col copy
    w3 = weight.reshape(3, cols.shape[-1], -1)
    out = cols[:, 0:h] @ w3[0]
    out += cols[:, 1 : h + 1] @ w3[1]
    out += cols[:, 2 : h + 2] @ w3[2]
    return out


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-padded 3x3 convolution; ``weight`` is (9*C_in, C_out) in (ky, kx, C) order.

    Returns the output and the row-tap buffer needed by :func:`conv3x3_backward`.
    """
    cols = _row_cols(x)
    return _conv_rows(cols, weight, x.shape[1]) + bias, cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray, c_in: int):
    n, h, w, c_out = dout.shape
    d2 = dout.reshape(-1, c_out)
    dw = np.concatenate([cols[:, dy : dy + h].reshape(-1, 3 * c_in).T @ d2 for dy in range(3)], axis=0)
    db = d2.sum(axis=0)
    # input gradient: correlate dout with the spatially flipped, transposed kernel
    k = weight.reshape(3, 3, c_in, c_out)[::-1, ::-1]
    k_t = np.ascontiguousarray(k.transpose(0, 1, 3, 2)).reshape(9 * c_out, c_in)
    dx = _conv_rows(_row_cols(dout), k_t, h)
    return dx, dw, db


class ConvDenoiser:
    """Stack of 3x3 convs with a noise-level MLP feeding per-channel biases.

    Layer 1 sees the noisy image (plus the conditioning image when
    ``cond_mode="concat"``); the noise embedding is added to its
    pre-activation.  The final layer is linear and predicts v.
    """

    def __init__(
        self,
        channels: int = 32,
        layers: int = 4,
        image_channels: int = 3,
        cond_mode: str = "none",
        embed_hidden: int = 16,
        stage_id: int = 0,
        cond_channels: int | None = None,
        seed: int = 0,
        dtype=np.float32,
        init: str = "he",
    ):
        if cond_mode not in ("none", "concat"):
            raise ValueError(f"unknown cond_mode {cond_mode!r}")
        if layers < 2:
            raise ValueError("need at least 2 conv layers")
        self.channels = channels
        self.layers = layers
        self.image_channels = image_channels
        self.cond_mode = cond_mode
        self.embed_hidden = embed_hidden
        self.stage_id = stage_id
        self.dtype = np.dtype(dtype)
        if cond_mode == "none":
            cond_channels = 0
        elif cond_channels is None:
            cond_channels = image_channels
        self.cond_channels = cond_channels
        self.in_channels = image_channels + cond_channels
        widths = [self.in_channels] + [channels] * (layers - 1) + [image_channels]
        self.widths = widths
        rng = np.random.default_rng(seed)
        self.params = []
        for i in range(layers):
            fan_in = 9 * widths[i]
            if init == "zeros":
                w = np.zeros((fan_in, widths[i + 1]))
            elif i == layers - 1:
                w = rng.standard_normal((fan_in, widths[i + 1])) * (0.1 / np.sqrt(fan_in))
            else:
                w = rng.standard_normal((fan_in, widths[i + 1])) * np.sqrt(2.0 / fan_in)
            self.params += [w.astype(dtype), np.zeros(widths[i + 1], dtype)]
        scale = 0.0 if init == "zeros" else 1.0
        self.params += [
            (rng.standard_normal(embed_hidden) * scale).astype(dtype),
            (rng.standard_normal(embed_hidden) * 0.5 * scale).astype(dtype),
            (rng.standard_normal((embed_hidden, channels)) * scale / np.sqrt(embed_hidden)).astype(dtype),
            np.zeros(channels, dtype),
        ]
        self._cache = None

    @property
    def spec(self) -> dict:
        return {
            "kind": "conv",
            "channels": self.channels,
            "layers": self.layers,
            "image_channels": self.image_channels,
            "cond_mode": self.cond_mode,
            "cond_channels": self.cond_channels,
            "embed_hidden": self.embed_hidden,
        }

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def forward(self, x_t, c_noise_val, cond=None):
        x_t = np.asarray(x_t, dtype=self.dtype)
        if x_t.ndim != 4 or x_t.shape[-1] != self.image_channels:
            raise ValueError(f"expected (N, H, W, {self.image_channels}), got {x_t.shape}")
        n = x_t.shape[0]
        if self.cond_mode == "concat":
            if cond is None:
                raise ValueError(f"stage {self.stage_id} requires a conditioning image")
            cond = np.asarray(cond, dtype=self.dtype)
            if cond.shape[:3] != x_t.shape[:3] or cond.shape[3] != self.cond_channels:
                raise ValueError(
                    f"cond shape {cond.shape} incompatible with input {x_t.shape} "
                    f"and {self.cond_channels} conditioning channels"
                )
            h = np.concatenate([x_t, cond], axis=-1)
        else:
            if cond is not None:
                raise ValueError(f"stage {self.stage_id} is unconditional")
            h = x_t
        c = np.broadcast_to(np.asarray(c_noise_val, dtype=self.dtype).reshape(-1), (n,)).reshape(n, 1)
        w1, b1, w2, b2 = self.params[-4:]
        u = c * w1 + b1
        hu, su = _silu(u)
        emb = hu @ w2 + b2

        cache = {"c": c, "u": u, "su": su, "hu": hu, "convs": []}
        for i in range(self.layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            z, cols = conv3x3(h, w, b)
            if i == 0:
                z = z + emb[:, None, None, :]
            if i < self.layers - 1:
                h, s = _silu(z)
                cache["convs"].append((cols, z, s))
            else:
                cache["convs"].append((cols, None, None))
                h = z
        self._cache = cache
        return h

    __call__ = forward

    def backward(self, upstream):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache = self._cache
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        d = np.asarray(upstream, dtype=self.dtype)
        demb = None
        for i in reversed(range(self.layers)):
            cols, z, s = cache["convs"][i]
            if z is not None:
                d = d * _silu_grad(z, s)
            if i == 0:
                demb = d.sum(axis=(1, 2))
            dx, dw, db = conv3x3_backward(d, cols, self.params[2 * i], self.widths[i])
            grads[2 * i], grads[2 * i + 1] = dw, db
            d = dx
        w1, b1, w2, b2 = self.params[-4:]
        k = len(self.params)
        grads[k - 1] = demb.sum(axis=0)
        grads[k - 2] = cache["hu"].T @ demb
        du = (demb @ w2.T) * _silu_grad(cache["u"], cache["su"])
        grads[k - 3] = du.sum(axis=0)
        grads[k - 4] = (du * cache["c"]).sum(axis=0)
        return grads


class LinearDenoiser:
    """v ≈ x_t·A + cond·B + c_noise·d + b, a per-pixel linear map.

    Being linear in its parameters, its optimum over a batch has a closed
    form (:meth:`fit_closed_form`), which makes it a useful reference for
    the training loop.
    """

    def __init__(self, image_channels: int = 3, cond_mode: str = "none", stage_id: int = 0, dtype=np.float64):
        self.image_channels = image_channels
        self.cond_mode = cond_mode
        self.stage_id = stage_id
        self.dtype = np.dtype(dtype)
        k = image_channels * (2 if cond_mode == "concat" else 1) + 1
        self.params = [np.zeros((k, image_channels), dtype), np.zeros(image_channels, dtype)]
        self._feat = None

    @property
    def spec(self) -> dict:
        return {"kind": "linear", "image_channels": self.image_channels, "cond_mode": self.cond_mode}

    def _features(self, x_t, c_noise_val, cond):
        x_t = np.asarray(x_t, dtype=self.dtype)
        n = x_t.shape[0]
        c = np.broadcast_to(np.asarray(c_noise_val, dtype=self.dtype).reshape(-1), (n,))
        parts = [x_t]
        if self.cond_mode == "concat":
            if cond is None:
                raise ValueError("conditioning image required")
            parts.append(np.asarray(cond, dtype=self.dtype))
        parts.append(np.broadcast_to(c[:, None, None, None], x_t.shape[:3] + (1,)))
        return np.concatenate(parts, axis=-1)

    def forward(self, x_t, c_noise_val, cond=None):
        f = self._features(x_t, c_noise_val, cond)
        self._feat = f
        return f @ self.params[0] + self.params[1]

    __call__ = forward

    def backward(self, upstream):
        if self._feat is None:
            raise RuntimeError("backward called before forward")
        k = self._feat.shape[-1]
        f = self._feat.reshape(-1, k)
        d = np.asarray(upstream).reshape(-1, self.image_channels)
        return [f.T @ d, d.sum(axis=0)]

    def fit_closed_form(self, x_t, c_noise_val, cond, v) -> None:
        f = self._features(x_t, c_noise_val, cond).reshape(-1, self.params[0].shape[0])
        f1 = np.concatenate([f, np.ones((f.shape[0], 1))], axis=1)
        sol, *_ = np.linalg.lstsq(f1, np.asarray(v).reshape(-1, self.image_channels), rcond=None)
        self.params[0][...] = sol[:-1]
        self.params[1][...] = sol[-1]


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainRun:
    steps: int = 1000
    batch: int = 8
    lr: float = 2e-3
    seed: int = 0
    crop: int | None = None  # random square crop per step, None = full size
    clip_norm: float = 1.0
    loss_curve: list[float] = field(default_factory=list)


def _batches(stream: Iterator, batch: int):
    while True:
        chunk = []
        for pair in stream:
            chunk.append(pair)
            if len(chunk) == batch:
                break
        if len(chunk) < batch:
            raise ValueError("dataset stream exhausted before training finished")
        yield chunk


def _stack_pairs(pairs, dtype):
    x0 = np.stack([p.target for p in pairs]).astype(dtype)
    if pairs[0].cond is None:
        return x0, None
    size = x0.shape[1]
    cond = np.stack([p.cond if p.cond.shape[0] == size else resize_bilinear(p.cond, size) for p in pairs])
    return x0, cond.astype(dtype)


def train_stage(model, dataset_stream: Iterable, schedule: NoiseSchedule, config: TrainRun):
    """Fit one stage with Adam and global-norm gradient clipping.

    ``dataset_stream`` yields objects with ``target`` and ``cond`` rasters
    (cond already at or below the target size; it is bilinearly resized).
    Returns ``(model, loss_curve)``.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.lr)
    curve = config.loss_curve
    curve.clear()
    if config.steps == 0:
        return model, curve
    stream = iter(dataset_stream)
    for step, pairs in zip(range(config.steps), _batches(stream, config.batch)):
        x0, cond = _stack_pairs(pairs, model.dtype)
        if config.crop and config.crop < x0.shape[1]:
            cy, cx = rng.integers(0, x0.shape[1] - config.crop + 1, 2)
            sl = (slice(None), slice(cy, cy + config.crop), slice(cx, cx + config.crop))
            x0 = x0[sl]
            cond = None if cond is None else cond[sl]
        try:
            loss, grads = training_loss(model, x0, cond, schedule, rng)
        except NumericError as exc:
            raise NumericError(f"stage {getattr(model, 'stage_id', '?')}: {exc} at step {step}") from exc
        grads = clip_gradients(grads, config.clip_norm)
        opt.step(grads)
        curve.append(loss)
        if not all(np.all(np.isfinite(p)) for p in model.params):
            raise NumericError(f"non-finite parameters after step {step}")
        if step % 200 == 0:
            log.debug("stage %s step %d loss %.5f", getattr(model, "stage_id", "?"), step, loss)
    return model, curve


def save_checkpoint(model, path) -> None:
    """Write header (magic, version, stage id, JSON layer spec) + float32 LE params."""
    spec = json.dumps(model.spec, sort_keys=True).encode()
    flat = np.concatenate([p.ravel() for p in model.params]).astype("<f4")
    header = MAGIC + struct.pack("<HhI", CHECKPOINT_VERSION, model.stage_id, len(spec)) + spec
    header += struct.pack("<Q", flat.size)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + flat.tobytes())
    tmp.replace(path)


def load_checkpoint(path, dtype=np.float32):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, stage_id, spec_len = struct.unpack_from("<HhI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + 8
    spec = json.loads(data[off : off + spec_len])
    off += spec_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    if off + 4 * count != len(data):
        raise ValueError(f"{path}: truncated or oversized parameter block")
    kind = spec.pop("kind")
    if kind == "conv":
        model = ConvDenoiser(**spec, stage_id=stage_id, dtype=dtype)
    elif kind == "linear":
        model = LinearDenoiser(**spec, stage_id=stage_id, dtype=dtype)
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    if count != sum(p.size for p in model.params):
        raise ValueError(f"{path}: parameter count {count} does not match layer spec")
    pos = 0
    for p in model.params:
        p[...] = flat[pos : pos + p.size].reshape(p.shape)
        pos += p.size
    return model
