"""A small reverse-mode network engine on float64 numpy arrays.

Feature maps are ``(N, C, F, T)``: batch, channels, frequency, time. Each
layer exposes ``init(rng)``, ``forward(params, x) -> (y, cache)`` and
``backward(params, cache, dy) -> (dx, grads)``; parameters live in a flat
dict keyed ``"<layer>.<param>"``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, NumericsError, ShapeError
from .numerics import SeededRng

PROB_CLAMP = 1e-12


def glorot(rng: SeededRng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def init(self, rng: SeededRng) -> dict[str, np.ndarray]:
        return {}

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}


class Conv2d(Layer):
    """Stride-1 convolution with 'same' zero padding and odd square kernels."""

    kind = "Conv2d"

    def __init__(self, c_in: int, c_out: int, size: int = 3):
        if size % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.size = c_in, c_out, size

    def init(self, rng):
        k = self.size
        w = glorot(rng, (self.c_out, self.c_in, k, k), self.c_in * k * k, self.c_out * k * k)
        return {"w": w, "b": np.zeros(self.c_out)}

    def _cols(self, x):
        # channel-major im2col: rows (c, i, j), columns (n, f, t)
        n, c, h, t = x.shape
        k, pad = self.size, self.size // 2
        xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = np.empty((c, k, k, n, h, t))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + h, j:j + t]
        return cols.reshape(c * k * k, n * h * t)

    def forward(self, p, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"Conv2d expects (N, {self.c_in}, F, T), got {x.shape}")
        n, _, h, t = x.shape
        cols = self._cols(x)
        y = p["w"].reshape(self.c_out, -1) @ cols + p["b"][:, None]
        y = y.reshape(self.c_out, n, h, t).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, p, cache, dy):
        cols, shape = cache
        n, c, h, t = shape
        k, pad = self.size, self.size // 2
        dym = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.c_out, -1)
        grads = {"w": (dym @ cols.T).reshape(p["w"].shape), "b": dym.sum(axis=1)}
        dcols = (p["w"].reshape(self.c_out, -1).T @ dym).reshape(c, k, k, n, h, t)
        dxp = np.zeros((c, n, h + 2 * pad, t + 2 * pad))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + t] += dcols[:, i, j]
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + t].transpose(1, 0, 2, 3)), grads

    def spec(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "size": self.size}


class ChannelAffine(Layer):
    """Per-channel ``scale * x + shift``, initialised to the identity."""

    kind = "ChannelAffine"

    def __init__(self, channels: int):
        self.channels = channels

    def init(self, rng):
        return {"scale": np.ones(self.channels), "shift": np.zeros(self.channels)}

    def forward(self, p, x):
        s = p["scale"][None, :, None, None]
        return x * s + p["shift"][None, :, None, None], x

    def backward(self, p, x, dy):
        grads = {"scale": (dy * x).sum(axis=(0, 2, 3)), "shift": dy.sum(axis=(0, 2, 3))}
        return dy * p["scale"][None, :, None, None], grads

    def spec(self):
        return {"kind": self.kind, "channels": self.channels}


class Relu(Layer):
    kind = "Relu"

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


class Tanh(Layer):
    kind = "Tanh"

    def forward(self, p, x):
        y = np.tanh(x)
        return y, y

    def backward(self, p, y, dy):
        return dy * (1.0 - y * y), {}


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "MaxPool2d"

    def __init__(self, size: tuple[int, int] = (2, 2)):
        self.size = tuple(size)

    def forward(self, p, x):
        n, c, h, t = x.shape
        ph, pt = self.size
        ho, to = h // ph, t // pt
        if ho == 0 or to == 0:
            raise ShapeError(f"input {x.shape} too small for pooling {self.size}")
        xr = x[:, :, :ho * ph, :to * pt].reshape(n, c, ho, ph, to, pt)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, to, ph * pt)
        arg = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, p, cache, dy):
        arg, shape = cache
        n, c, h, t = shape
        ph, pt = self.size
        ho, to = dy.shape[2], dy.shape[3]
        d = np.zeros((n, c, ho, to, ph * pt))
        np.put_along_axis(d, arg[..., None], dy[..., None], axis=-1)
        d = d.reshape(n, c, ho, to, ph, pt).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * ph, to * pt)
        dx = np.zeros(shape)
        dx[:, :, :ho * ph, :to * pt] = d
        return dx, {}

    def spec(self):
        return {"kind": self.kind, "size": list(self.size)}


class AvgPool2d(Layer):
    """Non-overlapping average pooling (floor on ragged edges)."""

    kind = "AvgPool2d"

    def __init__(self, size: tuple[int, int]):
        self.size = tuple(size)

    def forward(self, p, x):
        n, c, h, t = x.shape
        ph, pt = self.size
        ho, to = h // ph, t // pt
        xr = x[:, :, :ho * ph, :to * pt].reshape(n, c, ho, ph, to, pt)
        return xr.mean(axis=(3, 5)), x.shape

    def backward(self, p, shape, dy):
        n, c, h, t = shape
        ph, pt = self.size
        ho, to = dy.shape[2], dy.shape[3]
        dx = np.zeros(shape)
        d = np.repeat(np.repeat(dy, ph, axis=2), pt, axis=3) / (ph * pt)
        dx[:, :, :ho * ph, :to * pt] = d
        return dx, {}

    def spec(self):
        return {"kind": self.kind, "size": list(self.size)}


class MeanOverFreq(Layer):
    """Average over the frequency axis: ``(N, C, F, T) -> (N, C, T)``."""

    kind = "MeanOverFreq"

    def forward(self, p, x):
        return x.mean(axis=2), x.shape

    def backward(self, p, shape, dy):
        return np.broadcast_to(dy[:, :, None, :] / shape[2], shape).copy(), {}


class GlobalAvgPool2d(Layer):
    kind = "GlobalAvgPool2d"

    def forward(self, p, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, p, shape, dy):
        scale = 1.0 / (shape[2] * shape[3])
        return np.broadcast_to(dy[:, :, None, None] * scale, shape).copy(), {}


class Dense(Layer):
    kind = "Dense"

    def __init__(self, n_in: int, n_out: int, zero_init: bool = False):
        self.n_in, self.n_out, self.zero_init = n_in, n_out, zero_init

    def init(self, rng):
        if self.zero_init:
            w = np.zeros((self.n_out, self.n_in))
        else:
            w = glorot(rng, (self.n_out, self.n_in), self.n_in, self.n_out)
        return {"w": w, "b": np.zeros(self.n_out)}

    def forward(self, p, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Dense expects (N, {self.n_in}), got {x.shape}")
        return x @ p["w"].T + p["b"], x

    def backward(self, p, x, dy):
        return dy @ p["w"], {"w": dy.T @ x, "b": dy.sum(axis=0)}

    def spec(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, p, x):
        y = softmax(x)
        return y, y

    def backward(self, p, y, dy):
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, p, x):
        y = sigmoid(x)
        return y, y

    def backward(self, p, y, dy):
        return dy * y * (1.0 - y), {}


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- resizing, concatenation and temporal pooling -----------------------------

def linear_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation matrix of shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


class ResizeBilinear(Layer):
    """Separable bilinear resize to ``(out_f, out_t)``; ``out_t`` may be set per call."""

    kind = "ResizeBilinear"

    def __init__(self, out_f: int, out_t: int | None = None):
        self.out_f, self.out_t = out_f, out_t

    def forward(self, p, x, out_t: int | None = None):
        out_t = out_t or self.out_t
        if out_t is None:
            raise ShapeError("ResizeBilinear needs a target time length")
        rf = linear_resize_matrix(x.shape[2], self.out_f)
        rt = linear_resize_matrix(x.shape[3], out_t)
        y = np.einsum("fh,nchw,tw->ncft", rf, x, rt, optimize=True)
        return y, (rf, rt)

    def backward(self, p, cache, dy):
        rf, rt = cache
        return np.einsum("fh,ncft,tw->nchw", rf, dy, rt, optimize=True), {}

    def spec(self):
        return {"kind": self.kind, "out_f": self.out_f, "out_t": self.out_t}


def concat_forward(xs: list[np.ndarray], axis: int = 1):
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def concat_backward(sizes: list[int], dy: np.ndarray, axis: int = 1) -> list[np.ndarray]:
    return np.split(dy, np.cumsum(sizes)[:-1], axis=axis)


class AttentionPool1d(Layer):
    """``a = softmax_t(u^T tanh(V h_t))``, ``z = H a`` for ``H`` of shape ``(N, K, T)``.

    ``forward`` returns ``(z, a)``; ``backward`` takes ``(dz, da)``.
    """

    kind = "AttentionPool1d"

    def __init__(self, k: int, d: int = 32):
        self.k, self.d = k, d

    def init(self, rng):
        return {"v": glorot(rng, (self.d, self.k), self.k, self.d),
                "u": glorot(rng, (self.d,), self.d, 1)}

    def forward(self, p, h):
        g = np.tanh(np.einsum("dk,nkt->ndt", p["v"], h))
        s = np.einsum("d,ndt->nt", p["u"], g)
        a = softmax(s)
        z = np.einsum("nkt,nt->nk", h, a)
        return (z, a), (h, g, a)

    def backward(self, p, cache, dout):
        h, g, a = cache
        dz, da = dout
        dh = dz[:, :, None] * a[:, None, :]
        da_total = np.einsum("nk,nkt->nt", dz, h)
        if da is not None:
            da_total = da_total + da
        ds = a * (da_total - (da_total * a).sum(axis=1, keepdims=True))
        du = np.einsum("nt,ndt->d", ds, g)
        dpre = p["u"][None, :, None] * ds[:, None, :] * (1.0 - g * g)
        dv = np.einsum("ndt,nkt->dk", dpre, h)
        dh = dh + np.einsum("dk,ndt->nkt", p["v"], dpre)
        return dh, {"v": dv, "u": du}

    def spec(self):
        return {"kind": self.kind, "k": self.k, "d": self.d}


class MaxPool1dOverTime(Layer):
    kind = "MaxPool1dOverTime"

    def forward(self, p, h):
        arg = h.argmax(axis=2)
        z = np.take_along_axis(h, arg[..., None], axis=2)[..., 0]
        return z, (arg, h.shape)

    def backward(self, p, cache, dz):
        arg, shape = cache
        dh = np.zeros(shape)
        np.put_along_axis(dh, arg[..., None], dz[..., None], axis=2)
        return dh, {}


# -- sequential networks -----------------------------------------------------------

def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha1()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


@dataclass
class Tape:
    caches: list
    outputs: list
    net_id: int
    digest: str


class Sequential:
    """Ordered named layers sharing one flat parameter dict."""

    def __init__(self, layers: list[tuple[str, Layer]], params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.layers = layers
        if params is None:
            rng = SeededRng(seed)
            params = {}
            for name, layer in layers:
                for k, v in layer.init(rng.child(len(params))).items():
                    params[f"{name}.{k}"] = v
        self.params = params

    def layer_params(self, name: str) -> dict[str, np.ndarray]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, x: np.ndarray, keep: bool = True):
        """Run all layers. Returns ``(output, tape)``; the tape keeps every layer output."""
        caches, outputs = [], []
        for name, layer in self.layers:
            x, cache = layer.forward(self.layer_params(name), x)
            caches.append(cache if keep else None)
            outputs.append(x)
        tape = Tape(caches, outputs, id(self), params_digest(self.params) if keep else "")
        return x, tape

    def backward(self, tape: Tape, dy: np.ndarray):
        """Return ``(grads, dx)`` for the forward pass recorded in ``tape``."""
        if tape.net_id != id(self) or tape.digest != params_digest(self.params):
            raise ContractError("tape does not belong to the current parameters of this network")
        grads: dict[str, np.ndarray] = {}
        for (name, layer), cache in zip(reversed(self.layers), reversed(tape.caches)):
            dy, g = layer.backward(self.layer_params(name), cache, dy)
            for k, v in g.items():
                grads[f"{name}.{k}"] = v
        for k in self.params:
            grads.setdefault(k, np.zeros_like(self.params[k]))
        return grads, dy

    def spec(self) -> list[dict]:
        return [{"name": n, **l.spec()} for n, l in self.layers]


def forward(net: Sequential, x: np.ndarray):
    return net.forward(x)


def backward(net: Sequential, tape: Tape, upstream: np.ndarray):
    return net.backward(tape, upstream)


# -- losses ------------------------------------------------------------------

def soft_cross_entropy(probs: np.ndarray, targets: np.ndarray):
    """``-sum(t * log p)`` per row with clamped probabilities; returns ``(loss, dL/dp)``."""
    pc = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(targets * np.log(pc)).sum(axis=-1)
    active = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    return loss, np.where(active, -targets / pc, 0.0)


def binary_cross_entropy(probs: np.ndarray, targets: np.ndarray):
    """Summed per-class binary cross-entropy per row; returns ``(loss, dL/dp)``."""
    pc = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(targets * np.log(pc) + (1.0 - targets) * np.log(1.0 - pc)).sum(axis=-1)
    active = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    return loss, np.where(active, -targets / pc + (1.0 - targets) / (1.0 - pc), 0.0)


# -- optimisation --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in params:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}")
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_diff_check(params: dict[str, np.ndarray],
                      loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
                      eps: float = 1e-5, max_per_param: int | None = None,
                      rng: SeededRng | None = None, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads`` must read ``params`` (which is perturbed in place).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_per_param`` only a random subset of each tensor is probed.
    """
    _, grads = loss_and_grads()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or SeededRng(0)).choice(flat.size, max_per_param, replace=False)
        g = grads.get(name, np.zeros_like(p)).reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            up, _ = loss_and_grads()
            flat[i] = old - eps
            down, _ = loss_and_grads()
            flat[i] = old
            num = (up - down) / (2.0 * eps)
            err = abs(num - g[i]) / max(abs(num), abs(g[i]), floor)
            worst = max(worst, err)
    return worst
