"""Small numpy neural-network core with hand-written backward passes.

Every layer keeps its forward activations on an explicit tape and replays
them in reverse. There is no general autodiff: the model is a fixed stack of
MLPs, so each op only needs a forward and a matching backward function.

Arrays follow the dtype of the parameters they are combined with. Training
uses float32; gradient checks build the same networks in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Elementary ops


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: x {x.shape} incompatible with w {w.shape}")
    if b.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense: bias {b.shape} incompatible with w {w.shape}")
    y = x @ w
    y += b.reshape(1, -1)
    return y


def dense_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return (dx, dw, db) for y = x @ w + b."""
    return dy @ w.T, x.T @ dy, dy.sum(axis=0, keepdims=True)


def layernorm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layernorm: bad input shape {x.shape}")
    if gain.shape[-1] != x.shape[1] or bias.shape[-1] != x.shape[1]:
        raise DimensionError("layernorm: gain/bias width must match input")
    # row reductions as mat-vec products run far faster than ndarray.mean on BLAS builds
    n = x.shape[1]
    w = np.full((n, 1), 1.0 / n, dtype=x.dtype)
    xhat = x - x @ w
    inv = 1.0 / np.sqrt((xhat * xhat) @ w + eps)
    xhat *= inv
    y = xhat * gain.reshape(1, -1)
    y += bias.reshape(1, -1)
    return y, (xhat, inv, gain)


def layernorm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    n = xhat.shape[1]
    ones = np.ones((n, 1), dtype=xhat.dtype)
    dgain = (dy * xhat).sum(axis=0, keepdims=True)
    dbias = dy.sum(axis=0, keepdims=True)
    dxhat = dy * gain.reshape(1, -1)
    dx = n * dxhat
    dx -= dxhat @ ones
    dx -= xhat * ((dxhat * xhat) @ ones)
    dx *= inv / n
    return dx, dgain, dbias


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


# tanh(softplus(x)) == 1 to float64 precision above this
_MISH_CLAMP = 20.0


def _tanh_softplus(x: np.ndarray):
    """tanh(softplus(x)) and sigmoid(x) from a single exp."""
    n = np.exp(np.minimum(x, _MISH_CLAMP))
    p = n * (n + 2.0)
    return p / (p + 2.0), n / (n + 1.0)


def mish(x: np.ndarray) -> np.ndarray:
    n = np.exp(np.minimum(x, _MISH_CLAMP))
    p = n * (n + 2.0)
    p /= p + 2.0
    p *= x
    return p


def mish_forward(x: np.ndarray):
    """Mish with a cache for :func:`mish_backward_cached`."""
    t, s = _tanh_softplus(x)
    return x * t, (x, t, s)


def mish_backward_cached(dy: np.ndarray, cache) -> np.ndarray:
    x, t, s = cache
    d = t * t
    np.subtract(1.0, d, out=d)
    d *= s
    d *= x
    d += t
    d *= dy
    return d


def mish_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return mish_backward_cached(dy, (x,) + _tanh_softplus(x))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def simplicial(z: np.ndarray, v: int, tau: float = 1.0) -> np.ndarray:
    """Softmax over consecutive groups of ``v`` entries in every row."""
    if z.shape[-1] % v:
        raise DimensionError(f"simplicial: width {z.shape[-1]} not divisible by {v}")
    shape = z.shape
    g = z.reshape(*shape[:-1], -1, v)
    return softmax_rows(g / tau).reshape(shape)


def simplicial_backward(dy: np.ndarray, y: np.ndarray, v: int, tau: float = 1.0) -> np.ndarray:
    shape = y.shape
    yg = y.reshape(*shape[:-1], -1, v)
    dg = dy.reshape(yg.shape)
    return (softmax_backward(dg, yg) / tau).reshape(shape)


# ---------------------------------------------------------------------------
# Parameters and optimizer


@dataclass
class ParamStore:
    """Named parameter arrays with gradient and Adam moment buffers."""

    dtype: np.dtype = np.float32
    values: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray, lr_scale: float = 1.0) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)
        self.lr_scale[name] = float(lr_scale)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def grad_norm(self, names: Sequence[str] | None = None) -> float:
        names = self.names() if names is None else names
        return float(np.sqrt(sum(float(np.sum(np.square(self.grads[n], dtype=np.float64)))
                                 for n in names)))

    def num_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def subset(self, names: Sequence[str]) -> "ParamStore":
        """Independent copy holding only ``names`` (values copied, fresh buffers)."""
        out = ParamStore(dtype=self.dtype)
        for n in names:
            out.add(n, self.values[n].copy(), self.lr_scale[n])
        return out


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = None) -> float:
    """Clip by global norm, apply one bias-corrected Adam update, zero grads.

    Returns the global gradient norm measured before clipping.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
    norm = store.grad_norm()
    # relative slack so an already-clipped gradient is not rescaled by rounding
    if clip_norm is not None and norm > clip_norm * (1.0 + 1e-6):
        scale = np.dtype(store.dtype).type(clip_norm / norm)
        for g in store.grads.values():
            g *= scale
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.values.items():
        g = store.grads[name]
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = (lr * store.lr_scale[name]) * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= step.astype(p.dtype, copy=False)
        g[...] = 0
    return norm


def ema_update(target: ParamStore, online: ParamStore, momentum: float) -> None:
    """target <- momentum * target + (1 - momentum) * online, in place."""
    for name, t in target.values.items():
        if name not in online.values:
            raise KeyError(f"ema: online store has no parameter {name!r}")
        o = online.values[name]
        if o.shape != t.shape:
            raise DimensionError(f"ema: shape mismatch for {name!r}: {t.shape} vs {o.shape}")
        if momentum == 1.0:
            continue
        t *= momentum
        t += (1.0 - momentum) * o


# ---------------------------------------------------------------------------
# MLP built from NormedLinear blocks


@dataclass(frozen=True)
class MlpSpec:
    """Input width followed by each layer's output width."""

    layer_widths: tuple
    final_activation: str = "linear"  # simplicial | linear | gaussian_head

    def __post_init__(self):
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise DimensionError(f"MlpSpec needs >=1 layer with positive widths: {self.layer_widths}")
        if self.final_activation not in ("simplicial", "linear", "gaussian_head"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")


class Mlp:
    """Stack of NormedLinear(linear -> LayerNorm -> Mish) blocks.

    The last block is NormedLinear with a simplicial activation for latent
    outputs, or a bare linear layer for logits and Gaussian heads.
    Parameters live in a ParamStore under ``prefix``; ``forward`` may be
    pointed at another store with identical names (EMA targets).
    """

    def __init__(self, store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator,
                 simplicial_v: int = 8, tau: float = 1.0, lr_scale: float = 1.0,
                 zero_last: bool = False):
        self.store = store
        self.prefix = prefix
        self.spec = spec
        self.v = simplicial_v
        self.tau = tau
        widths = spec.layer_widths
        self.n_layers = len(widths) - 1
        if spec.final_activation == "simplicial" and widths[-1] % simplicial_v:
            raise DimensionError("latent width must be divisible by the simplex size")
        self.param_names: list[str] = []
        for i in range(self.n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = np.sqrt(1.0 / fan_in)
            last = i == self.n_layers - 1
            if last and zero_last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(1, fan_out)) if not (last and zero_last) \
                else np.zeros((1, fan_out))
            self._add(f"{i}.w", w, lr_scale)
            self._add(f"{i}.b", b, lr_scale)
            if self._normed(i):
                self._add(f"{i}.ln_g", np.ones((1, fan_out)), lr_scale)
                self._add(f"{i}.ln_b", np.zeros((1, fan_out)), lr_scale)

    def _add(self, suffix, value, lr_scale):
        name = f"{self.prefix}.{suffix}"
        self.store.add(name, value, lr_scale)
        self.param_names.append(name)

    def _normed(self, i: int) -> bool:
        return i < self.n_layers - 1 or self.spec.final_activation == "simplicial"

    @property
    def in_dim(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def forward(self, x: np.ndarray, params: ParamStore | None = None, record: bool = True):
        """Return (y, tape). ``tape`` is None when ``record`` is False."""
        p = (params or self.store).values
        pre = self.prefix
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"{pre}: expected input width {self.in_dim}, got {x.shape[-1]}")
        tape = [] if record else None
        h = x
        for i in range(self.n_layers):
            w, b = p[f"{pre}.{i}.w"], p[f"{pre}.{i}.b"]
            a = dense_forward(h, w, b)
            if not self._normed(i):
                if record:
                    tape.append((h, None, None, None))
                h = a
                continue
            n, ln_cache = layernorm_forward(a, p[f"{pre}.{i}.ln_g"], p[f"{pre}.{i}.ln_b"])
            if i < self.n_layers - 1:
                if record:
                    out, n = mish_forward(n)
                else:
                    out = mish(n)
            else:
                out = simplicial(n, self.v, self.tau)
            if record:
                tape.append((h, ln_cache, n, out))
            h = out
        return h, tape

    def __call__(self, x, params=None):
        return self.forward(x, params, record=False)[0]

    def backward(self, tape, dy: np.ndarray, param_grads: bool = True,
                 params: ParamStore | None = None) -> np.ndarray:
        """Backpropagate ``dy``; accumulate into store grads if ``param_grads``."""
        if tape is None:
            raise StateError(f"{self.prefix}: backward called without a recorded forward pass")
        store = params or self.store
        p, grads = store.values, store.grads
        pre = self.prefix
        d = dy
        for i in reversed(range(self.n_layers)):
            h, ln_cache, n, out = tape[i]
            if ln_cache is not None:
                if i < self.n_layers - 1:
                    d = mish_backward_cached(d, n)
                else:
                    d = simplicial_backward(d, out, self.v, self.tau)
                d, dg, db_ln = layernorm_backward(d, ln_cache)
                if param_grads:
                    grads[f"{pre}.{i}.ln_g"] += dg
                    grads[f"{pre}.{i}.ln_b"] += db_ln
            w = p[f"{pre}.{i}.w"]
            dx, dw, db = dense_backward(d, h, w)
            if param_grads:
                grads[f"{pre}.{i}.w"] += dw
                grads[f"{pre}.{i}.b"] += db
            d = dx
        return d
