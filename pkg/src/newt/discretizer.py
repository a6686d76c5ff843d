"""Discrete regression of scalars over bins in symlog space.

Rewards and values are predicted as logits over ``num_bins`` evenly spaced
centres in symlog space. Targets are two-hot encoded onto the two nearest
centres. Predictions are decoded as the softmax expectation mapped back
through symexp.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nncore import softmax_rows


def symlog(y):
    return np.sign(y) * np.log1p(np.abs(y))


def symexp(u):
    return np.sign(u) * np.expm1(np.abs(u))


@dataclass(frozen=True)
class DiscretizerSpec:
    num_bins: int = 101
    vmin: float = -10.0
    vmax: float = 10.0
    bin_centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if not self.vmax > self.vmin:
            raise ValueError("vmax must exceed vmin")
        object.__setattr__(self, "bin_centers",
                           np.linspace(self.vmin, self.vmax, self.num_bins))

    @property
    def width(self) -> float:
        return (self.vmax - self.vmin) / (self.num_bins - 1)


def two_hot(y, spec: DiscretizerSpec) -> np.ndarray:
    """Two-hot weights for scalar or array ``y``; output shape ``y.shape + (num_bins,)``."""
    y = np.asarray(y, dtype=np.float64)
    u = np.clip(symlog(y), spec.vmin, spec.vmax)
    pos = (u - spec.vmin) / spec.width
    k = np.clip(np.floor(pos).astype(np.int64), 0, spec.num_bins - 2)
    upper = pos - k
    out = np.zeros(y.shape + (spec.num_bins,))
    np.put_along_axis(out, k[..., None], (1.0 - upper)[..., None], axis=-1)
    np.put_along_axis(out, (k + 1)[..., None], upper[..., None], axis=-1)
    return out


def ce_loss(logits: np.ndarray, target: np.ndarray, check: bool = True):
    """Cross-entropy of softmax(logits) against ``target`` weights, row-wise.

    Returns (loss per row, gradient wrt logits per row).
    """
    if logits.shape != target.shape:
        raise ValueError(f"ce_loss: shape mismatch {logits.shape} vs {target.shape}")
    if check and not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("ce_loss: target weights must sum to 1")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    loss = -(target * logp).sum(axis=-1)
    grad = np.exp(logp) - target
    return loss, grad


def decode(logits: np.ndarray, spec: DiscretizerSpec) -> np.ndarray:
    """Expected value in symlog space mapped back with symexp."""
    p = softmax_rows(logits)
    return symexp(p @ spec.bin_centers.astype(logits.dtype))


def decode_backward(dv: np.ndarray, logits: np.ndarray, spec: DiscretizerSpec) -> np.ndarray:
    """Gradient wrt logits of ``decode`` given upstream ``dv`` (one per row)."""
    c = spec.bin_centers.astype(logits.dtype)
    p = softmax_rows(logits)
    m = p @ c
    dm = dv * np.exp(np.abs(m))
    return dm[..., None] * p * (c - m[..., None])
