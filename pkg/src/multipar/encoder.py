"""Per-person temporal encoder: 1-D convolution over time plus sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor

__all__ = ["EncoderParams", "ConfigError", "conv1d_temporal", "positional_encoding", "encode"]


@dataclass
class EncoderParams:
    conv_kernel: Tensor  # (w, F, d_x)
    conv_bias: Tensor  # (d_x,)

    def __post_init__(self):
        w = self.conv_kernel.shape[0]
        if self.conv_kernel.ndim != 3 or w % 2 == 0:
            raise ConfigError(f"conv kernel must be (w, F, d_x) with odd w, got {self.conv_kernel.shape}")
        if self.conv_bias.shape != (self.conv_kernel.shape[2],):
            raise ShapeError(f"conv bias {self.conv_bias.shape} vs kernel {self.conv_kernel.shape}")

    @classmethod
    def init(cls, F: int, d_x: int, width: int, rng: np.random.Generator) -> EncoderParams:
        bound = np.sqrt(1.0 / (width * F))
        return cls(
            Tensor(rng.uniform(-bound, bound, size=(width, F, d_x)), requires_grad=True),
            Tensor(np.zeros(d_x), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"conv_kernel": self.conv_kernel, "conv_bias": self.conv_bias}


def conv1d_temporal(x: Tensor, params: EncoderParams) -> Tensor:
    """Same-length convolution over the time axis of ``x[..., k, F]``.

    ``out[t] = bias + sum_j x[t + j - w//2] @ kernel[j]`` with zeros outside [0, k).
    Leading axes are treated as a batch.
    """
    kern, bias = params.conv_kernel, params.conv_bias
    w, F, d = kern.shape
    if x.ndim < 2 or x.shape[-1] != F:
        raise ShapeError(f"conv1d: input {x.shape} does not end in F={F}")
    lead, k = x.shape[:-2], x.shape[-2]
    half = w // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    # cols[..., t, j, :] = xp[..., t + j, :]
    cols = np.stack([xp[..., j:j + k, :] for j in range(w)], axis=-2)
    cols2 = cols.reshape(-1, w * F)
    kmat = kern.data.reshape(w * F, d)
    out = (cols2 @ kmat + bias.data).reshape(lead + (k, d))

    def back(g):
        g2 = g.reshape(-1, d)
        gk = (cols2.T @ g2).reshape(w, F, d) if kern.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(lead + (k, w, F))
            gxp = np.zeros(xp.shape)
            for j in range(w):
                gxp[..., j:j + k, :] += gcols[..., j, :]
            gx = gxp[..., half:half + k, :]
        return gx, gk, gb

    return Tensor._from_op(out, (x, kern, bias), back, "conv1d")


@lru_cache(maxsize=64)
def _pe_table(k: int, d_x: int) -> np.ndarray:
    pos = np.arange(k, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_x, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_x)
    pe = np.empty((k, d_x))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(k: int, d_x: int) -> Tensor:
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    if d_x < 2 or d_x % 2:
        raise ConfigError(f"positional encoding needs an even d_x, got {d_x}")
    return Tensor(_pe_table(k, d_x))


def encode(x: Tensor, params: EncoderParams) -> Tensor:
    """Z = Conv1D(X) + PE; ``x`` is (..., k, F) and the result (..., k, d_x)."""
    z = conv1d_temporal(x, params)
    pe = positional_encoding(*z.shape[-2:]).data
    return Tensor._from_op(z.data + pe, (z,), lambda g: (g,), "add_pe")
