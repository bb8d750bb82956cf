"""Directional scaled dot-product attention between two persons' encoded sequences.

For the "other -> self" direction the queries come from the other person's
sequence and keys/values from the target's; the weight matrix therefore has
rows indexed by the query person's timesteps and columns by the key person's.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, matmul, permute, reshape, softmax_rows

__all__ = [
    "Direction",
    "CPAParams",
    "causal_mask",
    "cpa",
    "cpa_multihead",
    "self_attention",
]


class Direction(str, enum.Enum):
    OtherToSelf = "other_to_self"
    SelfToOther = "self_to_other"


@lru_cache(maxsize=32)
def causal_mask(k: int) -> np.ndarray:
    """Boolean (k, k) mask permitting column j for row i iff j <= i."""
    m = np.tril(np.ones((k, k), dtype=bool))
    m.setflags(write=False)
    return m


@dataclass
class CPAParams:
    """Projection weights for ``h`` heads, stored head-major along the columns.

    Head ``i`` uses columns ``i*d_head:(i+1)*d_head`` of ``w_q``/``w_k``/``w_v``
    and the matching rows of ``w_multi``.
    """

    w_q: Tensor  # (d_x, h*d_head)
    w_k: Tensor
    w_v: Tensor
    w_multi: Tensor  # (h*d_head, d_x)
    heads: int
    d_scale: float | None = None

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError(f"head count must be >= 1, got {self.heads}")
        d_x, width = self.w_q.shape
        if width % self.heads:
            raise ConfigError(f"projection width {width} not divisible by {self.heads} heads")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != (d_x, width):
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {(d_x, width)}")
        if self.w_multi.shape != (width, d_x):
            raise ShapeError(f"w_multi shape {self.w_multi.shape} != {(width, d_x)}")
        if self.d_scale is None:
            self.d_scale = float(self.d_head)

    @property
    def d_x(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1] // self.heads

    @classmethod
    def init(cls, d_x: int, heads: int, rng: np.random.Generator, full_head_width: bool = False) -> CPAParams:
        if heads < 1:
            raise ConfigError(f"head count must be >= 1, got {heads}")
        if full_head_width:
            d_head = d_x
        else:
            if d_x % heads:
                raise ConfigError(f"d_x={d_x} is not divisible by h={heads}")
            d_head = d_x // heads
        width = heads * d_head
        bound_in = np.sqrt(1.0 / d_x)
        bound_out = np.sqrt(1.0 / width)

        def u(shape, b):
            return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

        return cls(
            u((d_x, width), bound_in), u((d_x, width), bound_in), u((d_x, width), bound_in),
            u((width, d_x), bound_out), heads,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_multi": self.w_multi}


def _project(seq: Tensor, w: Tensor) -> Tensor:
    lead = seq.shape[:-1]
    return reshape(matmul(reshape(seq, (-1, seq.shape[-1])), w), lead + (w.shape[1],))


def cpa(query_seq: Tensor, kv_seq: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
        causal: bool = True, d_scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Single-head attention of ``query_seq`` (k, d) over ``kv_seq`` (k, d).

    Returns the context (k, d_head) and the (k, k) row-stochastic weights.
    """
    if query_seq.ndim != 2 or query_seq.shape != kv_seq.shape:
        raise ShapeError(f"cpa: query {query_seq.shape} and key/value {kv_seq.shape} must both be (k, d_x)")
    k = query_seq.shape[0]
    q = matmul(query_seq, w_q)
    key = matmul(kv_seq, w_k)
    v = matmul(kv_seq, w_v)
    scale = 1.0 / np.sqrt(d_scale if d_scale is not None else w_q.shape[1])
    logits = matmul(q, key.T) * scale
    weights = softmax_rows(logits, causal_mask(k) if causal else None)
    return matmul(weights, v), weights


def cpa_multihead(query_seq: Tensor, kv_seq: Tensor, params: CPAParams,
                  causal: bool = True) -> tuple[Tensor, Tensor]:
    """Multi-head attention, heads concatenated then projected back to d_x.

    Inputs are (..., k, d_x) with identical shapes; the leading axes are a batch.
    Returns the output (..., k, d_x) and weights (..., h, k, k).
    """
    if query_seq.shape != kv_seq.shape or query_seq.ndim < 2:
        raise ShapeError(f"cpa_multihead: query {query_seq.shape} vs key/value {kv_seq.shape}")
    if query_seq.shape[-1] != params.d_x:
        raise ShapeError(f"cpa_multihead: feature width {query_seq.shape[-1]} != d_x={params.d_x}")
    lead = query_seq.shape[:-2]
    k = query_seq.shape[-2]
    h, dh = params.heads, params.d_head
    n = int(np.prod(lead)) if lead else 1

    def heads(seq, w):
        x = reshape(_project(seq, w), (n, k, h, dh))
        return permute(x, (0, 2, 1, 3))  # (n, h, k, dh)

    q = heads(query_seq, params.w_q)
    key = heads(kv_seq, params.w_k)
    v = heads(kv_seq, params.w_v)
    logits = matmul(q, permute(key, (0, 1, 3, 2))) * (1.0 / np.sqrt(params.d_scale))
    weights = softmax_rows(logits, causal_mask(k) if causal else None)
    ctx = permute(matmul(weights, v), (0, 2, 1, 3))  # (n, k, h, dh)
    out = matmul(reshape(ctx, (n * k, h * dh)), params.w_multi)
    return reshape(out, lead + (k, params.d_x)), reshape(weights, lead + (h, k, k))


def self_attention(seq: Tensor, params: CPAParams, causal: bool = True) -> tuple[Tensor, Tensor]:
    return cpa_multihead(seq, seq, params, causal)
