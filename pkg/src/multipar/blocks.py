"""Stacked pre-norm transformer layers whose keys/values always come from the target.

Layer ``m`` computes

    g_hat = CPA(Norm(g_prev), Norm(z_self)) + Norm(g_prev)
    g     = Norm(FFN(g_hat) + g_hat)

with ``z_self`` re-supplied unchanged at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import CPAParams, cpa_multihead
from .tensor import ConfigError, ShapeError, Tensor, bias_add, dropout, layer_norm, matmul, relu, reshape

__all__ = ["CPTLayerParams", "CPTStack", "linear", "cpt_layer", "cpt_forward"]

LN_EPS = 1e-5


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., d_in] @ w + b`` applied row-wise."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = bias_add(y, b)
    return reshape(y, lead + (w.shape[1],))


@dataclass
class CPTLayerParams:
    cpa: CPAParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    # (gain, bias) for the query-side, key/value-side and output norms
    norm_q: tuple[Tensor, Tensor]
    norm_kv: tuple[Tensor, Tensor]
    norm_out: tuple[Tensor, Tensor]

    def __post_init__(self):
        d_x, d_ffn = self.ffn_w1.shape
        if d_ffn < d_x:
            raise ConfigError(f"d_ffn={d_ffn} must be >= d_x={d_x}")
        if self.ffn_w2.shape != (d_ffn, d_x) or self.cpa.d_x != d_x:
            raise ShapeError("feed-forward and attention widths disagree")

    @classmethod
    def init(cls, d_x: int, heads: int, d_ffn: int, rng: np.random.Generator,
             full_head_width: bool = False) -> CPTLayerParams:
        if d_ffn < d_x:
            raise ConfigError(f"d_ffn={d_ffn} must be >= d_x={d_x}")

        def u(shape, fan_in):
            b = np.sqrt(1.0 / fan_in)
            return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

        def norm():
            return Tensor(np.ones(d_x), requires_grad=True), Tensor(np.zeros(d_x), requires_grad=True)

        return cls(
            CPAParams.init(d_x, heads, rng, full_head_width),
            u((d_x, d_ffn), d_x), Tensor(np.zeros(d_ffn), requires_grad=True),
            u((d_ffn, d_x), d_ffn), Tensor(np.zeros(d_x), requires_grad=True),
            norm(), norm(), norm(),
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {f"cpa.{k}": v for k, v in self.cpa.tensors().items()}
        out.update({
            "ffn_w1": self.ffn_w1, "ffn_b1": self.ffn_b1, "ffn_w2": self.ffn_w2, "ffn_b2": self.ffn_b2,
            "norm_q.gain": self.norm_q[0], "norm_q.bias": self.norm_q[1],
            "norm_kv.gain": self.norm_kv[0], "norm_kv.bias": self.norm_kv[1],
            "norm_out.gain": self.norm_out[0], "norm_out.bias": self.norm_out[1],
        })
        return out


@dataclass
class CPTStack:
    layers: list[CPTLayerParams] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a transformer stack needs at least one layer")
        shapes = {(layer.cpa.d_x, layer.cpa.heads) for layer in self.layers}
        if len(shapes) != 1:
            raise ConfigError(f"layers disagree on (d_x, h): {sorted(shapes)}")

    @classmethod
    def init(cls, M: int, d_x: int, heads: int, d_ffn: int, rng: np.random.Generator,
             full_head_width: bool = False) -> CPTStack:
        if M < 1:
            raise ConfigError(f"M must be >= 1, got {M}")
        return cls([CPTLayerParams.init(d_x, heads, d_ffn, rng, full_head_width) for _ in range(M)])

    def tensors(self) -> dict[str, Tensor]:
        return {f"layer{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.tensors().items()}


def cpt_layer(gamma_prev: Tensor, z_self: Tensor, params: CPTLayerParams, causal: bool = True,
              dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """One layer; returns the new stream (..., k, d_x) and its attention weights."""
    if gamma_prev.shape != z_self.shape:
        raise ShapeError(f"cpt_layer: stream {gamma_prev.shape} vs target {z_self.shape}")
    gq = layer_norm(gamma_prev, *params.norm_q, eps=LN_EPS)
    zk = layer_norm(z_self, *params.norm_kv, eps=LN_EPS)
    attended, weights = cpa_multihead(gq, zk, params.cpa, causal)
    g_hat = dropout(attended, dropout_rate, rng) + gq
    hidden = relu(linear(g_hat, params.ffn_w1, params.ffn_b1))
    ff = dropout(linear(hidden, params.ffn_w2, params.ffn_b2), dropout_rate, rng)
    return layer_norm(ff + g_hat, *params.norm_out, eps=LN_EPS), weights


def cpt_forward(z_query_source: Tensor, z_self: Tensor, stack: CPTStack, causal: bool = True,
                dropout_rate: float = 0.0, rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
    """Run all layers starting from ``gamma_0 = z_query_source``.

    Returns the final stream and the per-layer attention weights (layer 0 first).
    """
    gamma = z_query_source
    all_weights = []
    for layer in stack.layers:
        gamma, w = cpt_layer(gamma, z_self, layer, causal, dropout_rate, rng)
        all_weights.append(w)
    return gamma, all_weights
