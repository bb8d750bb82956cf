"""Full model: shared encoder, P transformer streams per target, LSTM and classifier head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .attention import Direction
from .blocks import CPTStack, cpt_forward, linear
from .data import NUM_CLASSES, GroupWindow
from .encoder import EncoderParams, encode
from .tensor import (
    ConfigError,
    ContractError,
    ShapeError,
    Tensor,
    concat,
    load_tensors,
    no_grad,
    permute,
    relu,
    reshape,
    save_tensors,
    sigmoid,
    slice_axis,
    softmax_rows,
    stack,
    take,
    tanh,
    matmul,
)

__all__ = [
    "ModelConfig",
    "Prediction",
    "MultiparT",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    P: int = 5
    k: int = 64
    F: int = 2183
    d_x: int = 100
    h: int = 4
    M: int = 2
    d_ffn: int | None = None  # None -> 4 * d_x
    lstm_hidden: int = 128
    direction: Direction = Direction.OtherToSelf
    use_self_attention: bool = True
    use_cpa: bool = True
    causal: bool = True
    shared_encoder: bool = True
    shared_stacks: bool = True
    full_head_width: bool = False
    conv_width: int = 3
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.direction = Direction(self.direction)
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_x
        self.validate()

    def validate(self) -> None:
        for name in ("P", "k", "F", "d_x", "h", "M", "d_ffn", "lstm_hidden", "conv_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.P < 2:
            raise ConfigError(f"P must be >= 2, got {self.P}")
        if self.d_x % 2:
            raise ConfigError(f"d_x must be even for the positional encoding, got {self.d_x}")
        if not self.full_head_width and self.d_x % self.h:
            raise ConfigError(f"h={self.h} must divide d_x={self.d_x} (or set full_head_width)")
        if self.d_ffn < self.d_x:
            raise ConfigError(f"d_ffn={self.d_ffn} must be >= d_x={self.d_x}")
        if self.conv_width % 2 == 0:
            raise ConfigError(f"conv_width must be odd, got {self.conv_width}")
        if not (self.use_cpa or self.use_self_attention):
            raise ConfigError("at least one of use_cpa / use_self_attention must be on")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def n_slots(self) -> int:
        return (self.P - 1 if self.use_cpa else 0) + (1 if self.use_self_attention else 0)

    @property
    def lstm_input(self) -> int:
        return self.n_slots * self.d_x

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["direction"] = self.direction.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    probs: np.ndarray  # (C,)

    @property
    def label(self) -> int:
        return int(np.argmax(self.probs))


def _u(rng, shape, fan_in) -> Tensor:
    b = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)


@dataclass
class LSTMParams:
    w_ih: Tensor  # (d_in, 4H), gate order input, forget, output, cell
    w_hh: Tensor  # (H, 4H)
    bias: Tensor  # (4H,)

    @classmethod
    def init(cls, d_in: int, hidden: int, rng) -> LSTMParams:
        p = cls(_u(rng, (d_in, 4 * hidden), hidden), _u(rng, (hidden, 4 * hidden), hidden),
                _u(rng, (4 * hidden,), hidden))
        # forget gates start open so early timesteps reach the final state
        p.bias.data[hidden:2 * hidden] = 1.0
        return p

    def tensors(self):
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}


def lstm_last_hidden(x: Tensor, p: LSTMParams) -> Tensor:
    """Run a single-layer LSTM over ``x`` (N, k, d_in) and return the final hidden (N, H)."""
    n, k, _ = x.shape
    H = p.w_hh.shape[0]
    xw = linear(x, p.w_ih, p.bias)  # (N, k, 4H)
    h = c = None
    for t in range(k):
        gates = reshape(slice_axis(xw, 1, t, t + 1), (n, 4 * H))
        if h is not None:
            gates = gates + matmul(h, p.w_hh)
        sg = sigmoid(slice_axis(gates, 1, 0, 3 * H))
        i_g = slice_axis(sg, 1, 0, H)
        f_g = slice_axis(sg, 1, H, 2 * H)
        o_g = slice_axis(sg, 1, 2 * H, 3 * H)
        g_g = tanh(slice_axis(gates, 1, 3 * H, 4 * H))
        c = i_g * g_g if c is None else f_g * c + i_g * g_g
        h = o_g * tanh(c)
    return h


@dataclass
class Parameters:
    encoders: list[EncoderParams]
    cross: dict[tuple[int, int], CPTStack] | CPTStack | None
    self_stack: CPTStack | None
    lstm: LSTMParams
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    extra: dict = field(default_factory=dict)


class MultiparT:
    """Multiparty transformer for per-person 4-class prediction."""

    def __init__(self, cfg: ModelConfig, params: Parameters | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(cfg)

    # -- construction ------------------------------------------------------
    @staticmethod
    def _init_params(cfg: ModelConfig) -> Parameters:
        rng = np.random.default_rng(cfg.seed)
        n_enc = 1 if cfg.shared_encoder else cfg.P
        encoders = [EncoderParams.init(cfg.F, cfg.d_x, cfg.conv_width, rng) for _ in range(n_enc)]

        def new_stack():
            return CPTStack.init(cfg.M, cfg.d_x, cfg.h, cfg.d_ffn, rng, cfg.full_head_width)

        cross = None
        if cfg.use_cpa:
            if cfg.shared_stacks:
                cross = new_stack()
            else:
                cross = {(p, t): new_stack() for t in range(cfg.P) for p in range(cfg.P) if p != t}
        self_stack = new_stack() if cfg.use_self_attention else None
        H = cfg.lstm_hidden
        lstm = LSTMParams.init(cfg.lstm_input, H, rng)
        return Parameters(
            encoders, cross, self_stack, lstm,
            _u(rng, (H, H), H), Tensor(np.zeros(H), requires_grad=True),
            _u(rng, (H, NUM_CLASSES), H), Tensor(np.zeros(NUM_CLASSES), requires_grad=True),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        p = self.params
        out: dict[str, Tensor] = {}
        for i, enc in enumerate(p.encoders):
            out.update({f"encoder{i}.{k}": v for k, v in enc.tensors().items()})
        if isinstance(p.cross, CPTStack):
            out.update({f"cross.{k}": v for k, v in p.cross.tensors().items()})
        elif p.cross:
            for (src, tgt), st in sorted(p.cross.items()):
                out.update({f"cross_{src}_{tgt}.{k}": v for k, v in st.tensors().items()})
        if p.self_stack is not None:
            out.update({f"self.{k}": v for k, v in p.self_stack.tensors().items()})
        out.update({f"lstm.{k}": v for k, v in p.lstm.tensors().items()})
        out.update({"head.w1": p.head_w1, "head.b1": p.head_b1, "head.w2": p.head_w2, "head.b2": p.head_b2})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # -- forward pieces ----------------------------------------------------
    def _check_x(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (cfg.P, cfg.k, cfg.F):
            raise ShapeError(f"features {x.shape[1:] if x.ndim == 4 else x.shape} do not match "
                             f"(P, k, F) = {(cfg.P, cfg.k, cfg.F)}")
        return x

    def encode_windows(self, x: np.ndarray | Tensor) -> Tensor:
        """Encodings Z of shape (B, P, k, d_x) for windows ``x`` (B, P, k, F)."""
        xt = x if isinstance(x, Tensor) else Tensor(self._check_x(x))
        encs = self.params.encoders
        if len(encs) == 1:
            return encode(xt, encs[0])
        return stack([encode(xt[:, p], encs[p]) for p in range(self.cfg.P)], axis=1)

    def _stream_pairs(self, targets: np.ndarray) -> np.ndarray:
        """Source persons per instance, ascending, excluding the target: (N, P-1)."""
        P = self.cfg.P
        return np.array([[p for p in range(P) if p != t] for t in targets], dtype=np.intp)

    def streams(self, z: Tensor, win: np.ndarray, targets: np.ndarray,
                rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, list[np.ndarray]]]:
        """Concatenated stream outputs (N, k, n_slots * d_x) for instances (win[n], targets[n]).

        Attention weights come back as numpy arrays: ``"cross"`` holds one
        (N, P-1, h, k, k) array per layer (sources in ascending order) and
        ``"self"`` one (N, h, k, k) array per layer.
        """
        cfg = self.cfg
        P, k, d = cfg.P, cfg.k, cfg.d_x
        win = np.asarray(win, dtype=np.intp)
        targets = np.asarray(targets, dtype=np.intp)
        if targets.min() < 0 or targets.max() >= P:
            raise IndexError(f"target index out of range for P={P}: {targets.tolist()}")
        n = len(targets)
        zf = reshape(z, (-1, k, d))
        weights: dict[str, list[np.ndarray]] = {}
        slots = []
        if cfg.use_cpa:
            sources = self._stream_pairs(targets)  # (N, P-1)
            src_rows = (win[:, None] * P + sources).ravel()
            tgt_rows = np.repeat(win * P + targets, P - 1)
            if cfg.direction is Direction.OtherToSelf:
                q_rows, kv_rows = src_rows, tgt_rows
            else:
                q_rows, kv_rows = tgt_rows, src_rows
            if isinstance(self.params.cross, CPTStack):
                gamma, ws = cpt_forward(take(zf, q_rows, 0), take(zf, kv_rows, 0), self.params.cross,
                                        cfg.causal, cfg.dropout, rng)
                ws = [w.data for w in ws]
            else:
                gamma, ws = self._per_pair_streams(zf, q_rows, kv_rows, sources.ravel(),
                                                   np.repeat(targets, P - 1), rng)
            weights["cross"] = [w.reshape(n, P - 1, *w.shape[1:]) for w in ws]
            slots.append(reshape(gamma, (n, P - 1, k, d)))
        if cfg.use_self_attention:
            zs = take(zf, win * P + targets, 0)
            gamma_s, ws = cpt_forward(zs, zs, self.params.self_stack, cfg.causal, cfg.dropout, rng)
            weights["self"] = [w.data for w in ws]
            slots.append(reshape(gamma_s, (n, 1, k, d)))

        if cfg.use_cpa and cfg.use_self_attention:
            # self stream occupies the target's own slot among ascending person indices
            allslots = reshape(concat(slots, axis=1), (n * P, k, d))
            order = np.array([[*range(t), P - 1, *range(t, P - 1)] for t in targets], dtype=np.intp)
            ordered = take(allslots, (np.arange(n)[:, None] * P + order).ravel(), 0)
            ordered = reshape(ordered, (n, P, k, d))
        else:
            ordered = slots[0]
        s = ordered.shape[1]
        return reshape(permute(ordered, (0, 2, 1, 3)), (n, k, s * d)), weights

    def _per_pair_streams(self, zf, q_rows, kv_rows, srcs, tgts, rng):
        cfg = self.cfg
        outs, order, ws_groups = [], [], []
        for key in sorted(set(zip(srcs.tolist(), tgts.tolist()))):
            idx = np.flatnonzero((srcs == key[0]) & (tgts == key[1]))
            g, ws = cpt_forward(take(zf, q_rows[idx], 0), take(zf, kv_rows[idx], 0), self.params.cross[key],
                                cfg.causal, cfg.dropout, rng)
            outs.append(g)
            order.append(idx)
            ws_groups.append([w.data for w in ws])
        perm = np.concatenate(order)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        gamma = take(concat(outs, axis=0), inv, 0)
        ws = [np.concatenate([grp[m] for grp in ws_groups], axis=0)[inv] for m in range(cfg.M)]
        return gamma, ws

    def head(self, seq: Tensor) -> Tensor:
        """LSTM over the concatenated streams, then the two-layer classifier; returns probs (N, C)."""
        p = self.params
        h = lstm_last_hidden(seq, p.lstm)
        hidden = relu(linear(h, p.head_w1, p.head_b1))
        return softmax_rows(linear(hidden, p.head_w2, p.head_b2))

    def forward_instances(self, x: np.ndarray, win: np.ndarray, targets: np.ndarray,
                          rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        """Batched forward: windows ``x`` (B, P, k, F), instance n = (window win[n], person targets[n])."""
        z = self.encode_windows(x)
        seq, weights = self.streams(z, win, targets, rng)
        return self.head(seq), weights

    # -- per-sample API ----------------------------------------------------
    def _window_array(self, x) -> np.ndarray:
        arr = x.features if isinstance(x, GroupWindow) else np.asarray(x, dtype=np.float64)
        return self._check_x(arr[None])

    def forward(self, x: GroupWindow | np.ndarray, target: int) -> tuple[Prediction, dict]:
        """Class probabilities for one target person plus every attention map.

        Attention maps are keyed ``(source, target, layer)`` with values (h, k, k);
        the self stream uses ``source == target``.
        """
        xa = self._window_array(x)
        if not 0 <= target < self.cfg.P:
            raise IndexError(f"target {target} out of range for P={self.cfg.P}")
        with no_grad():
            z = self.encode_windows(xa)
            return self._target_pass(z, target)

    def _target_pass(self, z: Tensor, target: int) -> tuple[Prediction, dict]:
        seq, ws = self.streams(z, np.array([0]), np.array([target]))
        probs = self.head(seq).data[0]
        return Prediction(probs.copy()), self._label_weights(ws, target)

    def _label_weights(self, ws: dict, target: int) -> dict[tuple[int, int, int], np.ndarray]:
        out = {}
        srcs = [p for p in range(self.cfg.P) if p != target]
        for m, w in enumerate(ws.get("cross", [])):
            for j, src in enumerate(srcs):
                out[(src, target, m)] = w[0, j]
        for m, w in enumerate(ws.get("self", [])):
            out[(target, target, m)] = w[0]
        return out

    def predict_all(self, x: GroupWindow | np.ndarray) -> list[Prediction]:
        """One prediction per person; the encodings are computed once and reused."""
        xa = self._window_array(x)
        with no_grad():
            z = self.encode_windows(xa)
            return [self._target_pass(z, t)[0] for t in range(self.cfg.P)]

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Probabilities (B, P, C) for windows ``x`` (B, P, k, F), batched for speed."""
        x = self._check_x(x)
        B, P = x.shape[:2]
        out = np.empty((B, P, NUM_CLASSES))
        per = max(1, batch_size // P)
        with no_grad():
            for s in range(0, B, per):
                xb = x[s:s + per]
                nb = len(xb)
                win = np.repeat(np.arange(nb), P)
                tg = np.tile(np.arange(P), nb)
                probs, _ = self.forward_instances(xb, win, tg)
                out[s:s + nb] = probs.data.reshape(nb, P, NUM_CLASSES)
        return out

    def copy_params_from(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_tensors()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise ContractError(f"parameter names differ: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for name, t in named.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: stored shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}


def count_parameters(cfg: ModelConfig) -> int:
    return MultiparT(cfg).num_parameters()


def save_checkpoint(model: MultiparT, path, extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    save_tensors(model.named_tensors(), Path(path), meta)


def load_checkpoint(path) -> MultiparT:
    arrays, meta = load_tensors(Path(path))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION}")
    model = MultiparT(ModelConfig.from_dict(meta["config"]))
    model.copy_params_from(arrays)
    return model
