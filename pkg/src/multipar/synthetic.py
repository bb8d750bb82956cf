"""Multiparty sequences with planted, lagged responses between persons.

A source person emits a short event along a random direction in feature
space, scaled to unit RMS per feature. Each person with an incoming influence
edge answers after a random lag
with a response whose direction and size depend on that person's *response
mode*; the mode decides the person's class label. Every window also carries the
ground truth (onsets, lags, modes) used to score attention maps.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GroupWindow, save_jsonl
from .tensor import ConfigError

__all__ = [
    "ResponseMode",
    "ContingencySpec",
    "MODES",
    "PRESETS",
    "preset",
    "generate",
    "attention_lag_score",
    "uniform_causal_baseline",
    "save_dataset",
    "load_truth",
]


@dataclass(frozen=True)
class ResponseMode:
    """How a target answers its source's event.

    The response is ``amplitude * (alignment * u + sqrt(1 - alignment**2) * w)``
    for the source direction ``u`` and a fresh direction ``w`` orthogonal to it.
    ``frozen`` silences the person's noise and response; ``respond=False``
    emits nothing.
    """

    amplitude: float = 1.0
    alignment: float = 1.0
    frozen: bool = False
    respond: bool = True

    @property
    def strength(self) -> float:
        return 0.0 if (self.frozen or not self.respond) else self.amplitude * self.alignment


MODES: dict[str, ResponseMode] = {
    "strong": ResponseMode(1.0, 1.0),
    "weak": ResponseMode(0.5, 1.0),
    "faint": ResponseMode(0.25, 1.0),
    "partial": ResponseMode(1.0, 0.5),
    "unrelated": ResponseMode(1.0, 0.0),
    "anti": ResponseMode(1.0, -1.0),
    "frozen": ResponseMode(frozen=True, respond=False),
    "none": ResponseMode(respond=False),
}


SPEAKER = "speaker"


def _ring(P: int) -> list[tuple[int, int]]:
    return [(p, (p + 1) % P) for p in range(P)]


@dataclass
class ContingencySpec:
    P: int = 5
    k: int = 16
    F: int = 16
    lag_min: int = 1
    lag_max: int = 3
    event_len: int = 3
    response_gain: float = 1.0
    # edges (source, target); None -> ring p -> p+1; "speaker" -> one random source per window
    influence_graph: list[tuple[int, int]] | str | None = None
    noise_sigma: float = 0.1
    class_rule: dict[str, int] = field(
        default_factory=lambda: {"strong": 3, "weak": 2, "anti": 1, "frozen": 0})
    mode_probs: dict[str, float] | None = None  # None -> uniform over class_rule modes that respond
    onset_min: int = 0
    windows_per_group: int = 10
    n_signatures: int | None = None  # None -> a fresh direction per event, else a fixed codebook
    codebook_sign: bool = True  # flip codewords at random so a negated codeword is not itself a cue
    codebook_seed: int = 0  # the codebook is shared by every dataset drawn with the same codebook_seed
    event_amplitude: float = 1.0
    source_amplitude: tuple[float, float] = (1.0, 1.0)  # log-uniform range of each event's size
    seed: int = 0

    def __post_init__(self):
        if self.influence_graph is None:
            self.influence_graph = _ring(self.P)
        if self.influence_graph != SPEAKER:
            if isinstance(self.influence_graph, str):
                raise ConfigError(f"influence_graph must be a list of edges or {SPEAKER!r}, "
                                  f"got {self.influence_graph!r}")
            self.influence_graph = [tuple(int(v) for v in e) for e in self.influence_graph]
        if self.mode_probs is None:
            names = [m for m in self.class_rule if m != "none"]
            self.mode_probs = {m: 1.0 / len(names) for m in names}
        self.validate()

    def validate(self) -> None:
        if self.P < 2 or self.k < 1 or self.F < 1:
            raise ConfigError(f"need P >= 2, k >= 1, F >= 1; got P={self.P}, k={self.k}, F={self.F}")
        if not 1 <= self.lag_min <= self.lag_max < self.k:
            raise ConfigError(f"lags must satisfy 1 <= lag_min <= lag_max < k, got "
                              f"lag_min={self.lag_min}, lag_max={self.lag_max}, k={self.k}")
        if self.event_len < 1 or self.onset_min < 0 or self.onset_min > self.last_onset:
            raise ConfigError(f"event_len={self.event_len}, onset_min={self.onset_min} leave no room "
                              f"for an event and its response in k={self.k}")
        if self.n_signatures is not None and self.n_signatures < 1:
            raise ConfigError(f"n_signatures must be >= 1 or None, got {self.n_signatures}")
        self.source_amplitude = tuple(float(v) for v in self.source_amplitude)
        lo, hi = self.source_amplitude
        if not 0 < lo <= hi:
            raise ConfigError(f"source_amplitude must satisfy 0 < low <= high, got {self.source_amplitude}")
        if self.event_amplitude <= 0:
            raise ConfigError(f"event_amplitude must be > 0, got {self.event_amplitude}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for m in list(self.class_rule) + list(self.mode_probs):
            if m not in MODES:
                raise ConfigError(f"class_rule/mode_probs: unknown response mode {m!r}")
        for m, p in self.mode_probs.items():
            if p < 0:
                raise ConfigError(f"mode_probs[{m!r}] is negative")
            if p > 0 and m not in self.class_rule:
                raise ConfigError(f"class_rule has no class for mode {m!r}")
        if sum(self.mode_probs.values()) <= 0:
            raise ConfigError("mode_probs must have positive mass")
        if self.influence_graph == SPEAKER:
            if "none" not in self.class_rule:
                raise ConfigError("speaker windows need a class_rule entry for 'none' (the speaker)")
        else:
            targets = [t for _, t in self.influence_graph]
            for s, t in self.influence_graph:
                if not (0 <= s < self.P and 0 <= t < self.P) or s == t:
                    raise ConfigError(f"influence_graph edge {(s, t)} is not a valid pair of distinct persons")
            if len(set(targets)) != len(targets):
                raise ConfigError("influence_graph: a person may have at most one source")
            if len(set(targets)) < self.P and "none" not in self.class_rule:
                raise ConfigError("persons without a source need a class_rule entry for 'none'")
        for m, c in self.class_rule.items():
            if not 0 <= int(c) <= 3:
                raise ConfigError(f"class_rule[{m!r}] = {c} is not a class index")

    @property
    def last_onset(self) -> int:
        return self.k - self.event_len - self.lag_max

    def edges(self, rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
        """Edges of one window; speaker windows draw their speaker from ``rng``."""
        if self.influence_graph != SPEAKER:
            return list(self.influence_graph)
        s = int(rng.integers(self.P))
        return [(s, t) for t in range(self.P) if t != s]

    def source_of(self, rng: np.random.Generator | None = None) -> dict[int, int]:
        return {t: s for s, t in self.edges(rng)}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.influence_graph != SPEAKER:
            d["influence_graph"] = [list(e) for e in self.influence_graph]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ContingencySpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown contingency spec keys: {sorted(unknown)}")
        return cls(**d)


PRESETS: dict[str, dict] = {
    "default": {},
    # class mix of the engagement corpus: 80.2 / 18.3 / 1.3 / 0.2 %
    # one fixed event direction, so each class is read off the size of one's own answer
    "imbalance": {
        "class_rule": {"strong": 3, "weak": 2, "faint": 1, "frozen": 0},
        "mode_probs": {"strong": 0.802, "weak": 0.183, "faint": 0.013, "frozen": 0.002},
        "n_signatures": 1,
        "codebook_sign": False,
    },
    # one speaker per window and everyone else answers; the class is the size of the answer
    # relative to the speaker's event, and event sizes span 16x, so one's own row cannot tell it
    "strong_contingency": {
        "influence_graph": SPEAKER,
        "class_rule": {"strong": 3, "weak": 2, "faint": 1, "none": 0},
        "source_amplitude": (0.25, 4.0),
        "event_len": 6,
        "lag_max": 2,
        "onset_min": 4,
        "noise_sigma": 0.05,
    },
}


def preset(name: str, **overrides) -> ContingencySpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ContingencySpec(**{**PRESETS[name], **overrides})


def _unit(rng, F) -> np.ndarray:
    v = rng.normal(size=F)
    return v / np.linalg.norm(v)


def _event_scale(F: int) -> float:
    # unit RMS per feature
    return float(np.sqrt(F))


def _orthogonal_unit(rng, u) -> np.ndarray:
    if u.size == 1:
        return np.zeros_like(u)
    while True:
        w = rng.normal(size=u.size)
        w -= (w @ u) * u
        n = np.linalg.norm(w)
        if n > 1e-8:
            return w / n


def generate(spec: ContingencySpec, n_samples: int, return_truth: bool = False):
    """Draw ``n_samples`` windows; optionally also the per-window ground truth."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    P, k, F, L = spec.P, spec.k, spec.F, spec.event_len
    mode_names = [m for m, p in spec.mode_probs.items() if p > 0]
    mode_p = np.array([spec.mode_probs[m] for m in mode_names])
    mode_p = mode_p / mode_p.sum()
    scale = spec.event_amplitude * _event_scale(F)
    codebook = None
    if spec.n_signatures is not None:
        cb_rng = np.random.default_rng([spec.codebook_seed, 0xC0DE])
        codebook = np.stack([_unit(cb_rng, F) for _ in range(spec.n_signatures)])
    windows, truths = [], []
    for i in range(n_samples):
        x = np.zeros((P, k, F))
        src_of = spec.source_of(rng)
        sources = sorted(set(src_of.values()))
        onset = {s: int(rng.integers(spec.onset_min, spec.last_onset + 1)) for s in sources}
        if codebook is None:
            sig = {s: _unit(rng, F) for s in sources}
        else:
            # random sign too, so a negated codeword carries no label information by itself
            sig = {s: codebook[rng.integers(len(codebook))] for s in sources}
            if spec.codebook_sign:
                sig = {s: v * rng.choice([-1.0, 1.0]) for s, v in sig.items()}
        lo, hi = np.log(spec.source_amplitude)
        amp = {s: float(np.exp(rng.uniform(lo, hi))) if hi > lo else float(np.exp(lo)) for s in sources}
        for s in sources:
            x[s, onset[s]:onset[s] + L] += scale * amp[s] * sig[s]
        labels = np.zeros(P, dtype=np.int64)
        persons = []
        frozen = np.zeros(P, dtype=bool)
        for t in range(P):
            rec = {"person": t, "source": src_of.get(t), "own_onset": onset.get(t)}
            if t in src_of:
                s = src_of[t]
                name = mode_names[int(rng.choice(len(mode_names), p=mode_p))]
                mode = MODES[name]
                lag = int(rng.integers(spec.lag_min, spec.lag_max + 1))
                w = _orthogonal_unit(rng, sig[s])
                if mode.respond:
                    a = mode.alignment
                    direction = a * sig[s] + np.sqrt(max(0.0, 1.0 - a * a)) * w
                    start = onset[s] + lag
                    x[t, start:start + L] += scale * amp[s] * spec.response_gain * mode.amplitude * direction
                rec.update(onset=onset[s], lag=lag, response_onset=onset[s] + lag)
            else:
                name, mode = "none", MODES["none"]
                rec.update(onset=None, lag=None, response_onset=None)
            frozen[t] = mode.frozen
            rec.update(mode=name, strength=mode.strength)
            labels[t] = spec.class_rule[name]
            persons.append(rec)
        noise = rng.normal(scale=spec.noise_sigma, size=x.shape) if spec.noise_sigma > 0 else 0.0
        x = x + noise * (~frozen)[:, None, None]
        group = f"g{spec.seed}-{i // spec.windows_per_group:05d}"
        t_frame = (i % spec.windows_per_group) * k + k - 1
        windows.append(GroupWindow(group, t_frame, x, labels))
        truths.append({"group_id": group, "t": t_frame, "index": i, "event_len": L, "persons": persons})
    return (windows, truths) if return_truth else windows


def attention_lag_score(weights: np.ndarray, onset: int, lag: int, width: int) -> float:
    """Share of attention mass in the response rows that lands on the source-event columns.

    Response rows are ``[onset + lag, onset + lag + width)`` and source columns
    ``[onset, onset + width)``, both clipped to the matrix.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"weights must be a square (k, k) matrix, got {w.shape}")
    k = w.shape[0]
    r0, r1 = onset + lag, min(onset + lag + width, k)
    c0, c1 = onset, min(onset + width, k)
    if not (0 <= onset and r0 < k and c0 < k):
        raise ValueError(f"window onset={onset}, lag={lag} falls outside k={k}")
    rows = w[r0:r1]
    total = rows.sum()
    return float(rows[:, c0:c1].sum() / total) if total > 0 else 0.0


def uniform_causal_baseline(k: int, onset: int, lag: int, width: int) -> float:
    """``attention_lag_score`` of the uniform lower-triangular map, in closed form."""
    r0, r1 = onset + lag, min(onset + lag + width, k)
    c0, c1 = onset, min(onset + width, k)
    fracs = [max(0, min(c1, i + 1) - c0) / (i + 1) for i in range(r0, r1)]
    return float(np.mean(fracs))


def save_dataset(spec: ContingencySpec, n_samples: int, out_dir) -> tuple[Path, Path]:
    """Write ``data.jsonl`` and ``truth.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    windows, truths = generate(spec, n_samples, return_truth=True)
    data_path = out_dir / "data.jsonl"
    truth_path = out_dir / "truth.jsonl"
    save_jsonl(windows, data_path)
    with open(truth_path, "w") as fh:
        for t in truths:
            fh.write(json.dumps(t) + "\n")
    return data_path, truth_path


def load_truth(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
