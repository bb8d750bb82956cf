"""Group samples (P persons x k timesteps x F features) and their JSON-lines form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EngagementClass",
    "GroupWindow",
    "DataError",
    "SchemaError",
    "bin_continuous_label",
    "load_jsonl",
    "save_jsonl",
    "stack_features",
]

NUM_CLASSES = 4


class DataError(ValueError):
    """Malformed or unreadable dataset record."""


class SchemaError(DataError):
    """Records disagree on P, k or F, or violate the sample invariants."""


class EngagementClass(IntEnum):
    HighDisengagement = 0
    LowDisengagement = 1
    LowEngagement = 2
    HighEngagement = 3


def bin_continuous_label(v: float) -> EngagementClass:
    """Map an engagement annotation in [-2, 2] to one of the four classes.

    Bins are right-closed: (1, 2] high engagement, (0, 1] low engagement,
    (-1, 0] low disengagement and [-2, -1] high disengagement.
    """
    v = float(v)
    if not -2.0 <= v <= 2.0:
        raise ValueError(f"engagement value {v} outside [-2, 2]")
    if v > 1.0:
        return EngagementClass.HighEngagement
    if v > 0.0:
        return EngagementClass.LowEngagement
    if v > -1.0:
        return EngagementClass.LowDisengagement
    return EngagementClass.HighDisengagement


@dataclass
class GroupWindow:
    """One multiparty sample: features of shape (P, k, F) and one label per person."""

    group_id: str
    t: int
    features: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def P(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    @property
    def F(self) -> int:
        return self.features.shape[2]

    def validate(self) -> None:
        f = self.features
        if f.ndim != 3:
            raise SchemaError(f"features must have 3 axes (P, k, F), got shape {f.shape}")
        P, k, F = f.shape
        if P < 2 or k < 1 or F < 1:
            raise SchemaError(f"need P >= 2, k >= 1, F >= 1; got P={P}, k={k}, F={F}")
        if self.labels.shape != (P,):
            raise SchemaError(f"labels length {self.labels.shape} does not equal P={P}")
        if ((self.labels < 0) | (self.labels >= NUM_CLASSES)).any():
            raise SchemaError(f"labels must lie in 0..{NUM_CLASSES - 1}, got {self.labels.tolist()}")

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "t": int(self.t),
            "features": self.features.tolist(),
            "labels": [int(v) for v in self.labels],
        }

    @classmethod
    def from_record(cls, rec: dict) -> GroupWindow:
        missing = {"group_id", "t", "features", "labels"} - set(rec)
        if missing:
            raise DataError(f"missing keys {sorted(missing)}")
        return cls(str(rec["group_id"]), int(rec["t"]), np.asarray(rec["features"], dtype=np.float64), rec["labels"])


def save_jsonl(samples: Iterable[GroupWindow], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()))
            fh.write("\n")


def load_jsonl(path) -> list[GroupWindow]:
    """Read a dataset file; every record must share the same (P, k, F)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    out: list[GroupWindow] = []
    dims = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise DataError("record is not a JSON object")
                sample = GroupWindow.from_record(rec)
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if dims is None:
                dims = sample.features.shape
            elif sample.features.shape != dims:
                raise SchemaError(
                    f"{path}:{lineno}: (P, k, F) = {sample.features.shape} differs from {dims}"
                )
            out.append(sample)
    return out


def stack_features(samples: Sequence[GroupWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Features as (N, P, k, F) and labels as (N, P)."""
    if not samples:
        raise DataError("empty dataset")
    return np.stack([s.features for s in samples]), np.stack([s.labels for s in samples])


def split_by_group(samples: Sequence[GroupWindow], fractions: Sequence[float], seed: int) -> list[list[GroupWindow]]:
    """Partition samples by ``group_id`` so no group appears in two parts."""
    groups = sorted({s.group_id for s in samples})
    rng = np.random.default_rng(seed)
    order = [groups[i] for i in rng.permutation(len(groups))]
    cuts = np.floor(np.cumsum(fractions) / np.sum(fractions) * len(order) + 1e-9).astype(int)
    assign = {}
    start = 0
    for part, stop in enumerate(cuts):
        for g in order[start:stop]:
            assign[g] = part
        start = stop
    parts: list[list[GroupWindow]] = [[] for _ in fractions]
    for s in samples:
        parts[assign[s.group_id]].append(s)
    return parts
