"""Attention maps on disk: one CSV and one 8-bit PGM per (pair, layer, head)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import GroupWindow
from .model import MultiparT
from .synthetic import attention_lag_score

__all__ = ["pair_name", "write_csv", "write_pgm", "read_pgm", "export_attention"]


def pair_name(source: int, target: int) -> str:
    return f"p{source}_to_p{target}"


def write_csv(weights: np.ndarray, path) -> None:
    """Rows are query timesteps, columns key timesteps; full float precision."""
    np.savetxt(path, np.asarray(weights, dtype=np.float64), delimiter=",", fmt="%.17g")


def write_pgm(weights: np.ndarray, path) -> None:
    """Binary 8-bit grayscale: 0 maps to black and 1 to white."""
    w = np.asarray(weights, dtype=np.float64)
    pixels = np.rint(np.clip(w, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w.shape[1]} {w.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:width * height], dtype=np.uint8).reshape(height, width)


def export_attention(model: MultiparT, window: GroupWindow, target: int, out_dir, sample_id: str,
                     truth: dict | None = None) -> dict:
    """Write every attention map of ``target``'s forward pass under
    ``out_dir/attn/<sample>/<target>/<pair>/<layer>_<head>.csv`` (plus ``.pgm``).

    With ``truth`` (one record from the synthetic truth file) a ``scores.json``
    sidecar holds the layer-0 lag score of the map whose source planted the
    target's response. Returns a summary dict.
    """
    pred, maps = model.forward(window, target)
    base = Path(out_dir) / "attn" / str(sample_id) / str(target)
    files = []
    for (src, tgt, layer), w in sorted(maps.items()):
        pair_dir = base / pair_name(src, tgt)
        pair_dir.mkdir(parents=True, exist_ok=True)
        for head in range(w.shape[0]):
            stem = pair_dir / f"{layer}_{head}"
            write_csv(w[head], stem.with_suffix(".csv"))
            write_pgm(w[head], stem.with_suffix(".pgm"))
            files.append(str(stem.with_suffix(".csv")))
    summary = {"sample": str(sample_id), "target": target, "probs": pred.probs.tolist(),
               "label": pred.label, "files": files}
    if truth is not None:
        person = truth["persons"][target]
        src = person.get("source")
        if src is not None and (src, target, 0) in maps:
            w0 = maps[(src, target, 0)]
            scores = [attention_lag_score(w0[h], person["onset"], person["lag"], truth["event_len"])
                      for h in range(w0.shape[0])]
            summary["lag_score"] = {"pair": pair_name(src, target), "layer": 0, "per_head": scores,
                                    "mean": float(np.mean(scores))}
        base.mkdir(parents=True, exist_ok=True)
        (base / "scores.json").write_text(json.dumps(summary.get("lag_score"), indent=2))
    return summary
