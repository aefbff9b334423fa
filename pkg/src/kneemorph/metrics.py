"""Image-fidelity metrics and the frame evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .morphing import scale_flow, warp

EVAL_ETAS = (0.25, 0.5, 0.75)
METRICS = ("psnr_db", "nmse", "mse")


def _pair(real, synth) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(real, dtype=np.float64)
    b = np.asarray(synth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(real, synth) -> float:
    a, b = _pair(real, synth)
    return float(np.mean((a - b) ** 2))


def psnr(real, synth, max_i: float = 2.0) -> float:
    """10 log10(max_i^2 / mse) in dB; +inf when the images are identical.

    ``max_i`` defaults to 2, the peak-to-peak range of [-1, 1] images.
    """
    if max_i <= 0:
        raise ValueError("max_i must be positive")
    m = mse(real, synth)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(max_i ** 2 / m)


def nmse(real, synth) -> float:
    """Squared error normalized by the spread of the real image (not symmetric)."""
    a, b = _pair(real, synth)
    denom = float(np.sum((a - a.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("nmse is undefined for a constant real image")
    return float(np.sum((a - b) ** 2)) / denom


@dataclass(frozen=True)
class EvalRecord:
    pair_id: int
    eta: float
    psnr_db: float
    nmse: float
    mse: float


def evaluate_run(flows, sources, truth: dict, etas=EVAL_ETAS, max_i: float = 2.0):
    """Score synthesized frames against ground truth.

    ``flows`` is either one (2, H, W) field applied to every source or a
    per-pair (N, 2, H, W) stack; ``truth`` maps eta to an (N, H, W) stack.
    Returns (records ordered by pair then eta, summary rows).
    """
    sources = np.asarray(sources, dtype=np.float64)
    flows = np.asarray(flows, dtype=np.float64)
    shared = flows.ndim == 3
    if not shared and len(flows) != len(sources):
        raise ValueError(f"{len(flows)} flows for {len(sources)} sources")
    lookup = {round(float(k), 9): np.asarray(v) for k, v in truth.items()}
    for eta in etas:
        if round(float(eta), 9) not in lookup:
            raise KeyError(f"no ground truth for eta={eta}")
    records = []
    for i, src in enumerate(sources):
        flow = flows if shared else flows[i]
        for eta in etas:
            real = lookup[round(float(eta), 9)][i]
            frame = warp(src, scale_flow(flow, eta))
            m = mse(real, frame)
            records.append(EvalRecord(i, float(eta), psnr(real, frame, max_i), nmse(real, frame), m))
    return records, summarize(records)


def summarize(records) -> list[dict]:
    """Per-eta median, quartiles (linear interpolation between closest ranks) and mean."""
    rows = []
    for eta in sorted({r.eta for r in records}):
        sel = [r for r in records if r.eta == eta]
        for metric in METRICS:
            vals = np.array([getattr(r, metric) for r in sel], dtype=np.float64)
            q1, med, q3 = np.percentile(vals, [25, 50, 75], method="linear")
            rows.append({"eta": eta, "metric": metric, "median": float(med), "q1": float(q1),
                         "q3": float(q3), "mean": float(vals.mean())})
    return rows


def write_records(path, records) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_id", "eta", "psnr_db", "nmse", "mse"])
        for r in records:
            w.writerow([r.pair_id, repr(r.eta), repr(r.psnr_db), repr(r.nmse), repr(r.mse)])


def write_summary(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eta", "metric", "median", "q1", "q3", "mean"])
        for r in rows:
            w.writerow([repr(r["eta"]), r["metric"], repr(r["median"]), repr(r["q1"]), repr(r["q3"]), repr(r["mean"])])
