"""Echo return loss enhancement (ERLE) metrics and evaluation reports.

The residual is ``e = y - d``; higher ERLE is better.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .filters import MDFConfig
from .loop import run_online
from .optimizers import Optimizer

DEFAULT_CAP = 80.0
# windows whose desired energy per sample falls below this are not scored
SILENCE_POWER = 1e-12


class MetricError(ValueError):
    pass


def erle(d, e, cap: float = DEFAULT_CAP) -> float:
    """``10 log10(sum d^2 / sum e^2)`` clamped to ``[-cap, cap]``."""
    d, e = np.asarray(d, dtype=np.float64), np.asarray(e, dtype=np.float64)
    if d.shape != e.shape:
        raise MetricError("length mismatch")
    pd = float(np.sum(d * d))
    if pd == 0.0:
        raise MetricError("ERLE undefined for an all-zero desired signal")
    with np.errstate(all="ignore"):
        pe = float(np.sum(e * e))
    if not np.isfinite(pe):
        return -cap
    if pe == 0.0:
        return cap
    return float(np.clip(10.0 * np.log10(pd / pe), -cap, cap))


def segmental_erle(d, e, window: int, hop: int | None = None, cap: float = DEFAULT_CAP) -> np.ndarray:
    """ERLE over sliding windows; silent windows are NaN."""
    if window <= 0:
        raise MetricError("window must be positive")
    d, e = np.asarray(d, dtype=np.float64), np.asarray(e, dtype=np.float64)
    if window > len(d):
        raise MetricError("window longer than signal")
    hop = hop or max(window // 2, 1)
    count = (len(d) - window) // hop + 1
    out = np.full(count, np.nan)
    for k in range(count):
        sl = slice(k * hop, k * hop + window)
        pd = float(np.sum(d[sl] ** 2))
        if pd / window < SILENCE_POWER:
            continue
        with np.errstate(all="ignore"):
            pe = float(np.sum(e[sl] ** 2))
        if not np.isfinite(pe):
            out[k] = -cap
            continue
        out[k] = cap if pe == 0.0 else float(np.clip(10 * np.log10(pd / pe), -cap, cap))
    return out


@dataclass
class SceneResult:
    id: str
    tag: str
    erle_db: float
    curve: np.ndarray
    boundary: int | None = None


@dataclass
class ERLEReport:
    optimizer: dict
    optimizee: dict
    window: int
    hop: int
    sample_rate: int
    scenes: list[SceneResult] = field(default_factory=list)

    def values(self, tag: str | None = None) -> np.ndarray:
        return np.array([s.erle_db for s in self.scenes if tag is None or s.tag == tag])

    def mean(self, tag: str | None = None) -> float:
        v = self.values(tag)
        return float(np.mean(v)) if len(v) else float("nan")

    def std(self, tag: str | None = None) -> float:
        v = self.values(tag)
        return float(np.std(v)) if len(v) else float("nan")

    def summary(self) -> dict:
        out = {"optimizer": self.optimizer, "optimizee": self.optimizee, "window": self.window,
               "hop": self.hop, "all": {"mean": self.mean(), "std": self.std(), "count": len(self.scenes)}}
        for tag in sorted({s.tag for s in self.scenes}):
            out[tag] = {"mean": self.mean(tag), "std": self.std(tag), "count": len(self.values(tag))}
        return out

    def mean_curve(self, tag: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        """NaN-aware mean and std of segmental curves over equal-length scenes."""
        curves = [s.curve for s in self.scenes if tag is None or s.tag == tag]
        n = min(len(c) for c in curves)
        stack = np.stack([c[:n] for c in curves])
        return np.nanmean(stack, axis=0), np.nanstd(stack, axis=0)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "scenes.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "tag", "erle_db"])
            for s in self.scenes:
                w.writerow([s.id, s.tag, f"{s.erle_db:.6f}"])
        with open(out / "curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "window", "time_s", "erle_db", "boundary_s"])
            for s in self.scenes:
                b = "" if s.boundary is None else f"{s.boundary / self.sample_rate:.6f}"
                for k, v in enumerate(s.curve):
                    t = (k * self.hop + self.window / 2) / self.sample_rate
                    w.writerow([s.id, k, f"{t:.6f}", "" if np.isnan(v) else f"{v:.6f}", b])
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2))


def _group_by_length(scenes) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(scenes):
        groups.setdefault(len(s.far), []).append(i)
    return [groups[k] for k in sorted(groups)]


def evaluate(optimizer: Optimizer, scenes, config: MDFConfig, window: int | None = None,
             hop: int | None = None, threads: int = 1, chunk: int = 16,
             cap: float = DEFAULT_CAP) -> ERLEReport:
    """Run the online loop on every scene and collect ERLE statistics.

    Scenes of equal length are stacked and adapted in lock-step, in chunks
    of at most ``chunk``; chunking does not depend on ``threads``.
    """
    window = window or config.N
    hop = hop or max(window // 2, 1)
    jobs = []
    for group in _group_by_length(scenes):
        for k in range(0, len(group), chunk):
            jobs.append(group[k : k + chunk])

    def run(idx):
        far = np.stack([scenes[i].far for i in idx])
        near = np.stack([scenes[i].near for i in idx])
        return idx, run_online(optimizer, config, far, near), near

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(run, jobs))
    else:
        done = [run(j) for j in jobs]

    results: dict[int, SceneResult] = {}
    for idx, y, near in done:
        T = y.shape[-1]
        for row, i in enumerate(idx):
            d = near[row, :T]
            e = y[row] - d
            s = scenes[i]
            results[i] = SceneResult(
                id=s.id, tag=s.tag, erle_db=erle(d, e, cap),
                curve=segmental_erle(d, e, window, hop, cap),
                boundary=s.meta.get("boundary"),
            )
    return ERLEReport(
        optimizer=optimizer.describe(), optimizee=config.to_dict(), window=window, hop=hop,
        sample_rate=scenes[0].sample_rate if scenes else 8000,
        scenes=[results[i] for i in range(len(scenes))],
    )
