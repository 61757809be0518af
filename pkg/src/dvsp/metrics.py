"""Verification and robustness metrics.

A pair is accepted as "same identity" when its feature distance is <= T.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - cos(a, b)`` over the last axis, in [0, 2]."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine distance undefined for a zero vector")
    d = 1.0 - (a * b).sum(-1) / (na * nb)
    return d.clamp(0.0, 2.0)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.impostor = np.asarray(self.impostor, dtype=np.float64).reshape(-1)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores, plus one point below and above all."""
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2
    # subnormal neighbours can round the midpoint up onto the upper score
    mids = np.where(mids < u[1:], mids, u[:-1])
    return np.concatenate([[np.nextafter(u[0], -np.inf)], mids, [np.nextafter(u[-1], np.inf)]])


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Picks the candidate threshold with the smallest |FPR - FNR| (ties go to
    the smaller threshold) and reports (FPR + FNR) / 2 there, capped at 0.5:
    a coin-flip decision always reaches FPR = FNR = 0.5.
    """
    g, imp = scores.genuine, scores.impostor
    if g.size == 0 or imp.size == 0:
        raise ValueError("need at least one genuine and one impostor score")
    t = candidate_thresholds(np.concatenate([g, imp]))
    # integer counts so that exact ties in |FPR - FNR| stay ties
    misses = g.size - np.searchsorted(np.sort(g), t, side="right")
    accepts = np.searchsorted(np.sort(imp), t, side="right")
    gap = np.abs(accepts * g.size - misses * imp.size)
    i = int(np.argmin(gap))  # first minimum = smallest threshold
    eer = min(0.5, (accepts[i] / imp.size + misses[i] / g.size) / 2)
    return float(eer), float(t[i])


def pairwise_hardness(norms, successes, ceiling: float = 10.0) -> float:
    """Mean perturbation norm over attempts; failed attempts count as ``ceiling``."""
    norms = list(norms)
    successes = list(successes)
    if not norms:
        raise ValueError("no attack attempts for this class pair")
    vals = [n if ok else ceiling for n, ok in zip(norms, successes)]
    return float(sum(vals) / len(vals))


def robustness_index(H: np.ndarray, n_c: int | None = None) -> float:
    """Mean over unordered class pairs of the symmetrized hardness (H_kl + H_lk) / 2."""
    H = np.asarray(H, dtype=np.float64)
    n_c = H.shape[0] if n_c is None else n_c
    if H.shape != (n_c, n_c):
        raise ValueError(f"H has shape {H.shape}, expected ({n_c}, {n_c})")
    missing = [(k, l) for k in range(n_c) for l in range(n_c) if k != l and not np.isfinite(H[k, l])]
    if missing:
        raise ValueError(f"missing hardness entries: {missing}")
    vals = [(H[k, l] + H[l, k]) / 2 for k in range(n_c) for l in range(k + 1, n_c)]
    return float(np.mean(vals))


def symmetrized(H: np.ndarray) -> np.ndarray:
    S = (H + H.T) / 2
    np.fill_diagonal(S, np.nan)
    return S


@dataclass
class RobustnessReport:
    H: np.ndarray
    RI: float
    EER: float
    T: float
    attempts: np.ndarray
    failures: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def n_c(self) -> int:
        return self.H.shape[0]

    def to_dict(self) -> dict:
        def mat(a):
            return [[None if not math.isfinite(v) else float(v) for v in row] for row in np.asarray(a, float)]

        return {
            "H": mat(self.H),
            "RI": self.RI,
            "EER": self.EER,
            "T": self.T,
            "attempts": np.asarray(self.attempts).astype(int).tolist(),
            "failures": np.asarray(self.failures).astype(int).tolist(),
            "total_failures": int(np.asarray(self.failures).sum()),
            "config": self.config,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RobustnessReport":
        d = json.loads(Path(path).read_text())
        H = np.array([[np.nan if v is None else v for v in row] for row in d["H"]], dtype=np.float64)
        return cls(H, d["RI"], d["EER"], d["T"], np.array(d["attempts"]), np.array(d["failures"]), d["config"])


def heatmap_export(report: RobustnessReport | np.ndarray, path) -> None:
    """n_c x n_c CSV with class-id header row and column; diagonal cells empty."""
    H = report.H if isinstance(report, RobustnessReport) else np.asarray(report)
    n = H.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + [str(c) for c in range(n)])
        for k in range(n):
            w.writerow([str(k)] + ["" if k == l else repr(float(H[k, l])) for l in range(n)])


def heatmap_read(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n = len(rows) - 1
    H = np.full((n, n), np.nan)
    for k, row in enumerate(rows[1:]):
        for l, cell in enumerate(row[1:]):
            if cell != "":
                H[k, l] = float(cell)
    return H
