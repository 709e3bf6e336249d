"""Correlation metrics and the repeated-split evaluation protocol.

srocc: Pearson correlation of tie-averaged (mid) ranks.
plcc:  sample Pearson correlation on the raw scores (no remapping).
krocc: Kendall tau-b, tie-corrected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import round_half_up
from .errors import MetricError


def _validated(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[0] < 2:
        raise MetricError("metrics need at least two samples")
    if not (np.isfinite(p).all() and np.isfinite(g).all()):
        raise MetricError("metrics need finite inputs")
    return p, g


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(p: np.ndarray, g: np.ndarray) -> float:
    pc = p - p.mean()
    gc = g - g.mean()
    denom_sq = float((pc * pc).sum()) * float((gc * gc).sum())
    if denom_sq == 0.0:
        raise MetricError("correlation undefined for constant input")
    return float((pc * gc).sum() / np.sqrt(denom_sq))


def plcc(pred, gt) -> float:
    p, g = _validated(pred, gt)
    return _pearson(p, g)


def srocc(pred, gt) -> float:
    p, g = _validated(pred, gt)
    return _pearson(midranks(p), midranks(g))


def krocc(pred, gt) -> float:
    p, g = _validated(pred, gt)
    ps = np.sign(p[:, None] - p[None, :])
    gs = np.sign(g[:, None] - g[None, :])
    iu = np.triu_indices(len(p), k=1)
    num = float((ps[iu] * gs[iu]).sum())

    def tie_pairs(x: np.ndarray) -> float:
        _, counts = np.unique(x, return_counts=True)
        return float((counts * (counts - 1) // 2).sum())

    n0 = len(p) * (len(p) - 1) / 2.0
    n1, n2 = tie_pairs(p), tie_pairs(g)
    denom_sq = (n0 - n1) * (n0 - n2)
    if denom_sq <= 0.0:
        raise MetricError("Kendall tau undefined: an input is entirely tied")
    return num / float(np.sqrt(denom_sq))


@dataclass(frozen=True)
class EvalReport:
    split_id: int
    n: int
    srocc: float
    plcc: float
    krocc: float

    def row(self) -> dict:
        return {"split_id": self.split_id, "n": self.n, "srocc": self.srocc,
                "plcc": self.plcc, "krocc": self.krocc}


def report_from_scores(pred, gt, split_id: int = 0) -> EvalReport:
    p, g = _validated(pred, gt)
    return EvalReport(split_id=split_id, n=len(p), srocc=srocc(p, g),
                      plcc=plcc(p, g), krocc=krocc(p, g))


def split_partition(n: int, train_frac: float, seed: int, split_id: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint train/test index partition for one split."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed & 0x7FFFFFFF, 0x5B117, split_id])))
    order = rng.permutation(n)
    n_train = round_half_up(n * train_frac)
    train, test = order[:n_train], order[n_train:]
    if len(test) == 0:
        raise MetricError("empty test split (train_frac too large)")
    if len(train) == 0:
        raise MetricError("empty train split (train_frac too small)")
    return np.sort(train), np.sort(test)


@dataclass
class SplitSummary:
    reports: list[EvalReport]
    mean: dict[str, float]
    median: dict[str, float]


def run_splits(entries: Sequence, train_fn: Callable, k_splits: int = 10,
               train_frac: float = 0.8, seed: int = 0) -> SplitSummary:
    """Repeated random train/test protocol.

    train_fn(train_entries, test_entries, split_seed) must return
    (predictions, ground_truth) for the test entries. Split memberships
    are a pure function of (seed, split_id).
    """
    n = len(entries)
    if n < 10:
        raise MetricError(f"split protocol needs at least 10 entries, got {n}")
    if k_splits < 1:
        raise MetricError("k_splits must be >= 1")
    reports: list[EvalReport] = []
    for split_id in range(k_splits):
        train_idx, test_idx = split_partition(n, train_frac, seed, split_id)
        train_entries = [entries[i] for i in train_idx]
        test_entries = [entries[i] for i in test_idx]
        pred, gt = train_fn(train_entries, test_entries, split_id)
        reports.append(report_from_scores(pred, gt, split_id=split_id))
    metrics = ("srocc", "plcc", "krocc")
    mean = {m: float(np.mean([getattr(r, m) for r in reports])) for m in metrics}
    median = {m: float(np.median([getattr(r, m) for r in reports])) for m in metrics}
    return SplitSummary(reports=reports, mean=mean, median=median)
