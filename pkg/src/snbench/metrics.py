"""Super-net quality and search-performance metrics.

Quality: mean subnet accuracy and sparse Kendall-Tau (tau-b between
super-net-implied ranks and ground-truth ranks after snapping the
ground-truth accuracies to a threshold grid so insignificant gaps share
a rank).  Search: probability to surpass random search and the mean
ground-truth accuracy of the top-k architectures by super-net score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from snbench.errors import BadRank, LengthMismatch


def sparse_rank(accuracies, threshold: float) -> np.ndarray:
    """Dense descending ranks after rounding to the threshold grid.

    Rounding is round-half-even on acc/threshold; equal rounded values
    share a rank and ranks start at 0.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    accs = np.asarray(accuracies, dtype=np.float64)
    snapped = np.round(accs / threshold).astype(np.int64)
    uniq = np.unique(snapped)
    return (len(uniq) - 1) - np.searchsorted(uniq, snapped)


def average_rank(values) -> np.ndarray:
    """Ascending 1-based ranks with ties sharing the group mean."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def kendall_tau_b(x_ranks, y_ranks) -> float:
    """Tau-b with tie correction: (C - D) / sqrt((n0 - tx)(n0 - ty)).

    Pairwise O(n^2) sign counting; returns nan when either side is
    entirely tied (the correlation is undefined there).
    """
    x = np.asarray(x_ranks, dtype=np.float64)
    y = np.asarray(y_ranks, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"rank vectors differ: {x.shape} vs {y.shape}")
    n = len(x)
    if n < 2:
        raise LengthMismatch("need at least two items")
    iu = np.triu_indices(n, k=1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    prod = dx * dy
    concordant = int((prod > 0).sum())
    discordant = int((prod < 0).sum())
    n0 = n * (n - 1) // 2
    tx = int((dx == 0).sum())
    ty = int((dy == 0).sum())
    denom = np.sqrt(float(n0 - tx) * float(n0 - ty))
    if denom == 0:
        return float("nan")
    return (concordant - discordant) / denom


def sparse_kdt(supernet_accs, gt_accs, threshold: float = 0.001,
               sparsify_supernet: bool = False) -> float:
    """Kendall tau-b of super-net ranks against grid-snapped truth ranks.

    Sparsification applies to the ground-truth side; set
    ``sparsify_supernet`` to snap the super-net side as well for
    sensitivity studies.
    """
    s = np.asarray(supernet_accs, dtype=np.float64)
    t = np.asarray(gt_accs, dtype=np.float64)
    if s.shape != t.shape:
        raise LengthMismatch(f"accuracy vectors differ: {s.shape} vs {t.shape}")
    # sparse_rank is descending (0 = best) while average_rank ascends with
    # the value; negate the sparse side(s) so both orientations agree.
    s_ranks = -sparse_rank(s, threshold) if sparsify_supernet else average_rank(s)
    return kendall_tau_b(s_ranks, -sparse_rank(t, threshold))


def prob_surpass_random(r: int, r_max: int, n: int) -> float:
    """p = 1 - (1 - r/r_max)^n with r oriented so the best rank is r_max."""
    if not 1 <= r <= r_max:
        raise BadRank(f"need 1 <= r <= r_max, got r={r}, r_max={r_max}")
    if n < 1:
        raise BadRank(f"need n >= 1, got {n}")
    return 1.0 - (1.0 - r / r_max) ** n


def rank_for_surpass(table, canon_id: str) -> tuple[int, int]:
    """(r, r_max): r counts records with accuracy <= this one, ties included."""
    r_max = table.n_records()
    r = r_max - (table.rank_of(canon_id) - 1)
    return r, r_max


def final_search_perf(supernet_accs, gt_table, arch_set: list[str], k: int = 3):
    """Mean ground truth of the top-k architectures by super-net score.

    Ties in the super-net score break by canonical id so the selection
    is reproducible.  Returns (mean, ground-truth accs of the top-k).
    """
    s = np.asarray(supernet_accs, dtype=np.float64)
    if len(s) != len(arch_set):
        raise LengthMismatch("one super-net score per architecture required")
    if len(arch_set) < k:
        raise LengthMismatch(f"need at least k={k} architectures, got {len(arch_set)}")
    order = sorted(range(len(arch_set)), key=lambda i: (-s[i], arch_set[i]))
    top = [arch_set[i] for i in order[:k]]
    gts = np.array([gt_table.mean_acc(c) for c in top])
    return float(gts.mean()), gts


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks (ties get the group mean)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"vectors differ: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise LengthMismatch("need at least three points")
    rx = average_rank(x)
    ry = average_rank(y)
    sx = rx.std()
    sy = ry.std()
    if sx == 0 or sy == 0:
        return float("nan")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


CSV_COLUMNS = [
    "factor",
    "setting",
    "supernet_acc_mean",
    "supernet_acc_std",
    "skdt",
    "p_surpass",
    "final_perf_mean",
    "final_perf_std",
]


@dataclass
class MetricReport:
    """One experiment's metric suite."""

    factor: str
    setting: str
    supernet_acc_mean: float
    supernet_acc_std: float
    skdt: float
    p_surpass: float
    final_perf_mean: float
    final_perf_std: float
    n_archs: int
    threshold: float
    n_supernet_seeds: int = 3
    arch_set_digest: str = ""
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isnan(self.skdt) and not -1.0 <= self.skdt <= 1.0:
            raise ValueError(f"skdt out of range: {self.skdt}")
        if not 0.0 <= self.p_surpass <= 1.0:
            raise ValueError(f"p_surpass out of range: {self.p_surpass}")

    def csv_row(self) -> list[str]:
        return [
            self.factor,
            self.setting,
            f"{self.supernet_acc_mean:.6f}",
            f"{self.supernet_acc_std:.6f}",
            f"{self.skdt:.6f}",
            f"{self.p_surpass:.6f}",
            f"{self.final_perf_mean:.6f}",
            f"{self.final_perf_std:.6f}",
        ]

    def to_json(self) -> dict:
        out = {
            "factor": self.factor,
            "setting": self.setting,
            "supernet_acc_mean": self.supernet_acc_mean,
            "supernet_acc_std": self.supernet_acc_std,
            "skdt": self.skdt,
            "p_surpass": self.p_surpass,
            "final_perf_mean": self.final_perf_mean,
            "final_perf_std": self.final_perf_std,
            "n_archs": self.n_archs,
            "threshold": self.threshold,
            "n_supernet_seeds": self.n_supernet_seeds,
            "arch_set_digest": self.arch_set_digest,
            "config_digest": self.config_digest,
            "extra": self.extra,
        }
        return out

    @staticmethod
    def from_json(obj: dict) -> "MetricReport":
        return MetricReport(**obj)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)
