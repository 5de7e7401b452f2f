"""Metrics and nonparametric comparison machinery.

Covers per-run scoring (macro F1, confusion matrices), pairwise comparison
(Mann-Whitney U with exact small-sample p-values), and multi-algorithm
comparison (Friedman test, Nemenyi critical distance, and the critical
difference diagram layout with its SVG rendering).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special as _special

__all__ = [
    "macro_f1",
    "confusion_matrix",
    "mann_whitney_u",
    "MwuResult",
    "ScoreMatrix",
    "friedman_test",
    "FriedmanResult",
    "nemenyi_cd",
    "cd_diagram_layout",
    "write_cd_diagram_svg",
]


# -- classification metrics ------------------------------------------------------


def macro_f1(pred, truth, k):
    """Arithmetic mean of per-class F1 over all k classes.

    A class absent from both predictions and truth contributes F1 = 0 and a
    warning; this keeps the score conservative under missing classes.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if len(pred) and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    scores = []
    for cls in range(k):
        tp = int(((pred == cls) & (truth == cls)).sum())
        fp = int(((pred == cls) & (truth != cls)).sum())
        fn = int(((pred != cls) & (truth == cls)).sum())
        if tp == 0 and fp == 0 and fn == 0:
            warnings.warn(f"class {cls} absent from both predictions and truth; scoring F1=0")
            scores.append(0.0)
        elif 2 * tp + fp + fn == 0:
            scores.append(0.0)
        else:
            scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def confusion_matrix(pred, truth, k):
    """Counts [truth, pred] plus row-normalized percentages."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    row_sums = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = np.where(row_sums > 0, 100.0 * counts / row_sums, 0.0)
    return counts, pct


# -- Mann-Whitney U ----------------------------------------------------------------


VERDICT_GREATER = "+"
VERDICT_LESS = "-"
VERDICT_SIMILAR = "≈"


@dataclass
class MwuResult:
    u: float  # U statistic of the first sample
    p: float  # two-sided unless one_sided was requested
    verdict: str  # +, - or ≈ from the first sample's perspective
    exact: bool


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_u_counts(n_a, n_b):
    """Null distribution of U as counts, by the standard recurrence."""
    max_u = n_a * n_b
    table = {(0, 0): np.ones(1)}

    def dist(a, b):
        if (a, b) in table:
            return table[(a, b)]
        if a == 0 or b == 0:
            out = np.zeros(a * b + 1)
            out[0] = 1.0
            table[(a, b)] = out
            return out
        # u(a, b, U) = u(a-1, b, U-b) + u(a, b-1, U)
        left = dist(a - 1, b)
        right = dist(a, b - 1)
        out = np.zeros(a * b + 1)
        out[b : b + len(left)] += left
        out[: len(right)] += right
        table[(a, b)] = out
        return out

    counts = dist(n_a, n_b)
    assert len(counts) == max_u + 1
    return counts


def mann_whitney_u(a, b, alpha=0.05, one_sided=False):
    """Rank-sum comparison of two samples.

    Exact p-values (via the counting recurrence) are used for tie-free data
    when the smaller sample has at most 8 values; otherwise the normal
    approximation with midrank tie correction and continuity correction.
    The verdict is "+" when `a` is significantly greater than `b` at `alpha`,
    "-" when significantly smaller, "~" otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n_a, n_b = len(a), len(b)
    if min(n_a, n_b) < 3:
        raise ValueError(f"each sample needs at least 3 values, got {n_a} and {n_b}")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r_a = ranks[:n_a].sum()
    u_a = r_a - n_a * (n_a + 1) / 2.0
    u_b = n_a * n_b - u_a

    has_ties = len(np.unique(pooled)) < len(pooled)
    mean_u = n_a * n_b / 2.0
    if not has_ties and min(n_a, n_b) <= 8:
        counts = _exact_u_counts(n_a, n_b)
        total = counts.sum()
        if one_sided:
            # alternative: a greater, i.e. P(U >= u_a)
            p = float(min(counts[int(u_a) :].sum() / total, 1.0))
        else:
            u_small = min(u_a, u_b)
            p = float(min(2.0 * counts[: int(u_small) + 1].sum() / total, 1.0))
        exact = True
    else:
        # normal approximation with tie correction
        n = n_a + n_b
        _, tie_counts = np.unique(pooled, return_counts=True)
        tie_term = ((tie_counts ** 3 - tie_counts).sum()) / (n * (n - 1)) if n > 1 else 0.0
        sd = math.sqrt(n_a * n_b / 12.0 * ((n + 1) - tie_term))
        if sd == 0.0:
            return MwuResult(u=u_a, p=1.0, verdict=VERDICT_SIMILAR, exact=False)
        z = (u_a - mean_u - 0.5 * np.sign(u_a - mean_u)) / sd
        if one_sided:
            p = float(0.5 * math.erfc(z / math.sqrt(2.0)))
        else:
            p = float(math.erfc(abs(z) / math.sqrt(2.0)))
        p = float(min(max(p, 0.0), 1.0))
        exact = False

    if p < alpha:
        verdict = VERDICT_GREATER if u_a > mean_u else VERDICT_LESS
    else:
        verdict = VERDICT_SIMILAR
    return MwuResult(u=float(u_a), p=p, verdict=verdict, exact=exact)


# -- Friedman / Nemenyi --------------------------------------------------------------


@dataclass
class ScoreMatrix:
    """Mean scores, one row per algorithm, one column per condition."""

    algorithms: list
    conditions: list
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.algorithms), len(self.conditions)):
            raise ValueError(
                f"scores shape {self.scores.shape} does not match "
                f"{len(self.algorithms)} algorithms x {len(self.conditions)} conditions"
            )
        if np.isnan(self.scores).any():
            raise ValueError("score matrix has missing cells")


@dataclass
class FriedmanResult:
    chi2: float
    f_stat: float
    p: float
    mean_ranks: dict


def friedman_test(scores):
    """Friedman rank test over algorithms x conditions (rank 1 = best score).

    Returns the chi-square statistic, its F-distributed variant and that
    variant's p-value, plus per-algorithm mean ranks (midranks on ties).
    """
    m = len(scores.algorithms)
    n = len(scores.conditions)
    if m < 3:
        raise ValueError(f"need at least 3 algorithms, got {m}")
    if n < 5:
        warnings.warn(f"only {n} conditions; the Friedman approximation is weak below 5")
    ranks = np.empty((m, n))
    for j in range(n):
        ranks[:, j] = _midranks(-scores.scores[:, j])
    mean_ranks = ranks.mean(axis=1)
    chi2 = 12.0 * n / (m * (m + 1)) * (float((mean_ranks ** 2).sum()) - m * (m + 1) ** 2 / 4.0)
    denom = n * (m - 1) - chi2
    if denom <= 0:
        f_stat = float("inf")
        p = 0.0
    else:
        f_stat = (n - 1) * chi2 / denom
        df1 = m - 1
        df2 = (m - 1) * (n - 1)
        # F survival function via the regularized incomplete beta
        x = df2 / (df2 + df1 * f_stat) if f_stat > 0 else 1.0
        p = float(_special.betainc(df2 / 2.0, df1 / 2.0, x))
    return FriedmanResult(
        chi2=float(chi2),
        f_stat=float(f_stat),
        p=float(min(max(p, 0.0), 1.0)),
        mean_ranks={name: float(r) for name, r in zip(scores.algorithms, mean_ranks)},
    )


# Studentized range quantiles divided by sqrt(2), infinite degrees of freedom,
# for 2..20 groups.
_Q_TABLE = {
    0.05: [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
           3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544],
    0.10: [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
           2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319],
}


def nemenyi_cd(n_algorithms, n_conditions, alpha=0.05):
    """Critical distance between mean ranks for the Nemenyi post-hoc test."""
    if alpha not in _Q_TABLE:
        raise ValueError(f"alpha must be one of {sorted(_Q_TABLE)}, got {alpha}")
    if not 2 <= n_algorithms <= 20:
        raise ValueError(f"q table covers 2..20 algorithms, got {n_algorithms}")
    q = _Q_TABLE[alpha][n_algorithms - 2]
    return q * math.sqrt(n_algorithms * (n_algorithms + 1) / (6.0 * n_conditions))


def cd_diagram_layout(mean_ranks, cd):
    """Serializable critical-difference diagram: positions plus clique bars.

    Cliques are the maximal consecutive groups (by mean rank) whose rank
    spread is at most `cd`; singleton groups are omitted.
    """
    items = sorted(mean_ranks.items(), key=lambda kv: (kv[1], kv[0]))
    names = [name for name, _ in items]
    ranks = [float(r) for _, r in items]
    m = len(items)
    cliques = []
    prev_end = -1
    for i in range(m):
        j = i
        while j + 1 < m and ranks[j + 1] - ranks[i] <= cd:
            j += 1
        if j > i and j > prev_end:
            cliques.append(names[i : j + 1])
            prev_end = j
    return {
        "axis": [1.0, float(max(m, 2))],
        "cd": float(cd),
        "algorithms": [{"name": n, "rank": r} for n, r in items],
        "cliques": cliques,
    }


def write_cd_diagram_svg(layout, path):
    """Render the layout to a small standalone SVG."""
    width, height = 640, 130 + 24 * len(layout["cliques"])
    lo, hi = layout["axis"]
    pad = 60

    def xpos(rank):
        if hi == lo:
            return width / 2
        return pad + (rank - lo) / (hi - lo) * (width - 2 * pad)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<line x1="{pad}" y1="40" x2="{width - pad}" y2="40" stroke="black"/>',
    ]
    tick = math.ceil(lo)
    while tick <= hi:
        x = xpos(tick)
        lines.append(f'<line x1="{x:.1f}" y1="35" x2="{x:.1f}" y2="45" stroke="black"/>')
        lines.append(f'<text x="{x:.1f}" y="30" text-anchor="middle">{tick}</text>')
        tick += 1
    cd_x0, cd_x1 = xpos(lo), xpos(lo + layout["cd"])
    lines.append(f'<line x1="{cd_x0:.1f}" y1="12" x2="{cd_x1:.1f}" y2="12" stroke="black"/>')
    lines.append(f'<text x="{(cd_x0 + cd_x1) / 2:.1f}" y="9" text-anchor="middle">CD={layout["cd"]:.3f}</text>')
    for i, algo in enumerate(layout["algorithms"]):
        x = xpos(algo["rank"])
        y_label = 62 + 14 * i
        lines.append(f'<line x1="{x:.1f}" y1="40" x2="{x:.1f}" y2="{y_label - 4}" stroke="gray"/>')
        lines.append(f'<text x="{x:.1f}" y="{y_label}" text-anchor="middle">{algo["name"]} ({algo["rank"]:.2f})</text>')
    y_bar = 62 + 14 * len(layout["algorithms"]) + 10
    rank_of = {a["name"]: a["rank"] for a in layout["algorithms"]}
    for clique in layout["cliques"]:
        x0 = xpos(min(rank_of[n] for n in clique))
        x1 = xpos(max(rank_of[n] for n in clique))
        lines.append(f'<line x1="{x0:.1f}" y1="{y_bar}" x2="{x1:.1f}" y2="{y_bar}" '
                     f'stroke="black" stroke-width="4"/>')
        y_bar += 14
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def save_layout_json(layout, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(layout, fh, indent=2, sort_keys=True)
        fh.write("\n")
