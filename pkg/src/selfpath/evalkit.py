"""AUC-ROC, average precision and the annotation-budget sweep harness."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import SelfPathError, UndefinedMetricError

log = logging.getLogger(__name__)


def auc_roc(scores, labels) -> float:
    """Binary AUC as the Mann-Whitney statistic, ties credited 1/2.

    ``labels`` are 0/1 with 1 the positive class; higher scores mean positive.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(scores, labels, num_classes: Optional[int] = None) -> float:
    """Unweighted mean of one-vs-rest AUCs over classes."""
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    k = num_classes or p.shape[1]
    if k < 2:
        raise UndefinedMetricError("macro AUC needs at least two classes")
    missing = [c for c in range(k) if not np.any(y == c)]
    if missing:
        raise UndefinedMetricError(f"classes {missing} absent from labels")
    return float(np.mean([auc_roc(p[:, c], (y == c).astype(int)) for c in range(k)]))


def score_auc(probs, labels) -> float:
    """AUC for a probability matrix: binary AUC on column 1, macro AUC otherwise."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return auc_roc(p, labels)
    if p.shape[1] == 2:
        return auc_roc(p[:, 1], labels)
    return macro_auc(p, labels, p.shape[1])


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve with step interpolation.

    Tied scores form one threshold, so ties never depend on input order.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() == 1
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != (len(self.labels), self.num_classes):
            raise ValueError(f"scores must have shape ({len(self.labels)}, {self.num_classes})")
        if np.any(self.scores < 0) or not np.allclose(self.scores.sum(1), 1.0, atol=1e-6):
            raise ValueError("score rows must be probability vectors")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def auc(self) -> float:
        if self.num_classes == 2:
            return auc_roc(self.scores[:, 1], self.labels)
        return macro_auc(self.scores, self.labels, self.num_classes)


@dataclass
class BudgetResult:
    budget: float
    aucs: list
    seeds: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)  # seed -> error message

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs)) if self.aucs else float("nan")

    @property
    def std(self) -> float:
        # population standard deviation across seeds
        return float(np.std(self.aucs)) if self.aucs else float("nan")

    def record(self, arm: str = "") -> dict:
        d = asdict(self)
        d.update(arm=arm, mean=self.mean, std=self.std)
        d["failed"] = {str(k): v for k, v in self.failed.items()}
        return d


def budget_sweep(run_cell: Callable[[float, int], float], budgets: Sequence[float],
                 seeds: Sequence[int]) -> list:
    """Run ``run_cell(budget, seed) -> test AUC`` for every cell and aggregate.

    A cell that raises is recorded as failed; the sweep carries on.
    """
    if not seeds:
        raise ValueError("budget sweep needs at least one seed")
    for b in budgets:
        if not 0.0 < b <= 1.0:
            raise ValueError(f"budgets must lie in (0, 1], got {b}")
    results = []
    for b in budgets:
        res = BudgetResult(budget=float(b), aucs=[], seeds=[])
        for s in seeds:
            try:
                auc = float(run_cell(b, s))
            except (SelfPathError, ValueError, FloatingPointError) as exc:
                log.warning("cell budget=%g seed=%d failed: %s", b, s, exc)
                res.failed[s] = f"{type(exc).__name__}: {exc}"
                continue
            res.aucs.append(auc)
            res.seeds.append(s)
        results.append(res)
    return results


def format_table(rows: dict, budgets: Sequence[float], title: str = "") -> str:
    """Aligned text table, one row per arm and one column per budget.

    ``rows`` maps arm name -> list of BudgetResult in ``budgets`` order.
    """
    header = ["arm"] + [f"{b * 100:g}%" for b in budgets]
    body = []
    for arm, results in rows.items():
        cells = [arm]
        for r in results:
            cells.append("failed" if not r.aucs else f"{100 * r.mean:.1f} ± {100 * r.std:.1f}")
        body.append(cells)
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                for i, (c, w) in enumerate(zip(row, widths)))
    lines = ([title] if title else []) + [fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in body]
    lines.append("AUC-ROC (%) mean ± population std over seeds.")
    return "\n".join(lines)


def write_results(rows: dict, budgets: Sequence[float], out_dir, title: str = "") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r.record(arm) for arm, results in rows.items() for r in results]
    with (out_dir / "results.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    table = format_table(rows, budgets, title)
    (out_dir / "results.txt").write_text(table + "\n")
    return {"records": out_dir / "results.jsonl", "table": out_dir / "results.txt"}


def plot_budget_curves(rows: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for arm, results in rows.items():
        ok = [r for r in results if r.aucs]
        if not ok:
            continue
        x = [100 * r.budget for r in ok]
        ax.errorbar(x, [100 * r.mean for r in ok], yerr=[100 * r.std for r in ok],
                    marker="o", capsize=3, label=arm)
    ax.set_xscale("log")
    ax.set_xlabel("annotation budget (%)")
    ax.set_ylabel("test AUC-ROC (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
