"""Fidelity and faithfulness evaluation.

PR-curve convention (tag ``"desc-sweep/tie-grouped/envelope"``): scores are
swept in descending order with tied scores forming one operating point. At
each point precision is ``tp / (tp + fp)`` and recall ``tp / n_pos``; the
area is ``sum_i (R_i - R_{i-1}) * max_{j >= i} P_j`` with ``R_0 = 0``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import IoError, ShapeError, UndefinedMetricError

PR_CONVENTION = "desc-sweep/tie-grouped/envelope"
F1_GRID = np.round(np.arange(1, 100) / 100.0, 2)


@dataclass
class FidelityReport:
    top_k: dict[int, float] = field(default_factory=dict)
    macro_auprc: float | None = None
    micro_auprc: float | None = None
    max_micro_f1: float | None = None
    n_samples: int = 0
    excluded_classes: list = field(default_factory=list)
    binarize_threshold: float | None = None
    convention: str = PR_CONVENTION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_k"] = {str(k): v for k, v in self.top_k.items()}
        return d


@dataclass
class FaithfulnessReport:
    per_sample: list[tuple[str, float, int]]
    ff_median: float
    tau: float
    baseline: "FaithfulnessReport | None" = None
    label: str = "interpreter"

    def to_dict(self) -> dict:
        d = {"label": self.label, "tau": self.tau, "ff_median": self.ff_median,
             "n_samples": len(self.per_sample),
             "per_sample": [{"id": i, "ff": ff, "n_selected": n} for i, ff, n in self.per_sample]}
        if self.baseline is not None:
            d["baseline"] = self.baseline.to_dict()
        return d


def _as_2d(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be (n_samples, n_classes)")
    return a


def topk_fidelity(f_probs, interp_probs, ks: Sequence[int] = (1, 3, 5)) -> dict[int, float]:
    """Fraction of samples whose classifier argmax is in the interpreter's top k.

    Ties in interpreter scores rank the lower class index first.
    """
    f = _as_2d(f_probs, "f_probs")
    g = _as_2d(interp_probs, "interp_probs")
    if f.shape != g.shape:
        raise ShapeError(f"shape mismatch {f.shape} vs {g.shape}")
    n, c = f.shape
    target = f.argmax(axis=1)
    tscore = g[np.arange(n), target][:, None]
    idx = np.arange(c)[None, :]
    rank = ((g > tscore) | ((g == tscore) & (idx < target[:, None]))).sum(axis=1)
    return {int(k): float(np.mean(rank < k)) for k in ks}


def pr_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at each tie-grouped descending threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n_pos = y.sum()
    if n_pos <= 0:
        raise UndefinedMetricError("AUPRC undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    pp = np.flatnonzero(last) + 1.0
    return tp / pp, tp / n_pos


def auprc(scores, labels) -> float:
    precision, recall = pr_points(scores, labels)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * envelope))


def micro_f1(scores, labels, threshold: float) -> float:
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels) > 0.5
    tp = np.sum(pred & y)
    denom = 2 * tp + np.sum(pred & ~y) + np.sum(~pred & y)
    return float(2 * tp / denom) if denom else 0.0


def max_micro_f1(scores, labels, grid=F1_GRID) -> float:
    return max(micro_f1(scores, labels, t) for t in grid)


def multilabel_fidelity(f_probs, interp_probs, binarize_threshold: float = 0.5) -> FidelityReport:
    f = _as_2d(f_probs, "f_probs")
    g = _as_2d(interp_probs, "interp_probs")
    if f.shape != g.shape:
        raise ShapeError(f"shape mismatch {f.shape} vs {g.shape}")
    pseudo = (f >= binarize_threshold).astype(np.float64)
    per_class, excluded = [], []
    for c in range(f.shape[1]):
        if pseudo[:, c].sum() == 0:
            excluded.append(c)
            continue
        per_class.append(auprc(g[:, c], pseudo[:, c]))
    keep = [c for c in range(f.shape[1]) if c not in excluded]
    macro = float(np.mean(per_class)) if per_class else float("nan")
    if keep:
        micro = auprc(g[:, keep].ravel(), pseudo[:, keep].ravel())
        f1 = max_micro_f1(g[:, keep].ravel(), pseudo[:, keep].ravel())
    else:
        micro = f1 = float("nan")
    return FidelityReport(macro_auprc=macro, micro_auprc=micro, max_micro_f1=f1,
                          n_samples=f.shape[0], excluded_classes=excluded,
                          binarize_threshold=binarize_threshold)


def macro_auprc(scores, labels) -> float:
    """Mean per-class AUPRC of scores against binary labels, skipping classes without positives."""
    s = _as_2d(scores, "scores")
    y = _as_2d(labels, "labels")
    vals = [auprc(s[:, c], y[:, c]) for c in range(s.shape[1]) if y[:, c].sum() > 0]
    return float(np.mean(vals)) if vals else float("nan")


def accuracy(probs, labels) -> float:
    p = _as_2d(probs, "probs")
    y = _as_2d(labels, "labels")
    return float(np.mean(p.argmax(axis=1) == y.argmax(axis=1)))


def median_report(per_sample, tau, label="interpreter") -> FaithfulnessReport:
    ffs = [ff for _, ff, _ in per_sample]
    med = float(np.median(ffs)) if ffs else float("nan")
    return FaithfulnessReport(list(per_sample), med, tau, label=label)


# -- pipeline-level suites -------------------------------------------------------

def interpreter_fidelity(samples, classifier, interpreter) -> FidelityReport:
    from .interpreter import batch_predict
    f_probs, i_probs = batch_predict(samples, classifier, interpreter)
    if interpreter.mode == "MultiClass":
        c = f_probs.shape[1]
        rep = FidelityReport(top_k=topk_fidelity(f_probs, i_probs, [k for k in (1, 3, 5) if k <= c]),
                             n_samples=len(samples))
        return rep
    return multilabel_fidelity(f_probs, i_probs)


def faithfulness_suite(samples, classifier, interpreter, tau: float = 0.1) -> FaithfulnessReport:
    from .interpreter import InterpretConfig, faithfulness_removal
    cfg = InterpretConfig(tau=tau)
    rows = []
    for s in samples:
        ff, _, selected = faithfulness_removal(s.signal, interpreter, classifier, cfg,
                                               return_selection=True)
        rows.append((s.id, ff, len(selected)))
    return median_report(rows, tau)


def random_baseline_faithfulness(samples, classifier, interpreter, tau: float = 0.1, seed: int = 0,
                                 reference: FaithfulnessReport | None = None) -> FaithfulnessReport:
    """Remove ``m = round(mean |L|)`` random components per sample (half-to-even rounding)."""
    from .interpreter import InterpretConfig, faithfulness_removal
    from .numerics import SeededRng, key_from_string
    if reference is None:
        reference = faithfulness_suite(samples, classifier, interpreter, tau)
    sizes = [n for _, _, n in reference.per_sample]
    m = int(np.round(np.mean(sizes))) if sizes else 0
    m = min(m, interpreter.k)
    cfg = InterpretConfig(tau=tau)
    rows = []
    for s in samples:
        rng = SeededRng(seed, key_from_string(s.id))
        comps = sorted(int(k) for k in rng.choice(interpreter.k, size=m, replace=False))
        ff, _ = faithfulness_removal(s.signal, interpreter, classifier, cfg, components=comps)
        rows.append((s.id, ff, m))
    return median_report(rows, tau, label="random-baseline")


def export_relevances(samples, classifier, interpreter, path) -> None:
    """CSV with ``id, predicted_class, degenerate, r_1..r_K``; one row per sample."""
    from .interpreter import explain
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "predicted_class", "degenerate"]
                       + [f"r_{k + 1}" for k in range(interpreter.k)])
            for s in samples:
                rel = explain(s.signal, interpreter, classifier).relevance
                w.writerow([s.id, rel.predicted_class, int(rel.degenerate)]
                           + [repr(float(v)) for v in rel.r])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def format_report(report) -> str:
    """Aligned two-column text rendering of a report."""
    d = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    d = {k: v for k, v in d.items() if k != "per_sample"}
    flat = {}
    for k, v in d.items():
        if isinstance(v, dict):
            for k2, v2 in v.items():
                if not isinstance(v2, (list, dict)):
                    flat[f"{k}.{k2}"] = v2
        else:
            flat[k] = v
    width = max(len(k) for k in flat) if flat else 0
    lines = []
    for k, v in flat.items():
        val = f"{v:.4f}" if isinstance(v, float) else str(v)
        lines.append(f"{k.ljust(width)}  {val}")
    return "\n".join(lines)


def write_json(report, path) -> None:
    d = report.to_dict() if hasattr(report, "to_dict") else report
    try:
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
