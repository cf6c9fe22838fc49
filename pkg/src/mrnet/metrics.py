"""Confusion-matrix statistics, ROC/AUC and the comparison-table / ROC-figure renderers."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    n: int
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predictions, labels, n: int) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labs = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labs.shape:
        raise ValueError(f"{preds.size} predictions but {labs.size} labels")
    for name, arr in (("prediction", preds), ("label", labs)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} index out of range [0, {n}): {arr.min()}..{arr.max()}")
    counts = np.bincount(labs * n + preds, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, counts)


@dataclass
class ClassificationReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    fscore: list[float]
    support: list[int]
    weighted_precision: float
    weighted_recall: float
    weighted_fscore: float
    # (class, metric) pairs whose value came from a 0/0 division
    zero_division: list[tuple[int, str]] = field(default_factory=list)


def fscore(precision: float, recall: float) -> float:
    denom = precision + recall
    return 2.0 * precision * recall / denom if denom > 0 else 0.0


def report(cm: ConfusionMatrix) -> ClassificationReport:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    predicted = c.sum(axis=0)
    support = c.sum(axis=1)
    total = c.sum()
    prec, rec, f, flags = [], [], [], []
    for k in range(cm.n):
        if predicted[k] > 0:
            p = tp[k] / predicted[k]
        else:
            p = 0.0
            flags.append((k, "precision"))
        if support[k] > 0:
            r = tp[k] / support[k]
        else:
            r = 0.0
            flags.append((k, "recall"))
        prec.append(float(p))
        rec.append(float(r))
        f.append(fscore(p, r))
    if total > 0:
        w = support / total
        wp, wr, wf = (float(np.dot(w, v)) for v in (prec, rec, f))
        acc = float(tp.sum() / total)
    else:
        wp = wr = wf = acc = 0.0
    return ClassificationReport(acc, prec, rec, f, [int(s) for s in support], wp, wr, wf, flags)


@dataclass
class RocCurve:
    label: str
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_points(scores, labels, label: str = "") -> RocCurve:
    """Threshold sweep over each distinct score, highest first; trapezoidal AUC."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label (AUC undefined)")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(label, fpr, tpr, auc)


@dataclass
class MulticlassAuc:
    per_class: list[float | None]
    micro: float
    macro: float | None
    curves: list[RocCurve]
    undefined: list[int] = field(default_factory=list)


def multiclass_auc(probs, labels, class_names: Sequence[str] | None = None) -> MulticlassAuc:
    """One-vs-rest AUC per class, micro (flattened indicators) and macro (mean of defined classes)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = p.shape[1]
    names = list(class_names) if class_names is not None else [f"class {k}" for k in range(n)]
    onehot = np.zeros_like(p, dtype=bool)
    onehot[np.arange(len(y)), y] = True
    per_class: list[float | None] = []
    curves, undefined = [], []
    for k in range(n):
        if onehot[:, k].all() or not onehot[:, k].any():
            per_class.append(None)
            undefined.append(k)
            continue
        curve = roc_points(p[:, k], onehot[:, k], label=names[k])
        per_class.append(curve.auc)
        curves.append(curve)
    if undefined:
        warnings.warn(f"AUC undefined for classes {undefined} (absent or only class present); "
                      "excluded from macro average", RuntimeWarning, stacklevel=2)
    micro_curve = roc_points(p.reshape(-1), onehot.reshape(-1), label="micro-average")
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else None
    curves.append(micro_curve)
    if macro is not None:
        curves.append(_macro_curve([c for c in curves if c.label not in ("micro-average",)], macro))
    return MulticlassAuc(per_class, micro_curve.auc, macro, curves, undefined)


def _macro_curve(class_curves: list[RocCurve], macro_auc: float) -> RocCurve:
    """Mean of the per-class step curves over the union of their FPR points."""
    grid = np.unique(np.concatenate([c.fpr for c in class_curves]))
    tpr = np.zeros_like(grid)
    for c in class_curves:
        # highest TPR reached at or before each FPR value
        tpr += c.tpr[np.searchsorted(c.fpr, grid, side="right") - 1]
    tpr /= len(class_curves)
    return RocCurve("macro-average", np.r_[0.0, grid], np.r_[0.0, tpr], macro_auc)


# -- rendering ----------------------------------------------------------------------------

COMPARISON_COLUMNS = ("name", "Total parameters", "Time per epoch", "Accuracy", "Precision", "Recall", "Fscore")


def round_half_up(x: float, places: int = 2) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass
class ComparisonRow:
    name: str
    params: int
    seconds_per_epoch: float
    report: ClassificationReport


def render_comparison(rows: Sequence[ComparisonRow | tuple]) -> tuple[str, str]:
    """Side-by-side model comparison: (aligned text, unrounded CSV)."""
    if not rows:
        raise ValueError("render_comparison needs at least one row")
    rows = [r if isinstance(r, ComparisonRow) else ComparisonRow(*r) for r in rows]
    cells = [list(COMPARISON_COLUMNS)]
    for r in rows:
        rep = r.report
        cells.append([r.name, str(r.params), f"{round_half_up(r.seconds_per_epoch, 2)}s",
                      round_half_up(rep.accuracy), round_half_up(rep.weighted_precision),
                      round_half_up(rep.weighted_recall), round_half_up(rep.weighted_fscore)])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARISON_COLUMNS))]
    lines = []
    for row in cells:
        parts = [row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for r in rows:
        rep = r.report
        w.writerow([r.name, r.params, repr(float(r.seconds_per_epoch)), repr(rep.accuracy),
                    repr(rep.weighted_precision), repr(rep.weighted_recall), repr(rep.weighted_fscore)])
    return text, buf.getvalue()


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def render_roc_svg(curves: Sequence[RocCurve], title: str = "ROC") -> str:
    """SVG 1.1 document: unit-square axes, chance diagonal, one polyline and legend entry per curve."""
    if not curves:
        raise ValueError("render_roc_svg needs at least one curve")
    size, margin = 400, 50
    legend_h = 18 * len(curves) + 10
    height = size + 2 * margin + legend_h

    def xy(fx, ty):
        return f"{margin + fx * size:.2f},{margin + (1.0 - ty) * size:.2f}"

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size + 2 * margin}" '
        f'height="{height}" viewBox="0 0 {size + 2 * margin} {height}">',
        f'<title>{escape(title)}</title>',
        f'<text x="{margin + size / 2}" y="{margin / 2}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{escape(title)}</text>',
        f'<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="none" stroke="black"/>',
        f'<polyline class="diagonal" points="{xy(0, 0)} {xy(1, 1)}" fill="none" stroke="#999999" '
        f'stroke-dasharray="4,4"/>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text x="{margin + t * size:.2f}" y="{margin + size + 15}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{t:g}</text>')
        out.append(f'<text x="{margin - 6}" y="{margin + (1 - t) * size + 3:.2f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{t:g}</text>')
    out.append(f'<text x="{margin + size / 2}" y="{margin + size + 32}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">False positive rate</text>')
    out.append(f'<text x="15" y="{margin + size / 2}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12" transform="rotate(-90 15 {margin + size / 2})">True positive rate</text>')
    for i, c in enumerate(curves):
        colour = _PALETTE[i % len(_PALETTE)]
        dash = ' stroke-dasharray="6,3"' if c.label.endswith("-average") else ""
        pts = " ".join(xy(f, t) for f, t in zip(c.fpr, c.tpr))
        out.append(f'<polyline class="roc" data-label={quoteattr(c.label)} points="{pts}" fill="none" '
                   f'stroke="{colour}" stroke-width="2"{dash}/>')
    out.append('<g class="legend">')
    for i, c in enumerate(curves):
        y = margin + size + 50 + 18 * i
        colour = _PALETTE[i % len(_PALETTE)]
        out.append(f'<line x1="{margin}" y1="{y - 4}" x2="{margin + 20}" y2="{y - 4}" stroke="{colour}" '
                   f'stroke-width="2"/>')
        out.append(f'<text class="legend-entry" x="{margin + 26}" y="{y}" font-family="sans-serif" '
                   f'font-size="11">{escape(c.label)} (AUC = {round_half_up(c.auc)})</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
