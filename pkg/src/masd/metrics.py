"""Threshold-independent detection metrics and per-section reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

DOMAIN_SLICES = ("source", "target", "both")


def _check(normals, anomalies):
    n = np.asarray(normals, dtype=np.float64).ravel()
    a = np.asarray(anomalies, dtype=np.float64).ravel()
    if n.size == 0 or a.size == 0:
        raise ValueError("need at least one normal and one anomalous score")
    return n, a


def auc(normals, anomalies) -> float:
    """P(anomalous score > normal score), ties counting one half."""
    n, a = _check(normals, anomalies)
    n_sorted = np.sort(n)
    below = np.searchsorted(n_sorted, a, side="left")
    ties = np.searchsorted(n_sorted, a, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (n.size * a.size))


def roc_points(normals, anomalies):
    """ROC vertices (fpr, tpr) from (0, 0) to (1, 1), one per distinct score."""
    n, a = _check(normals, anomalies)
    scores = np.concatenate([n, a])
    is_anom = np.concatenate([np.zeros(n.size), np.ones(a.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_anom = scores[order], is_anom[order]
    last_of_group = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(is_anom)[last_of_group]
    fp = np.cumsum(1.0 - is_anom)[last_of_group]
    return np.r_[0.0, fp / n.size], np.r_[0.0, tp / a.size]


def pauc(normals, anomalies, p: float = 0.1) -> float:
    """ROC area over FPR in [0, p], interpolated at p, divided by p."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    fpr, tpr = roc_points(normals, anomalies)
    keep = fpr <= p
    x, y = fpr[keep], tpr[keep]
    if x[-1] < p:
        nxt = np.argmax(fpr > p)
        x0, x1, y0, y1 = fpr[nxt - 1], fpr[nxt], tpr[nxt - 1], tpr[nxt]
        # vertical runs at x0 are already in (x, y); interpolate from the last point there
        y_p = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
        x, y = np.r_[x, p], np.r_[y, y_p]
    area = np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0)
    return float(area / p)


def harmonic_mean(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("harmonic mean of no values")
    if np.any(v <= 0):
        raise ValueError("harmonic mean needs strictly positive values")
    return float(v.size / np.sum(1.0 / v))


def _hmean_or_zero(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    if min(vals) == 0.0:
        return 0.0
    return harmonic_mean(vals)


@dataclass
class ScoredEntry:
    score: float
    is_anomalous: bool
    section: str
    domain: str


@dataclass
class MetricsReport:
    p: float
    sections: dict = field(default_factory=dict)
    hmean: dict = field(default_factory=dict)
    overall: float | None = None

    def to_dict(self) -> dict:
        return {"p": self.p, "sections": self.sections, "hmean": self.hmean, "overall": self.overall}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def write_csv(self, path) -> None:
        cols = [f"{d}_{m}" for d in DOMAIN_SLICES for m in ("auc", "pauc")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["section", *cols])
            rows = [(s, self.sections[s]) for s in sorted(self.sections)] + [("hmean", self.hmean)]
            for name, cells in rows:
                out = []
                for d in DOMAIN_SLICES:
                    for m in ("auc", "pauc"):
                        v = (cells.get(d) or {}).get(m)
                        out.append("" if v is None else repr(v))
                w.writerow([name, *out])


def _slice_metrics(entries, p):
    normals = [e.score for e in entries if not e.is_anomalous]
    anomalies = [e.score for e in entries if e.is_anomalous]
    if not normals or not anomalies:
        return None
    return {"auc": auc(normals, anomalies), "pauc": pauc(normals, anomalies, p)}


def evaluate(entries, p: float = 0.1) -> MetricsReport:
    """Per-section AUC/pAUC for source, target and both domains pooled.

    "both" pools a section's scores from both domains, i.e. one decision
    threshold per section. Slices lacking a class are reported as ``None``.
    Harmonic means run over sections; ``overall`` is the harmonic mean of
    every per-section source AUC, target AUC and pooled pAUC.
    """
    report = MetricsReport(p=p)
    by_section: dict = {}
    for e in entries:
        by_section.setdefault(e.section, []).append(e)
    for section in sorted(by_section):
        rows = by_section[section]
        report.sections[section] = {
            "source": _slice_metrics([e for e in rows if e.domain == "source"], p),
            "target": _slice_metrics([e for e in rows if e.domain == "target"], p),
            "both": _slice_metrics(rows, p),
        }
    for d in DOMAIN_SLICES:
        cells = [report.sections[s][d] for s in report.sections]
        report.hmean[d] = {
            m: _hmean_or_zero([c[m] if c else None for c in cells]) for m in ("auc", "pauc")
        }
    official = []
    for s in report.sections.values():
        official += [(s["source"] or {}).get("auc"), (s["target"] or {}).get("auc"), (s["both"] or {}).get("pauc")]
    report.overall = _hmean_or_zero(official)
    return report


def nearest_normal_distances(anomalous_embs, normal_embs):
    """Euclidean distance from each anomalous embedding to its closest normal one.

    Returns (distances, mean, std).
    """
    a = np.atleast_2d(np.asarray(anomalous_embs, dtype=np.float64))
    n = np.atleast_2d(np.asarray(normal_embs, dtype=np.float64))
    if a.size == 0 or n.size == 0:
        raise ValueError("need non-empty anomalous and normal sets")
    d2 = np.sum((a[:, None, :] - n[None, :, :]) ** 2, axis=2)
    dist = np.sqrt(d2.min(axis=1))
    return dist, float(dist.mean()), float(dist.std())
