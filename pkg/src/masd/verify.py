"""Randomized self-checks: gradient identity, chord/cosine identity, metric oracles.

Each suite returns the worst discrepancy it saw, so callers can compare
against their own tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from masd import losses
from masd.geometry import DegenerateEmbeddingError, init_centers, chord_residual, normalize
from masd.metrics import auc, harmonic_mean, pauc
from masd.net import NetSpec, init_weights
from masd.train import decomposition_discrepancy


@dataclass
class SuiteResult:
    name: str
    worst: float
    trials: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.worst <= self.tolerance

    def line(self) -> str:
        flag = "ok" if self.ok else "FAIL"
        return f"{self.name}: max discrepancy {self.worst:.3e} over {self.trials} trials (tol {self.tolerance:g}) {flag}"


def random_labels(rng, batch: int, n_classes: int, mixed: bool) -> np.ndarray:
    """One-hot rows, or per-row convex mixes of two distinct classes."""
    ids = rng.integers(0, n_classes, batch)
    lab = losses.one_hot(ids, n_classes)
    if mixed and n_classes > 1:
        other = (ids + rng.integers(1, n_classes, batch)) % n_classes
        lam = rng.uniform(0.0, 1.0, (batch, 1))
        lab = lam * lab + (1.0 - lam) * losses.one_hot(other, n_classes)
    return lab


def decomposition_instance(rng, *, single_center: bool = False, mixed: bool = False) -> float:
    """One random tiny network/batch; returns the relative parameter-gradient discrepancy.

    Draws whose rectifiers all die (a zero embedding) are redrawn.
    """
    while True:
        try:
            return _decomposition_draw(rng, single_center, mixed)
        except DegenerateEmbeddingError:
            continue


def _decomposition_draw(rng, single_center: bool, mixed: bool) -> float:
    n = int(rng.integers(2, 6))
    m = 1 if single_center else int(rng.integers(1, 5))
    d = int(rng.integers(2, 9))
    b = int(rng.integers(2, 9))
    spec = NetSpec(
        spec_dim=int(rng.integers(2, 7)),
        spectrum_dim=int(rng.integers(2, 7)),
        spec_widths=(int(rng.integers(2, 7)),),
        spectrum_widths=(int(rng.integers(2, 7)),),
        dim=d,
        segments=1,
    )
    seed = int(rng.integers(2**31))
    net = init_weights(spec, seed)
    bank = init_centers(n, m, d, seed + 1)
    xs = rng.standard_normal((b, spec.spec_dim))
    xm = rng.standard_normal((b, spec.spectrum_dim))
    state = losses.ScaleState(s=float(rng.uniform(1.0, 12.0)))
    lab = random_labels(rng, b, n, mixed)
    return decomposition_discrepancy(net, bank, state, (xs, xm, lab), single_center=single_center)


def decomposition_suite(trials: int = 100, seed: int = 0, *, single_center: bool = False) -> SuiteResult:
    """Half the trials use one-hot labels, half use mixup labels."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(trials):
        worst = max(worst, decomposition_instance(rng, single_center=single_center, mixed=bool(i % 2)))
    return SuiteResult("single-center" if single_center else "decomposition", worst, trials, 1e-6)


def chord_suite(trials: int = 1000, seed: int = 0, dims=(2, 64, 256)) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        u = normalize(rng.standard_normal((trials, d)))
        v = normalize(rng.standard_normal((trials, d)))
        worst = max(worst, max(chord_residual(a, c) for a, c in zip(u, v)))
    return SuiteResult("chord", worst, trials * len(dims), 1e-12)


def brute_auc(normals, anomalies) -> float:
    """Pairwise comparison count with ties worth one half."""
    n = np.asarray(normals, dtype=np.float64)
    a = np.asarray(anomalies, dtype=np.float64)
    wins = (a[:, None] > n[None, :]).sum() + 0.5 * (a[:, None] == n[None, :]).sum()
    return float(wins / (n.size * a.size))


def brute_pauc(normals, anomalies, p: float) -> float:
    """Sweep every threshold, build the ROC staircase, integrate it over [0, p] by trapezoids."""
    n = np.asarray(normals, dtype=np.float64)
    a = np.asarray(anomalies, dtype=np.float64)
    pts = [(0.0, 0.0)]
    for t in sorted(set(n) | set(a), reverse=True):
        pts.append((float(np.mean(n >= t)), float(np.mean(a >= t))))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area / p


def random_score_set(rng, max_points: int = 200):
    """Scores with a random signal, sometimes rounded to force ties."""
    total = int(rng.integers(2, max_points + 1))
    k = int(rng.integers(1, total))
    normals = rng.standard_normal(total - k)
    anomalies = rng.standard_normal(k) + rng.uniform(-1.0, 2.0)
    if rng.random() < 0.5:
        normals, anomalies = np.round(normals, 1), np.round(anomalies, 1)
    return normals, anomalies


def metric_suite(trials: int = 50, seed: int = 0, p: float = 0.1) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        normals, anomalies = random_score_set(rng)
        worst = max(worst, abs(auc(normals, anomalies) - brute_auc(normals, anomalies)))
        worst = max(worst, abs(pauc(normals, anomalies, p) - brute_pauc(normals, anomalies, p)))
    worst = max(worst, abs(harmonic_mean([0.5, 1.0]) - 2.0 / 3.0))
    return SuiteResult("metrics", worst, trials, 1e-9)


def run_all(trials: int = 100, seed: int = 0) -> list:
    return [
        decomposition_suite(trials, seed),
        decomposition_suite(trials, seed + 1, single_center=True),
        chord_suite(max(trials, 1) * 10, seed),
        metric_suite(max(trials // 2, 1), seed),
    ]
