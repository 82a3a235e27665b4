"""Angular margin and compactness losses with analytic embedding gradients.

Every loss takes a batch of *pre-normalization* embeddings ``z`` of shape
(B, D), projects them onto the unit sphere, and returns a :class:`LossOutput`
with two gradients: ``unit_grads`` (dL/de for the normalized embedding e,
treating e as a free vector) and ``emb_grads`` (dL/dz, i.e. ``unit_grads``
pulled back through the normalization Jacobian (I - e e^T) / |z|).

Labels are (B, N) matrices of non-negative class weights summing to one per
row; one-hot rows are plain labels, two nonzero entries come from mixup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from masd.geometry import CenterBank, normalize

LOSS_NAMES = ("compactness", "arcface", "adacos", "sc-adacos", "compactness-cce")


@dataclass
class LossOutput:
    value: float
    unit_grads: np.ndarray
    emb_grads: np.ndarray


@dataclass(frozen=True)
class ScaleState:
    """Adaptive softmax scale and the batch statistics behind its last update."""

    s: float
    step: int = 0
    last_theta_med: float = math.nan
    last_B_avg: float = math.nan
    last_f_max: float = math.nan


def initial_scale(n_classes: int, n_sub: int = 1) -> float:
    """sqrt(2) * log(N*M - 1); falls back to 1.0 when N*M <= 2 (log would be <= 0)."""
    k = n_classes * n_sub - 1
    if k <= 1:
        return 1.0
    return math.sqrt(2.0) * math.log(k)


def initial_state(n_classes: int, n_sub: int = 1) -> ScaleState:
    return ScaleState(s=initial_scale(n_classes, n_sub))


def one_hot(ids, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((ids.shape[0], n_classes))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.float64)
    if lab.shape != (batch, n_classes):
        raise ValueError(f"labels shape {lab.shape} != ({batch}, {n_classes})")
    if np.any(lab < 0) or np.any(np.abs(lab.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("label rows must be non-negative and sum to 1")
    return lab


def _unit(z):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return normalize(z), norms


def through_normalization(e, norms, unit_grads) -> np.ndarray:
    """Pull dL/de back to dL/dz for e = z / |z|."""
    radial = np.sum(unit_grads * e, axis=1, keepdims=True)
    return (unit_grads - radial * e) / norms


def _output(value, e, norms, unit_grads) -> LossOutput:
    value = float(value)
    if not np.isfinite(value) or not np.all(np.isfinite(unit_grads)):
        raise FloatingPointError("non-finite loss or gradient")
    return LossOutput(value, unit_grads, through_normalization(e, norms, unit_grads))


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


# --- compactness ----------------------------------------------------------


def compactness_loss(z, center) -> LossOutput:
    """Mean squared distance of the normalized embeddings to a single center."""
    e, norms = _unit(z)
    if e.shape[0] == 0:
        raise ValueError("compactness loss of an empty batch")
    diff = e - np.asarray(center, dtype=np.float64)
    value = np.mean(np.sum(diff * diff, axis=1))
    return _output(value, e, norms, 2.0 * diff / e.shape[0])


def class_compactness_loss(z, labels, bank: CenterBank) -> LossOutput:
    """Mean over present classes of each class's label-weighted compactness.

    Uses the first sub-cluster of each class as its center; the loss has a
    single optimum per class, so extra sub-clusters would add nothing.
    """
    e, norms = _unit(z)
    lab = check_labels(labels, e.shape[0], bank.n_classes)
    centers = bank.centers[:, 0, :]
    sq = np.sum(e * e, axis=1)[:, None] - 2.0 * e @ centers.T + np.sum(centers * centers, axis=1)[None, :]
    weight = lab.sum(axis=0)
    active = weight > 0
    k = int(active.sum())
    per_class = (lab[:, active] * sq[:, active]).sum(axis=0) / weight[active]
    value = per_class.mean()
    # d/de of sum_j w_xj |e - c_j|^2 with w_xj = l_j(x) / (k * W_j)
    w = np.zeros_like(lab)
    w[:, active] = lab[:, active] / (k * weight[active])
    unit_grads = 2.0 * (w.sum(axis=1, keepdims=True) * e - w @ centers)
    return _output(value, e, norms, unit_grads)


# --- ArcFace / AdaCos -----------------------------------------------------


def arcface_loss(z, labels, bank: CenterBank, s: float, m: float) -> LossOutput:
    """Cosine softmax CCE with additive angular margin ``m * l_j(x)`` on class j."""
    if bank.n_sub != 1:
        raise ValueError("ArcFace needs exactly one center per class (M = 1)")
    if s <= 0:
        raise ValueError("scale must be positive")
    if not 0.0 <= m <= math.pi / 2:
        raise ValueError(f"margin {m} outside [0, pi/2]")
    e, norms = _unit(z)
    b = e.shape[0]
    lab = check_labels(labels, b, bank.n_classes)
    centers = bank.centers[:, 0, :]
    cos = np.clip(e @ centers.T, -1.0, 1.0)
    margin = m * lab
    if m == 0.0:
        logits = s * cos
        dlogit_dcos = np.full_like(cos, s)
    else:
        theta = np.arccos(cos)
        shifted = theta + margin
        clamped = shifted >= math.pi
        logits = s * np.cos(np.minimum(shifted, math.pi))
        # d cos(theta + mu) / d cos(theta) = sin(theta + mu) / sin(theta)
        sin_t = np.maximum(np.sin(theta), 1e-12)
        dlogit_dcos = np.where(margin > 0, s * np.sin(shifted) / sin_t, s)
        dlogit_dcos = np.where(clamped, 0.0, dlogit_dcos)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    logp = logits - _logsumexp(logits, axis=1)
    value = -np.sum(lab * logp) / b
    p = np.exp(logp)
    dcos = (p - lab) / b * dlogit_dcos
    return _output(value, e, norms, dcos @ centers)


def adacos_loss(z, labels, bank: CenterBank, state: ScaleState) -> LossOutput:
    return arcface_loss(z, labels, bank, state.s, 0.0)


def _lower_median(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(v[(v.shape[0] - 1) // 2])


def target_angles(cos, labels) -> np.ndarray:
    """Per-sample angle to the target class, mixed by label weight.

    ``cos`` is (B, N, M); the angle to class j is the angle to its closest
    sub-cluster. For a mixed-up sample the angle is sum_j l_j(x) * theta_j.
    """
    cos = np.asarray(cos, dtype=np.float64)
    if cos.ndim == 2:
        cos = cos[:, :, None]
    theta = np.arccos(np.clip(cos.max(axis=2), -1.0, 1.0))
    return np.sum(np.asarray(labels) * theta, axis=1)


def _scale_denominator(theta_med: float) -> float:
    return math.cos(min(math.pi / 4, theta_med))


def adacos_scale_update(state: ScaleState, cos, labels) -> ScaleState:
    """One step of the AdaCos scale recursion from a batch of (B, N) cosines.

    B_avg sums exp(s_prev * cos) over non-target classes, each weighted by
    1 - l_j(x) (exactly the non-target sum for one-hot labels).
    """
    cos = np.asarray(cos, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    if cos.shape[0] == 0:
        raise ValueError("empty batch")
    b_avg = float(np.mean(np.sum((1.0 - lab) * np.exp(state.s * cos), axis=1)))
    theta_med = _lower_median(target_angles(cos, lab))
    if b_avg > 0:
        s_new = math.log(b_avg) / _scale_denominator(theta_med)
    else:
        s_new = state.s  # single class: no non-target logits to average
    return ScaleState(s=s_new, step=state.step + 1, last_theta_med=theta_med, last_B_avg=b_avg)


# --- sub-cluster AdaCos ---------------------------------------------------


def _subcluster_cos(e, bank: CenterBank) -> np.ndarray:
    return np.clip(e @ bank.flat.T, -1.0, 1.0).reshape(e.shape[0], bank.n_classes, bank.n_sub)


def subcluster_probs(cos, s: float):
    """Full softmax P(tau = c) over all N*M centers and within-class q(c | class).

    Both arrays have shape (B, N, M); the class probability is P.sum(axis=2).
    """
    logits = s * np.asarray(cos, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    lse_all = _logsumexp(logits, axis=(1, 2))
    lse_class = _logsumexp(logits, axis=2)
    return np.exp(logits - lse_all), np.exp(logits - lse_class), lse_class - lse_all


def subcluster_adacos_loss(z, labels, bank: CenterBank, state: ScaleState) -> LossOutput:
    """Sub-cluster AdaCos: softmax summed over each class's M sub-clusters.

    The scale ``state.s`` is a constant here; it is never differentiated.
    """
    if not state.s > 0:
        raise ValueError("scale must be positive")
    e, norms = _unit(z)
    b = e.shape[0]
    lab = check_labels(labels, b, bank.n_classes)
    cos = _subcluster_cos(e, bank)
    p, q, log_class = subcluster_probs(cos, state.s)
    value = -np.sum(lab * log_class[:, :, 0]) / b
    # dL/dcos_c = s * (P_c - l_j q_c) / B for sub-cluster c of class j
    dcos = state.s * (p - lab[:, :, None] * q) / b
    return _output(value, e, norms, dcos.reshape(b, -1) @ bank.flat)


def subcluster_scale_update(state: ScaleState, cos, labels) -> ScaleState:
    """One step of the sub-cluster AdaCos scale recursion from (B, N, M) cosines.

    B_avg here sums over all classes and sub-clusters, target included, with
    f_max subtracted inside the exponentials.
    """
    cos = np.asarray(cos, dtype=np.float64)
    if cos.ndim == 2:
        cos = cos[:, :, None]
    if cos.shape[0] == 0:
        raise ValueError("empty batch")
    logits = state.s * cos
    f_max = float(np.max(logits))
    b_avg = float(np.mean(np.sum(np.exp(logits - f_max), axis=(1, 2))))
    theta_med = _lower_median(target_angles(cos, labels))
    s_new = (f_max + math.log(b_avg)) / _scale_denominator(theta_med)
    return ScaleState(
        s=s_new, step=state.step + 1, last_theta_med=theta_med, last_B_avg=b_avg, last_f_max=f_max
    )


def batch_cosines(z, bank: CenterBank) -> np.ndarray:
    """(B, N, M) cosines between normalized embeddings and every center."""
    e, _ = _unit(z)
    return _subcluster_cos(e, bank)


# --- intra/inter decomposition -------------------------------------------


@dataclass
class DecomposedGrad:
    """Per-sample dL/de split into intra-class and inter-class compactness parts."""

    intra: np.ndarray
    inter: np.ndarray
    e: np.ndarray
    norms: np.ndarray

    @property
    def unit_grads(self) -> np.ndarray:
        return self.intra + self.inter

    @property
    def emb_grads(self) -> np.ndarray:
        return through_normalization(self.e, self.norms, self.unit_grads)


def decomposed_grad(z, labels, bank: CenterBank, state: ScaleState) -> DecomposedGrad:
    """Sub-cluster AdaCos gradient rebuilt from weighted compactness gradients.

    For a sample of class i the gradient is
        s/2 * sum_k P(c_k) * sum_{c_i in C_i} q(c_i | C_i) * d|e - c_i|^2
      - s/2 * sum_k P(c_k) * d|e - c_k|^2,
    i.e. gradient descent shrinks intra-class distances with weights P * q and
    grows distances to every center with weights P. Mixed-up samples get one
    such term per class, weighted by l_j(x). Uses d|e - c|^2 / de = 2 (e - c).
    """
    e, norms = _unit(z)
    b = e.shape[0]
    lab = check_labels(labels, b, bank.n_classes)
    cos = _subcluster_cos(e, bank)
    p, q, _ = subcluster_probs(cos, state.s)
    half_s = state.s / 2.0
    centers = bank.centers  # (N, M, D)
    # d|e - c|^2 for all centers: (B, N, M, D) is avoided by expanding 2(e - c)
    p_total = p.sum(axis=(1, 2))  # sum_k P(c_k), 1 up to rounding
    intra = np.zeros_like(e)
    inter = np.zeros_like(e)
    for j in range(bank.n_classes):
        w = lab[:, j]
        rows = w > 0
        if not np.any(rows):
            continue
        qj = q[rows, j, :]  # (b', M)
        grad_ci = 2.0 * (qj.sum(axis=1, keepdims=True) * e[rows] - qj @ centers[j])
        intra[rows] += (w[rows] * half_s * p_total[rows])[:, None] * grad_ci
        pk = p[rows].reshape(int(rows.sum()), -1)
        grad_ck = 2.0 * (pk.sum(axis=1, keepdims=True) * e[rows] - pk @ bank.flat)
        inter[rows] -= (w[rows] * half_s)[:, None] * grad_ck
    return DecomposedGrad(intra / b, inter / b, e, norms)


def single_center_grad(z, labels, bank: CenterBank, s: float) -> np.ndarray:
    """Single-center (M = 1) form: s/2 * sum_k softmax_k * (d|e - c_i|^2 - d|e - c_k|^2).

    Returns dL/dz (pre-normalization), built from explicit per-pair
    difference vectors rather than the factored sums.
    """
    if bank.n_sub != 1:
        raise ValueError("single-center form requires M = 1")
    e, norms = _unit(z)
    b = e.shape[0]
    lab = check_labels(labels, b, bank.n_classes)
    centers = bank.centers[:, 0, :]
    logits = s * np.clip(e @ centers.T, -1.0, 1.0)
    soft = np.exp(logits - _logsumexp(logits, axis=1))
    d_all = 2.0 * (e[:, None, :] - centers[None, :, :])  # (B, N, D)
    unit = np.zeros_like(e)
    for i in range(bank.n_classes):
        # d|e - c_i|^2 - d|e - c_k|^2 for every k
        diff = d_all[:, i : i + 1, :] - d_all
        unit += lab[:, i : i + 1] * (s / 2.0) * np.einsum("bk,bkd->bd", soft, diff)
    return through_normalization(e, norms, unit / b)


# --- mixup and combined loss ----------------------------------------------


def mixup(a, b, la, lb, lam: float):
    """Convex combination lam * (a, la) + (1 - lam) * (b, lb)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("mixing coefficient must lie in [0, 1]")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    la = np.asarray(la, dtype=np.float64)
    lb = np.asarray(lb, dtype=np.float64)
    if a.shape != b.shape or la.shape != lb.shape:
        raise ValueError("mixup operands must have matching shapes")
    return lam * a + (1.0 - lam) * b, lam * la + (1.0 - lam) * lb


def compactness_plus_cce_loss(z, labels, bank: CenterBank, s_fixed: float, alpha: float = 1.0) -> LossOutput:
    """Mean per-class compactness plus alpha times fixed-scale cosine softmax CCE."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    comp = class_compactness_loss(z, labels, bank)
    if alpha == 0:
        return comp
    cce = arcface_loss(z, labels, bank, s_fixed, 0.0)
    return LossOutput(
        comp.value + alpha * cce.value,
        comp.unit_grads + alpha * cce.unit_grads,
        comp.emb_grads + alpha * cce.emb_grads,
    )


def uses_scale(name: str) -> bool:
    return name in ("adacos", "sc-adacos")


def evaluate_loss(name: str, z, labels, bank: CenterBank, state: ScaleState, *, margin=0.5, s_fixed=10.0, alpha=1.0):
    """Dispatch by training-config loss name."""
    if name == "compactness":
        return class_compactness_loss(z, labels, bank)
    if name == "arcface":
        return arcface_loss(z, labels, bank, s_fixed, margin)
    if name == "adacos":
        return adacos_loss(z, labels, bank, state)
    if name == "sc-adacos":
        return subcluster_adacos_loss(z, labels, bank, state)
    if name == "compactness-cce":
        return compactness_plus_cce_loss(z, labels, bank, s_fixed, alpha)
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")


def update_scale(name: str, state: ScaleState, z, labels, bank: CenterBank) -> ScaleState:
    """Advance the adaptive scale for losses that have one; step 0 keeps the initial value."""
    if not uses_scale(name):
        return replace(state, step=state.step + 1)
    if state.step == 0:
        return replace(state, step=1)
    cos = batch_cosines(z, bank)
    if name == "adacos":
        return adacos_scale_update(state, cos[:, :, 0], labels)
    return subcluster_scale_update(state, cos, labels)
