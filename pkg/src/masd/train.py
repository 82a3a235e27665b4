"""Mini-batch SGD training with mixup, compactness monitoring and the gradient-identity check."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from masd import losses
from masd.data import FeatureSet, class_index
from masd.geometry import CenterBank, init_centers
from masd.net import EmbeddingNet, NetSpec, backward, embed, forward, init_weights

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "sc-adacos"
    epochs: int = 10
    batch_size: int = 64
    n_sub: int = 16
    learning_rate: float = 1.0
    seed: int = 0
    mixup: bool = True
    classes: str = "type-section-attr"
    dim: int = 256
    margin: float = 0.5
    scale: float = 10.0
    alpha: float = 1.0
    weight_decay: float = 0.0
    spec_widths: tuple = (128, 128)
    spectrum_widths: tuple = (128, 128)
    segments: int = 8

    def __post_init__(self):
        if self.loss not in losses.LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or (self.mixup and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 with mixup (>= 1 otherwise)")
        object.__setattr__(self, "spec_widths", tuple(int(w) for w in self.spec_widths))
        object.__setattr__(self, "spectrum_widths", tuple(int(w) for w in self.spectrum_widths))

    @property
    def centers_per_class(self) -> int:
        return self.n_sub if self.loss == "sc-adacos" else 1

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return parse_config(cls, text, **overrides)


def parse_config(cls, text: str, **overrides):
    """Build dataclass ``cls`` from flat ``key=value`` lines; ``#`` starts a comment.

    Overrides whose value is ``None`` are ignored.
    """
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in types:
            raise ValueError(f"bad config line: {raw!r}")
        kwargs[key] = _coerce(types[key], value)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**kwargs)


def _coerce(type_name, value: str):
    t = str(type_name)
    if t in ("int", "<class 'int'>"):
        return int(value)
    if t in ("float", "<class 'float'>"):
        return float(value)
    if t in ("bool", "<class 'bool'>"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if t in ("tuple", "<class 'tuple'>"):
        return tuple(int(x) for x in value.split(",") if x.strip())
    return value


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    intra: float
    inter: float | None


@dataclass
class LossTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) if getattr(r, name) is not None else np.nan for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "intra", "inter"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), repr(r.intra), "" if r.inter is None else repr(r.inter)])


@dataclass
class TrainResult:
    net: EmbeddingNet
    bank: CenterBank
    trace: LossTrace
    state: losses.ScaleState
    class_keys: list


def net_spec_for(data: FeatureSet, cfg: TrainConfig) -> NetSpec:
    return NetSpec(
        spec_dim=data.spec_in.shape[1],
        spectrum_dim=data.spectrum_in.shape[1],
        spec_widths=cfg.spec_widths,
        spectrum_widths=cfg.spectrum_widths,
        dim=cfg.dim,
        segments=cfg.segments,
    )


def monitor_losses(net: EmbeddingNet, bank: CenterBank, data: FeatureSet, class_ids, embeddings=None):
    """Mean intra-class and inter-class compactness over classes.

    Intra: squared distance of each sample to the nearest sub-cluster of its
    own class. Inter: mean squared distance to every center of every other
    class (``None`` with a single class).
    """
    e = embed(net, data.spec_in, data.spectrum_in) if embeddings is None else embeddings
    ids = np.asarray(class_ids)
    sq = 2.0 - 2.0 * np.clip(e @ bank.flat.T, -1.0, 1.0)
    sq = sq.reshape(e.shape[0], bank.n_classes, bank.n_sub)
    intra, inter = [], []
    for j in range(bank.n_classes):
        rows = ids == j
        if not np.any(rows):
            log.warning("class %d has no samples; skipped in monitoring", j)
            continue
        intra.append(sq[rows, j, :].min(axis=1).mean())
        if bank.n_classes > 1:
            others = np.delete(sq[rows], j, axis=1)
            inter.append(others.mean())
    return float(np.mean(intra)), (float(np.mean(inter)) if inter else None)


def _batches(n: int, batch_size: int, rng, drop_below: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if idx.shape[0] >= drop_below:
            yield idx


def mix_batch(xs, xm, lab, rng):
    """Pair each sample with its cyclic neighbour in a random order (a derangement).

    One mixing coefficient per sample, drawn uniformly from [0, 1].
    """
    b = xs.shape[0]
    order = rng.permutation(b)
    partner = np.empty(b, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    lam = rng.uniform(0.0, 1.0, size=(b, 1))
    xs_mix = lam * xs + (1.0 - lam) * xs[partner]
    xm_mix = lam * xm + (1.0 - lam) * xm[partner]
    lab_mix = lam * lab + (1.0 - lam) * lab[partner]
    return xs_mix, xm_mix, lab_mix


def _full_loss(cfg, net, bank, data, labels, state) -> float:
    z_rows = []
    for i in range(0, len(data), 256):
        _, cache = forward(net, data.spec_in[i : i + 256], data.spectrum_in[i : i + 256])
        z_rows.append(cache["z"])
    z = np.concatenate(z_rows)
    return losses.evaluate_loss(
        cfg.loss, z, labels, bank, state, margin=cfg.margin, s_fixed=cfg.scale, alpha=cfg.alpha
    ).value


def train(data: FeatureSet, cfg: TrainConfig, class_ids=None, n_classes=None) -> TrainResult:
    """Train an embedding network on normal training clips.

    Class ids default to the ``cfg.classes`` granularity of ``data.records``.
    The returned trace has ``epochs + 1`` rows; row 0 is the untrained model.
    """
    if len(data) == 0:
        raise ValueError("no training data")
    if class_ids is None:
        class_ids, keys = class_index(data.records, cfg.classes)
    else:
        keys = [str(k) for k in range(int(n_classes or (np.max(class_ids) + 1)))]
    class_ids = np.asarray(class_ids)
    n_classes = int(n_classes or len(keys))
    if class_ids.min() < 0 or class_ids.max() >= n_classes:
        raise ValueError("class ids inconsistent with the number of classes")
    labels = losses.one_hot(class_ids, n_classes)

    rng = np.random.default_rng([cfg.seed, 17])
    net = init_weights(net_spec_for(data, cfg), cfg.seed)
    bank = init_centers(n_classes, cfg.centers_per_class, cfg.dim, cfg.seed + 1)
    state = losses.initial_state(n_classes, cfg.centers_per_class)

    trace = LossTrace()
    intra, inter = monitor_losses(net, bank, data, class_ids)
    trace.records.append(EpochRecord(0, _full_loss(cfg, net, bank, data, labels, state), intra, inter))
    min_batch = 2 if cfg.mixup else 1
    for epoch in range(1, cfg.epochs + 1):
        batch_losses = []
        for idx in _batches(len(data), cfg.batch_size, rng, min_batch):
            xs, xm, lab = data.spec_in[idx], data.spectrum_in[idx], labels[idx]
            if cfg.mixup:
                xs, xm, lab = mix_batch(xs, xm, lab, rng)
            _, cache = forward(net, xs, xm)
            state = losses.update_scale(cfg.loss, state, cache["z"], lab, bank)
            out = losses.evaluate_loss(
                cfg.loss, cache["z"], lab, bank, state, margin=cfg.margin, s_fixed=cfg.scale, alpha=cfg.alpha
            )
            if not math.isfinite(out.value) or not math.isfinite(state.s):
                raise TrainingError(f"non-finite loss at epoch {epoch} (loss={out.value}, scale={state.s})")
            grads = backward(net, cache, out.unit_grads)
            if cfg.weight_decay:
                for name in grads:
                    grads[name] = grads[name] + cfg.weight_decay * net.weights[name]
            net.apply_update(grads, cfg.learning_rate)
            batch_losses.append(out.value)
        intra, inter = monitor_losses(net, bank, data, class_ids)
        trace.records.append(EpochRecord(epoch, float(np.mean(batch_losses)) if batch_losses else math.nan, intra, inter))
        log.info("epoch %d loss %.4f intra %.4f inter %s scale %.3f", epoch, trace.records[-1].loss, intra, inter, state.s)
    return TrainResult(net, bank, trace, state, list(keys))


def relative_discrepancy(a: dict, b: dict) -> float:
    """Max over tensors of |a - b| / max(|a|, |b|) (Frobenius norms); 0 when both vanish."""
    worst = 0.0
    for name in a:
        na, nb = np.linalg.norm(a[name]), np.linalg.norm(b[name])
        scale = max(na, nb)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(a[name] - b[name]) / scale))
    return worst


def decomposition_discrepancy(net: EmbeddingNet, bank: CenterBank, state: losses.ScaleState, batch, *, single_center: bool = False) -> float:
    """Parameter-gradient discrepancy between the direct sub-cluster AdaCos
    gradient and its weighted-compactness decomposition.

    ``batch`` is (spec_in, spectrum_in, labels). With ``single_center=True`` the
    decomposition uses the single-center pairwise-difference form (M = 1).
    """
    xs, xm, lab = batch
    _, cache = forward(net, xs, xm)
    z = cache["z"]
    direct = losses.subcluster_adacos_loss(z, lab, bank, state)
    g_direct = backward(net, cache, direct.emb_grads, pre_normalized=True)
    if single_center:
        dz = losses.single_center_grad(z, lab, bank, state.s)
    else:
        dz = losses.decomposed_grad(z, lab, bank, state).emb_grads
    g_decomp = backward(net, cache, dz, pre_normalized=True)
    return relative_discrepancy(g_direct, g_decomp)
