"""End-to-end glue: standardize inputs, train, build references, score, evaluate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from masd.data import FeatureSet, sections
from masd.features import temporal_mean_normalize
from masd.metrics import ScoredEntry, evaluate
from masd.net import EmbeddingNet, embed, load_checkpoint, save_checkpoint, spectrogram_input
from masd.score import ReferenceModel, anomaly_scores, fit_reference
from masd.train import TrainConfig, TrainResult, train


@dataclass
class Standardizer:
    """Frozen per-feature z-scoring fitted on training inputs.

    Lives outside the network: it is fixed preprocessing, not a trainable
    bias, and the network itself stays bias-free.
    """

    spec_mean: np.ndarray
    spec_std: np.ndarray
    spectrum_mean: np.ndarray
    spectrum_std: np.ndarray

    @classmethod
    def fit(cls, fs: FeatureSet, floor: float = 1e-8) -> "Standardizer":
        return cls(
            fs.spec_in.mean(axis=0),
            np.maximum(fs.spec_in.std(axis=0), floor),
            fs.spectrum_in.mean(axis=0),
            np.maximum(fs.spectrum_in.std(axis=0), floor),
        )

    def __call__(self, fs: FeatureSet) -> FeatureSet:
        return FeatureSet(
            fs.records,
            (fs.spec_in - self.spec_mean) / self.spec_std,
            (fs.spectrum_in - self.spectrum_mean) / self.spectrum_std,
        )

    def as_buffers(self) -> dict:
        return {
            "spec_mean": self.spec_mean,
            "spec_std": self.spec_std,
            "spectrum_mean": self.spectrum_mean,
            "spectrum_std": self.spectrum_std,
        }

    @classmethod
    def from_buffers(cls, b: dict) -> "Standardizer":
        return cls(b["spec_mean"], b["spec_std"], b["spectrum_mean"], b["spectrum_std"])


@dataclass
class System:
    net: EmbeddingNet
    standardizer: Standardizer
    result: TrainResult | None = None

    def embed(self, fs: FeatureSet) -> np.ndarray:
        z = self.standardizer(fs)
        return embed(self.net, z.spec_in, z.spectrum_in)


def save_system(path, system: System, extra: dict | None = None) -> None:
    """Checkpoint the network with its standardizer stored as buffers."""
    save_checkpoint(path, system.net, extra, system.standardizer.as_buffers())


def load_system(path):
    """Returns (System, extra header dict)."""
    net, extra, buffers = load_checkpoint(path)
    missing = {"spec_mean", "spec_std", "spectrum_mean", "spectrum_std"} - set(buffers)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks standardizer buffers {sorted(missing)}")
    return System(net, Standardizer.from_buffers(buffers)), extra


def train_system(train_fs: FeatureSet, cfg: TrainConfig) -> System:
    stdz = Standardizer.fit(train_fs)
    result = train(stdz(train_fs), cfg)
    return System(result.net, stdz, result)


def fit_system_reference(system: System, train_fs: FeatureSet, k: int = 16, seed: int = 0) -> ReferenceModel:
    e = system.embed(train_fs)
    parts: dict = {}
    for i, r in enumerate(train_fs.records):
        parts.setdefault(r.section_key, {}).setdefault(r.domain, []).append(e[i])
    return fit_reference({s: {d: np.array(v) for d, v in p.items()} for s, p in parts.items()}, k, seed)


def score_set(system: System, refs: ReferenceModel, test_fs: FeatureSet):
    """Anomaly score for every test clip, as (records, scores)."""
    e = system.embed(test_fs)
    scores = np.empty(len(test_fs))
    keys = np.array([r.section_key for r in test_fs.records])
    for sec in sections(test_fs.records):
        rows = keys == sec
        scores[rows] = anomaly_scores(e[rows], refs, sec)
    return test_fs.records, scores


def scored_entries(records, scores) -> list:
    return [
        ScoredEntry(float(s), r.label == "anomalous", r.section_key, r.domain) for r, s in zip(records, scores)
    ]


def run_experiment(fs: FeatureSet, cfg: TrainConfig, k: int = 16, p: float = 0.1):
    """Train on the train split of ``fs``, score its test split; returns (report, system)."""
    train_fs = fs.where(split="train")
    test_fs = fs.where(split="test")
    system = train_system(train_fs, cfg)
    refs = fit_system_reference(system, train_fs, k, cfg.seed)
    records, scores = score_set(system, refs, test_fs)
    return evaluate(scored_entries(records, scores), p), system


def masked_scorer(system: System, refs: ReferenceModel, section: str, spectrum_in):
    """Score function over masked linear-magnitude spectrograms of one clip.

    Masking happens before the log-compression and temporal mean normalization; the
    spectrum input is held at the unmasked clip's value.
    """
    spectrum_row = np.atleast_2d(np.asarray(spectrum_in, dtype=np.float64))
    segments = system.net.spec.segments

    def score(masked_grid) -> float:
        grid = temporal_mean_normalize(masked_grid)
        fs = FeatureSet([None], spectrogram_input(grid, segments)[None, :], spectrum_row)
        return float(anomaly_scores(system.embed(fs), refs, section)[0])

    return score
