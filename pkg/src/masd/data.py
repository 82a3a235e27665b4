"""Dataset manifests and a synthetic generator of machine-like sounds.

Each (machine type, section, attribute) class has a signature of 3-5
amplitude-modulated sinusoids: the type fixes the partial layout, the
section detunes it, the attribute moves one partial (a machine setting).
Every clip additionally carries broadband noise and random interfering tones drawn from one distribution shared by
all classes, so the noise says nothing about the class. The target domain
detunes the signature slightly and uses a different noise coloring.
Anomalies exist only in test splits.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from masd.features import SAMPLE_RATE, clip_features, read_cache, read_wav, write_cache, write_wav
from masd.net import spectrogram_input

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")
SPLITS = ("train", "test")
LABELS = ("normal", "anomalous")
GRANULARITIES = ("none", "type", "type-section", "type-section-attr")
ANOMALY_KINDS = ("band-shift", "harmonic-drop", "transient")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    path: str
    machine_type: str
    section: str
    domain: str
    split: str
    label: str
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ManifestError(f"{self.clip_id}: unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.clip_id}: unknown split {self.split!r}")
        if self.label not in LABELS:
            raise ManifestError(f"{self.clip_id}: unknown label {self.label!r}")
        if self.split == "train" and self.label != "normal":
            raise ManifestError(f"{self.clip_id}: anomalous clip in a train split")

    @property
    def section_key(self) -> str:
        return f"{self.machine_type}/{self.section}"

    def class_key(self, granularity: str = "type-section-attr") -> str:
        """Auxiliary classification target at the given granularity."""
        if granularity == "none":
            return "all"
        if granularity == "type":
            return self.machine_type
        if granularity == "type-section":
            return self.section_key
        if granularity == "type-section-attr":
            attrs = ",".join(f"{k}={v}" for k, v in sorted(self.attributes.items()))
            return f"{self.section_key}/{attrs}"
        raise ValueError(f"unknown class granularity {granularity!r}")


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def load_manifest(path) -> list:
    """Parse and validate a JSON-lines manifest."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(ClipRecord(**d))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        log.warning("manifest %s is empty", path)
    return records


def class_index(records, granularity: str):
    """Map records to integer auxiliary-class ids; returns (ids, sorted class keys)."""
    keys = sorted({r.class_key(granularity) for r in records})
    lookup = {k: i for i, k in enumerate(keys)}
    return np.array([lookup[r.class_key(granularity)] for r in records], dtype=np.int64), keys


def sections(records) -> list:
    return sorted({r.section_key for r in records})


# --- synthetic generator --------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_machine_types: int = 7
    sections_per_type: int = 6
    attributes_per_section: int = 2
    source_train_count: int = 990
    target_train_count: int = 10
    test_count_per_domain: int = 50
    clip_seconds: float = 10.0
    anomaly_kind: str = "band-shift"
    anomaly_shift: float = 0.06
    noise_snr_db: float = 0.0
    domain_shift: float = 0.015
    interferers: int = 3
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.n_machine_types,
            self.sections_per_type,
            self.attributes_per_section,
            self.source_train_count,
            self.target_train_count,
            self.test_count_per_domain,
        )
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.anomaly_kind!r}")
        if self.clip_seconds * SAMPLE_RATE < 1024:
            raise ValueError("clips must hold at least one STFT frame")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * SAMPLE_RATE))


def synth_manifest(cfg: SynthConfig, audio_dir: str = "audio") -> list:
    """All clip records for ``cfg`` in a fixed order (no audio generated)."""
    records = []
    for t in range(cfg.n_machine_types):
        for s in range(cfg.sections_per_type):
            mtype, sec = f"machine{t:02d}", f"section{s:02d}"
            plan = [
                ("train", "source", "normal", cfg.source_train_count),
                ("train", "target", "normal", cfg.target_train_count),
                ("test", "source", "normal", cfg.test_count_per_domain),
                ("test", "source", "anomalous", cfg.test_count_per_domain),
                ("test", "target", "normal", cfg.test_count_per_domain),
                ("test", "target", "anomalous", cfg.test_count_per_domain),
            ]
            for split, domain, label, count in plan:
                for i in range(count):
                    clip_id = f"{mtype}_{sec}_{split}_{domain}_{label}_{i:04d}"
                    attr = i % cfg.attributes_per_section
                    records.append(
                        ClipRecord(
                            clip_id=clip_id,
                            path=f"{audio_dir}/{clip_id}.wav",
                            machine_type=mtype,
                            section=sec,
                            domain=domain,
                            split=split,
                            label=label,
                            attributes={"attr": f"a{attr}"},
                        )
                    )
    return records


@dataclass(frozen=True)
class Signature:
    freqs: np.ndarray
    amps: np.ndarray
    am_rate: float
    am_depth: float
    setting: int = 0


def _indices(record: ClipRecord):
    return (
        int(record.machine_type.removeprefix("machine")),
        int(record.section.removeprefix("section")),
        int(record.attributes.get("attr", "a0").removeprefix("a")),
    )


def class_signature(cfg: SynthConfig, t: int, s: int, a: int) -> Signature:
    """Deterministic signature for class (type t, section s, attribute a).

    The type fixes the partial layout; the section detunes every partial by
    up to 12% and picks one "setting" partial, which is made the loudest;
    the attribute, like a machine setting, moves that partial by up to +-8%
    and slightly reweights the rest.
    """
    type_rng = np.random.default_rng([cfg.seed, 1, t])
    n = int(type_rng.integers(3, 6))
    base = np.sort(np.exp(type_rng.uniform(math.log(150.0), math.log(4500.0), n)))
    amps = type_rng.uniform(0.3, 1.0, n)
    am_rate = float(type_rng.uniform(1.0, 6.0))
    sec_rng = np.random.default_rng([cfg.seed, 2, t, s])
    freqs = base * sec_rng.uniform(0.88, 1.12, n)
    am_depth = float(sec_rng.uniform(0.0, 0.6))
    setting = int(sec_rng.integers(0, n))
    n_attr = cfg.attributes_per_section
    offset = 0.0 if n_attr == 1 else 0.16 * a / (n_attr - 1) - 0.08
    freqs[setting] *= 1.0 + offset
    attr_rng = np.random.default_rng([cfg.seed, 3, t, s, a])
    amps = amps * attr_rng.uniform(0.8, 1.2, n)
    amps[setting] = 1.25 * np.max(np.delete(amps, setting)) if n > 1 else 1.0
    return Signature(freqs, amps, am_rate, am_depth, setting)


def _colored_noise(rng, n: int, domain: str) -> np.ndarray:
    """Gaussian noise shaped by a random tilt and random resonant bumps.

    Source and target draw tilts from disjoint ranges (different textures).
    """
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    lf = np.log(np.maximum(f, 20.0))
    tilt = rng.uniform(-1.2, -0.2) if domain == "source" else rng.uniform(-0.2, 0.6)
    gain_db = 10.0 * tilt * (lf - math.log(1000.0)) / math.log(10.0)
    for _ in range(int(rng.integers(1, 4))):
        centre = rng.uniform(math.log(100.0), math.log(7500.0))
        width = rng.uniform(0.1, 0.6)
        gain_db = gain_db + rng.uniform(0.0, 18.0) * np.exp(-0.5 * ((lf - centre) / width) ** 2)
    noise = np.fft.irfft(spec * 10.0 ** (gain_db / 20.0), n)
    # slow level fluctuation
    t = np.arange(n) / SAMPLE_RATE
    env = 1.0 + rng.uniform(0.0, 0.5) * np.sin(2 * math.pi * rng.uniform(0.1, 1.0) * t + rng.uniform(0, 2 * math.pi))
    return noise * env


def _rms(x) -> float:
    return float(np.sqrt(np.mean(x * x)))


def synth_clip(cfg: SynthConfig, record: ClipRecord, index: int) -> np.ndarray:
    """Samples for one record; an independent stream per clip index."""
    rng = np.random.default_rng([cfg.seed, 0, index])
    t_idx, s_idx, a_idx = _indices(record)
    sig = class_signature(cfg, t_idx, s_idx, a_idx)
    freqs = sig.freqs * (1.0 + rng.normal(0.0, 0.002, sig.freqs.shape))
    amps = sig.amps * rng.uniform(0.9, 1.1, sig.amps.shape)
    if record.domain == "target":
        freqs = freqs * (1.0 + cfg.domain_shift)
    anomalous = record.label == "anomalous"
    if anomalous and cfg.anomaly_kind == "band-shift":
        # the dominant (setting) component drifts up or down
        freqs = freqs.copy()
        freqs[sig.setting] *= 1.0 + cfg.anomaly_shift * (1.0 if rng.random() < 0.5 else -1.0)
    if anomalous and cfg.anomaly_kind == "harmonic-drop":
        amps = amps.copy()
        amps[int(rng.integers(0, amps.shape[0]))] = 0.0
    n = cfg.n_samples
    t = np.arange(n) / SAMPLE_RATE
    env = 1.0 + sig.am_depth * np.sin(2 * math.pi * sig.am_rate * t + rng.uniform(0, 2 * math.pi))
    phases = rng.uniform(0, 2 * math.pi, freqs.shape)
    signal = env * np.sum(amps[:, None] * np.sin(2 * math.pi * freqs[:, None] * t[None, :] + phases[:, None]), axis=0)
    if anomalous and cfg.anomaly_kind == "transient":
        for _ in range(int(rng.integers(3, 8))):
            start = int(rng.integers(0, n - 160))
            length = min(n - start, 800)
            burst = rng.standard_normal(length) * np.exp(-np.arange(length) / 120.0)
            signal[start : start + length] += 3.0 * np.max(amps) * burst
    signal = signal * (0.1 / max(_rms(signal), 1e-12))
    if math.isfinite(cfg.noise_snr_db):
        noise = _colored_noise(rng, n, record.domain)
        for _ in range(int(rng.integers(0, cfg.interferers + 1))):
            f0 = math.exp(rng.uniform(math.log(100.0), math.log(7000.0)))
            a0 = rng.uniform(0.2, 1.0) * math.sqrt(2.0)
            on = rng.uniform(0, cfg.clip_seconds)
            dur = rng.uniform(0.2, cfg.clip_seconds)
            gate = ((t >= on) & (t < on + dur)).astype(np.float64)
            noise = noise + a0 * _rms(noise) * gate * np.sin(2 * math.pi * f0 * t + rng.uniform(0, 2 * math.pi))
        noise = noise * (_rms(signal) / max(_rms(noise), 1e-12)) * 10.0 ** (-cfg.noise_snr_db / 20.0)
        signal = signal + noise
    peak = np.max(np.abs(signal))
    if peak > 0.95:
        signal = signal * (0.95 / peak)
    return signal


def generate_synthetic(cfg: SynthConfig, out_dir, *, write_audio: bool = True) -> list:
    """Write ``manifest.jsonl`` and (optionally) WAV files under ``out_dir``."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    records = synth_manifest(cfg)
    if write_audio:
        for i, r in enumerate(records):
            write_wav(out / r.path, synth_clip(cfg, r, i))
    write_manifest(out / "manifest.jsonl", records)
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), sort_keys=True, indent=1))
    return records


# --- feature sets ---------------------------------------------------------


@dataclass
class FeatureSet:
    """Model-ready inputs for a list of records, row-aligned."""

    records: list
    spec_in: np.ndarray
    spectrum_in: np.ndarray

    def __len__(self):
        return len(self.records)

    def subset(self, mask) -> "FeatureSet":
        idx = np.flatnonzero(np.asarray(mask))
        return FeatureSet([self.records[i] for i in idx], self.spec_in[idx], self.spectrum_in[idx])

    def where(self, **conditions) -> "FeatureSet":
        mask = [all(getattr(r, k) == v for k, v in conditions.items()) for r in self.records]
        return self.subset(mask)


def featurize(samples, spectrum_len: int, segments: int = 8):
    grid, spectrum = clip_features(samples, spectrum_len)
    return spectrogram_input(grid, segments), spectrum


def build_feature_set(records, sample_source, spectrum_len: int, segments: int = 8) -> FeatureSet:
    """Compute features for every record; ``sample_source(i, record)`` returns samples."""
    spec_rows, spectrum_rows = [], []
    for i, r in enumerate(records):
        a, b = featurize(sample_source(i, r), spectrum_len, segments)
        spec_rows.append(a)
        spectrum_rows.append(b)
    return FeatureSet(list(records), np.array(spec_rows), np.array(spectrum_rows))


def synth_feature_set(cfg: SynthConfig, spectrum_len: int, segments: int = 8) -> FeatureSet:
    """Generate audio in memory and featurize it, skipping the WAV round trip."""
    records = synth_manifest(cfg)
    return build_feature_set(records, lambda i, r: synth_clip(cfg, r, i), spectrum_len, segments)


def manifest_feature_set(records, root, spectrum_len: int, segments: int = 8) -> FeatureSet:
    root = Path(root)
    return build_feature_set(records, lambda i, r: read_wav(root / r.path), spectrum_len, segments)


def cache_paths(features_dir, record: ClipRecord):
    d = Path(features_dir)
    return d / f"{record.clip_id}.spec.masd", d / f"{record.clip_id}.spectrum.masd"


def write_feature_cache(records, root, features_dir, spectrum_len: int) -> int:
    """Cache the normalized spectrogram and the spectrum of every clip; returns the count."""
    Path(features_dir).mkdir(parents=True, exist_ok=True)
    root = Path(root)
    for r in records:
        grid, spectrum = clip_features(read_wav(root / r.path), spectrum_len)
        spec_path, spectrum_path = cache_paths(features_dir, r)
        write_cache(spec_path, grid)
        write_cache(spectrum_path, spectrum)
    return len(records)


def cached_feature_set(records, features_dir, segments: int = 8) -> FeatureSet:
    spec_rows, spectrum_rows = [], []
    for r in records:
        spec_path, spectrum_path = cache_paths(features_dir, r)
        if not spec_path.exists() or not spectrum_path.exists():
            raise FileNotFoundError(f"no cached features for {r.clip_id} in {features_dir}")
        spec_rows.append(spectrogram_input(read_cache(spec_path), segments))
        spectrum_rows.append(read_cache(spectrum_path)[:, 0])
    return FeatureSet(list(records), np.array(spec_rows), np.array(spectrum_rows))
