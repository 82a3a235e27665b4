"""Audio input representations: WAV I/O, magnitude spectrogram, full-clip spectrum.

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 512
SPECTRUM_LEN = 8192
LOG_EPS = 1e-12

CACHE_MAGIC = b"MASD"
CACHE_VERSION = 1


class WavFormatError(ValueError):
    """Raised for WAV files that are not RIFF PCM16 mono 16 kHz."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise WavFormatError(f"unsupported sample rate {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise WavFormatError("waveform must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


def read_wav(path) -> Waveform:
    """Read a PCM16 mono 16 kHz WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: malformed WAV: {exc}") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    pcm = np.frombuffer(frames, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def write_wav(path, samples) -> None:
    """Write samples in [-1, 1] as PCM16 mono 16 kHz (clipped, rounded)."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _samples(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def magnitude_spectrogram(w, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT| of Hann-windowed frames without padding, shape (n_fft//2 + 1, T)."""
    x = _samples(w)
    if not n_fft >= hop >= 1:
        raise ValueError("need n_fft >= hop >= 1")
    if x.shape[0] < n_fft:
        raise ValueError(f"clip of {x.shape[0]} samples is shorter than one frame ({n_fft})")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * hann(n_fft), axis=1)).T


def log_magnitude(values) -> np.ndarray:
    return np.log(LOG_EPS + np.asarray(values, dtype=np.float64))


def temporal_mean_normalize(grid) -> np.ndarray:
    """Log-compress, then subtract each frequency row's mean over time."""
    g = log_magnitude(grid)
    if g.ndim != 2 or g.shape[1] < 1:
        raise ValueError("expected an F x T grid with T >= 1")
    return g - g.mean(axis=1, keepdims=True)


def max_pool(values, out_len: int) -> np.ndarray:
    """Non-overlapping max pooling of a 1-D array into ``out_len`` cells.

    Cell i covers indices [floor(i*n/out_len), floor((i+1)*n/out_len)).
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    if out_len > n:
        raise ValueError(f"out_len {out_len} exceeds {n} input bins")
    starts = (np.arange(out_len) * n) // out_len
    return np.maximum.reduceat(v, starts)


def pool_cell(index: int, n: int, out_len: int) -> int:
    """Pool cell that input bin ``index`` falls into under :func:`max_pool`."""
    return ((index + 1) * out_len - 1) // n


def magnitude_spectrum(w, out_len: int = SPECTRUM_LEN) -> np.ndarray:
    """Log magnitude of the full-clip real DFT, max-pooled to ``out_len`` bins."""
    x = _samples(w)
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    if out_len > x.shape[0] // 2 + 1:
        raise ValueError(f"out_len {out_len} exceeds {x.shape[0] // 2 + 1} DFT bins")
    mag = np.abs(np.fft.rfft(x))
    return log_magnitude(max_pool(mag, out_len))


def time_pool(grid, segments: int) -> np.ndarray:
    """Mean over ``segments`` contiguous, near-equal time spans; shape (F, segments)."""
    g = np.asarray(grid, dtype=np.float64)
    t = g.shape[1]
    if segments > t:
        raise ValueError(f"cannot pool {t} frames into {segments} segments")
    edges = (np.arange(segments + 1) * t) // segments
    sums = np.add.reduceat(g, edges[:-1], axis=1)
    return sums / np.diff(edges)


def write_cache(path, values) -> None:
    """Store a 2-D (or 1-D, as F x 1) float64 array in the MASD cache format."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    f, t = a.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", CACHE_VERSION, f, t))
        fh.write(np.ascontiguousarray(a).astype("<f8").tobytes())


def read_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a MASD feature cache")
    version, f, t = struct.unpack_from("<III", data, 4)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    body = data[16:]
    if len(body) != 8 * f * t:
        raise ValueError(f"{path}: truncated cache ({len(body)} bytes for {f}x{t})")
    return np.frombuffer(body, dtype="<f8").reshape(f, t).astype(np.float64)


def clip_features(w, spectrum_len: int = SPECTRUM_LEN):
    """Both model inputs for one clip: normalized log spectrogram and log spectrum."""
    return temporal_mean_normalize(magnitude_spectrogram(w)), magnitude_spectrum(w, spectrum_len)
