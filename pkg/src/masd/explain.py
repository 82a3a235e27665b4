"""RISE importance maps with separable binary time x frequency masks.

A mask is the outer product of a binary frequency vector and a binary time
vector. Each vector starts as a coarse grid (34 frequency cells, 20 time
cells by default) whose cells are masked with probability ``mask_prob``;
it is nearest-neighbour upsampled to one cell longer than needed and
randomly cropped. Masks therefore stay binary and every cell is kept with
probability (1 - mask_prob)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskParams:
    mask_prob: float = 0.25
    time_grid: int = 20
    freq_grid: int = 34
    iters: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.time_grid < 1 or self.freq_grid < 1 or self.iters < 1:
            raise ValueError("grids and iters must be >= 1")

    @property
    def keep_prob(self) -> float:
        return (1.0 - self.mask_prob) ** 2


def _upsample_crop(cells, length: int, rng) -> np.ndarray:
    s = cells.shape[0]
    cell = math.ceil(length / s)
    up_len = (s + 1) * cell
    up = cells[(np.arange(up_len) * s) // up_len]
    shift = int(rng.integers(0, cell))
    return up[shift : shift + length]


def sample_factors(params: MaskParams, rng, n_freq: int, n_time: int):
    """The (frequency, time) binary vectors whose outer product is one mask."""
    keep = 1.0 - params.mask_prob
    f_cells = (rng.random(params.freq_grid) < keep).astype(np.float64)
    t_cells = (rng.random(params.time_grid) < keep).astype(np.float64)
    return _upsample_crop(f_cells, n_freq, rng), _upsample_crop(t_cells, n_time, rng)


def sample_mask(params: MaskParams, rng, n_freq: int = 513, n_time: int = 311) -> np.ndarray:
    f, t = sample_factors(params, rng, n_freq, n_time)
    return np.outer(f, t)


@dataclass
class ImportanceMap:
    values: np.ndarray
    params: MaskParams

    @property
    def iters(self) -> int:
        return self.params.iters


def importance_map(scorer, spec, params: MaskParams, chunk: int = 2048) -> ImportanceMap:
    """Score-weighted sum of masks over ``params.iters`` draws, divided by iters * keep_prob.

    ``scorer`` maps a masked (F, T) linear-magnitude grid to a float. Masks
    come from one generator seeded by ``params.seed`` and are consumed in
    order, so any scorer sees the same mask sequence for the same seed.
    """
    grid = np.asarray(spec, dtype=np.float64)
    n_freq, n_time = grid.shape
    rng = np.random.default_rng(params.seed)
    total = np.zeros((n_freq, n_time))
    masked = np.empty_like(grid)
    done = 0
    while done < params.iters:
        n = min(chunk, params.iters - done)
        fs = np.empty((n, n_freq))
        ts = np.empty((n, n_time))
        scores = np.empty(n)
        for i in range(n):
            fs[i], ts[i] = sample_factors(params, rng, n_freq, n_time)
            # binary factors: scale by the time vector, then blank the dropped rows
            np.multiply(grid, ts[i][None, :], out=masked)
            masked[fs[i] == 0.0] = 0.0
            s = float(scorer(masked))
            if not math.isfinite(s):
                raise FloatingPointError("scorer returned a non-finite value")
            scores[i] = s
        total += fs.T @ (scores[:, None] * ts)
        done += n
    keep = params.keep_prob
    if keep == 0.0:
        raise ValueError("mask_prob = 1 masks everything; map undefined")
    return ImportanceMap(total / (params.iters * keep), params)


def export_map(imap, path, fmt: str = "csv-grid") -> None:
    """Write F rows x T columns as CSV, or as a P5 PGM (width T, height F)."""
    values = imap.values if isinstance(imap, ImportanceMap) else np.asarray(imap, dtype=np.float64)
    if fmt == "csv-grid":
        np.savetxt(path, values, delimiter=",", fmt="%.17g")
    elif fmt == "pgm":
        lo, hi = float(values.min()), float(values.max())
        if hi > lo:
            pix = np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
        else:
            pix = np.full(values.shape, 128, dtype=np.uint8)
        n_freq, n_time = values.shape
        with open(path, "wb") as fh:
            fh.write(f"P5 {n_time} {n_freq} 255\n".encode())
            fh.write(pix.tobytes())
    else:
        raise ValueError(f"unknown map format {fmt!r}")


def read_csv_grid(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
