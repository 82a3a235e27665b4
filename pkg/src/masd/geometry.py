"""Unit-hypersphere arithmetic for embeddings and class centers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-30


class DegenerateEmbeddingError(ValueError):
    """An embedding with (near) zero norm cannot be projected to the sphere."""


def normalize(v) -> np.ndarray:
    """Project a vector (or each row of a matrix) onto the unit sphere."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= NORM_FLOOR):
        raise DegenerateEmbeddingError("cannot normalize a zero-norm embedding")
    return v / norm


def cosine(u, v) -> float:
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def sq_dist(u, v) -> float:
    d = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return float(np.dot(d, d))


def chord_residual(u, v) -> float:
    """|cos(u, v) - (1 - |u - v|^2 / 2)| for unit vectors u, v."""
    return abs(cosine(u, v) - (1.0 - sq_dist(u, v) / 2.0))


def cos_margin(u, c, m: float) -> float:
    """cos(arccos(cos(u, c)) + m), with the shifted angle clamped to [0, pi].

    The angle comes from the chord lengths, 2 atan2(|u - c|, |u + c|), which
    unlike arccos stays accurate for nearly parallel vectors.
    """
    if not 0.0 <= m <= np.pi / 2:
        raise ValueError(f"margin {m} outside [0, pi/2]")
    u = np.asarray(u, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    theta = 2.0 * np.arctan2(np.linalg.norm(u - c), np.linalg.norm(u + c))
    return float(np.cos(min(theta + m, np.pi)))


@dataclass(frozen=True)
class CenterBank:
    """N classes x M sub-clusters of fixed, unit-norm random centers.

    Fully determined by (n_classes, n_sub, dim, seed); the center array is
    regenerated on construction and marked read-only.
    """

    n_classes: int
    n_sub: int
    dim: int
    seed: int
    centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if min(self.n_classes, self.n_sub, self.dim) < 1:
            raise ValueError("N, M and D must all be >= 1")
        rng = np.random.default_rng(self.seed)
        g = rng.standard_normal((self.n_classes, self.n_sub, self.dim))
        c = normalize(g)
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def flat(self) -> np.ndarray:
        """Centers as an (N*M, D) matrix, class-major."""
        return self.centers.reshape(-1, self.dim)

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "n_sub": self.n_sub, "dim": self.dim, "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "CenterBank":
        return cls(int(d["n_classes"]), int(d["n_sub"]), int(d["dim"]), int(d["seed"]))


def init_centers(n_classes: int, n_sub: int, dim: int, seed: int) -> CenterBank:
    return CenterBank(n_classes, n_sub, dim, seed)
