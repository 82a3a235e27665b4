"""Domain-generalized anomaly scoring against per-section normal references."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from masd.geometry import normalize

log = logging.getLogger(__name__)

REFS_MAGIC = b"MASR"
REFS_VERSION = 1


def _sq_dists(points, means):
    return np.sum((points[:, None, :] - means[None, :, :]) ** 2, axis=2)


def _plus_plus_init(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[chosen].copy()


def kmeans(points, k: int, seed: int, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns a (k, D) array of means.

    Stops when assignments no longer change or after ``max_iter`` rounds. An
    empty cluster is moved onto the point farthest from its current mean.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("k-means needs at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    means = _plus_plus_init(x, k, rng)
    assign = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, means)
        new_assign = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        own = d2[np.arange(x.shape[0]), assign]
        for j in range(k):
            members = assign == j
            if np.any(members):
                means[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                means[j] = x[far]
                own[far] = -1.0
    return means


@dataclass
class SectionRefs:
    source_means: np.ndarray
    target_refs: np.ndarray


@dataclass
class ReferenceModel:
    sections: dict

    def __contains__(self, section):
        return section in self.sections


def fit_reference(train_embs: dict, k: int = 16, seed: int = 0) -> ReferenceModel:
    """``train_embs`` maps section -> {"source": (n, D), "target": (m, D)} embeddings."""
    out = {}
    for name in sorted(train_embs):
        parts = train_embs[name]
        src = np.atleast_2d(np.asarray(parts.get("source", np.empty((0, 0)))))
        tgt = np.atleast_2d(np.asarray(parts.get("target", np.empty((0, 0)))))
        if src.size == 0 or tgt.size == 0:
            raise ValueError(f"section {name!r} lacks source or target training embeddings")
        k_eff = k
        if k > src.shape[0]:
            log.warning("section %s: k=%d exceeds %d source samples; clamping", name, k, src.shape[0])
            k_eff = src.shape[0]
        means = normalize(kmeans(src, k_eff, seed))
        out[name] = SectionRefs(means, normalize(tgt))
    return ReferenceModel(out)


def anomaly_scores(e, refs: ReferenceModel, section) -> np.ndarray:
    """Vectorized :func:`anomaly_score` for a (B, D) batch from one section."""
    if section not in refs.sections:
        raise KeyError(f"unknown section {section!r}")
    r = refs.sections[section]
    e = np.atleast_2d(e)
    src = 1.0 - np.max(e @ r.source_means.T, axis=1)
    tgt = 1.0 - np.max(e @ r.target_refs.T, axis=1)
    return np.clip(np.minimum(src, tgt), 0.0, 2.0)


def anomaly_score(e, refs: ReferenceModel, section) -> float:
    """Min over both domains of the min cosine distance to that domain's references."""
    return float(anomaly_scores(e, refs, section)[0])


def write_scores(path, rows) -> None:
    """``rows`` are (clip_id, section, score) triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "section", "score"])
        for clip_id, section, score in rows:
            w.writerow([clip_id, section, repr(float(score))])


def read_scores(path) -> list:
    with open(path, newline="") as fh:
        return [(r["clip_id"], r["section"], float(r["score"])) for r in csv.DictReader(fh)]


def save_reference(path, refs: ReferenceModel) -> None:
    names = sorted(refs.sections)
    header = {
        "sections": [
            [n, list(refs.sections[n].source_means.shape), list(refs.sections[n].target_refs.shape)] for n in names
        ]
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(REFS_MAGIC)
        fh.write(struct.pack("<II", REFS_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(refs.sections[n].source_means.astype("<f8").tobytes())
            fh.write(refs.sections[n].target_refs.astype("<f8").tobytes())


def load_reference(path) -> ReferenceModel:
    data = Path(path).read_bytes()
    if data[:4] != REFS_MAGIC:
        raise ValueError(f"{path}: not a reference model")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != REFS_VERSION:
        raise ValueError(f"{path}: unsupported reference version {version}")
    header = json.loads(data[12 : 12 + hlen])
    offset = 12 + hlen
    out = {}
    for name, s_shape, t_shape in header["sections"]:
        arrays = []
        for shape in (s_shape, t_shape):
            n = int(np.prod(shape))
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
            offset += 8 * n
        out[name] = SectionRefs(*arrays)
    return ReferenceModel(out)
