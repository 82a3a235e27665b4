"""Bias-free two-branch rectifier network producing unit-norm embeddings.

Spectrogram branch and spectrum branch are stacks of dense layers, each
followed by a rectifier; their outputs are concatenated and linearly
projected to D dimensions, then normalized. No layer has an additive bias,
so the zero input (or zero weights) maps to the zero vector, which the
normalization rejects.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from masd.features import time_pool
from masd.geometry import normalize

CHECKPOINT_MAGIC = b"MASM"
CHECKPOINT_VERSION = 1

_version_counter = itertools.count(1)


class StaleCacheError(RuntimeError):
    """Backward was called with a cache from an older set of weights."""


@dataclass(frozen=True)
class NetSpec:
    spec_dim: int = 513 * 8
    spectrum_dim: int = 8192
    spec_widths: tuple = (128, 128)
    spectrum_widths: tuple = (128, 128)
    dim: int = 256
    segments: int = 8

    def layer_shapes(self) -> dict:
        shapes = {}
        for branch, fan_in, widths in (
            ("spec", self.spec_dim, self.spec_widths),
            ("spectrum", self.spectrum_dim, self.spectrum_widths),
        ):
            for i, w in enumerate(widths):
                shapes[f"{branch}.{i}"] = (fan_in, w)
                fan_in = w
        shapes["head"] = (self.spec_widths[-1] + self.spectrum_widths[-1], self.dim)
        return shapes

    def __post_init__(self):
        object.__setattr__(self, "spec_widths", tuple(int(w) for w in self.spec_widths))
        object.__setattr__(self, "spectrum_widths", tuple(int(w) for w in self.spectrum_widths))
        if min((self.spec_dim, self.spectrum_dim, self.dim, self.segments, *self.spec_widths, *self.spectrum_widths)) < 1:
            raise ValueError("all widths must be >= 1")
        if not self.spec_widths or not self.spectrum_widths:
            raise ValueError("each branch needs at least one layer")


@dataclass
class EmbeddingNet:
    spec: NetSpec
    weights: dict
    seed: int = 0
    version: int = field(default_factory=lambda: next(_version_counter))

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def apply_update(self, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            self.weights[name] -= lr * g
        self.version = next(_version_counter)

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(self.spec, {k: v.copy() for k, v in self.weights.items()}, self.seed)


def init_weights(spec: NetSpec, seed: int) -> EmbeddingNet:
    """He-scaled Gaussian weights (std sqrt(2 / fan_in)), deterministic in seed."""
    rng = np.random.default_rng(seed)
    weights = {
        name: rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        for name, shape in spec.layer_shapes().items()
    }
    return EmbeddingNet(spec, weights, seed)


def spectrogram_input(grid, segments: int) -> np.ndarray:
    """Flattened (F * segments) time-pooled spectrogram vector."""
    return time_pool(grid, segments).ravel()


def _branch(x, net: EmbeddingNet, name: str, n_layers: int, acts: list):
    h = x
    for i in range(n_layers):
        a = h @ net.weights[f"{name}.{i}"]
        acts.append((f"{name}.{i}", h, a))
        h = np.maximum(a, 0.0)
    return h


def forward(net: EmbeddingNet, spec_in, spectrum_in):
    """Embed a batch; returns ((B, D) unit embeddings, cache for backward).

    Single samples (1-D inputs) are accepted and treated as a batch of one.
    """
    xs = np.atleast_2d(np.asarray(spec_in, dtype=np.float64))
    xm = np.atleast_2d(np.asarray(spectrum_in, dtype=np.float64))
    if xs.shape[1] != net.spec.spec_dim or xm.shape[1] != net.spec.spectrum_dim:
        raise ValueError(
            f"input dims ({xs.shape[1]}, {xm.shape[1]}) do not match "
            f"({net.spec.spec_dim}, {net.spec.spectrum_dim})"
        )
    if xs.shape[0] != xm.shape[0]:
        raise ValueError("branch batch sizes differ")
    acts: list = []
    hs = _branch(xs, net, "spec", len(net.spec.spec_widths), acts)
    hm = _branch(xm, net, "spectrum", len(net.spec.spectrum_widths), acts)
    h = np.concatenate([hs, hm], axis=1)
    z = h @ net.weights["head"]
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite activations")
    e = normalize(z)
    cache = {"version": net.version, "acts": acts, "h": h, "z": z, "e": e, "split": hs.shape[1]}
    return e, cache


def backward(net: EmbeddingNet, cache: dict, unit_grads, *, pre_normalized: bool = False) -> dict:
    """Parameter gradients given dL/de for the unit embeddings.

    The normalization Jacobian (I - e e^T) / |z| is applied first; pass
    ``pre_normalized=True`` when ``unit_grads`` is already dL/dz.
    """
    if cache["version"] != net.version:
        raise StaleCacheError("cache was produced by different weights")
    g = np.atleast_2d(np.asarray(unit_grads, dtype=np.float64))
    e, z = cache["e"], cache["z"]
    if pre_normalized:
        gz = g
    else:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        gz = (g - np.sum(g * e, axis=1, keepdims=True) * e) / norms
    grads = {"head": cache["h"].T @ gz}
    gh = gz @ net.weights["head"].T
    split = cache["split"]
    upstream = {"spec": gh[:, :split], "spectrum": gh[:, split:]}
    for name, h_in, a in reversed(cache["acts"]):
        branch = name.split(".")[0]
        ga = upstream[branch] * (a > 0)
        grads[name] = h_in.T @ ga
        upstream[branch] = ga @ net.weights[name].T
    return grads


def embed(net: EmbeddingNet, spec_in, spectrum_in, batch: int = 256) -> np.ndarray:
    """Forward in chunks, keeping only the embeddings."""
    spec_in = np.atleast_2d(spec_in)
    spectrum_in = np.atleast_2d(spectrum_in)
    out = [forward(net, spec_in[i : i + batch], spectrum_in[i : i + batch])[0] for i in range(0, spec_in.shape[0], batch)]
    return np.concatenate(out, axis=0)


def save_checkpoint(path, net: EmbeddingNet, extra: dict | None = None, buffers: dict | None = None) -> None:
    """Versioned binary: magic, version, JSON header, then raw float64 tensors.

    ``buffers`` holds non-trainable arrays (e.g. input standardization)
    stored after the weights.
    """
    buffers = buffers or {}
    names = sorted(net.weights)
    buf_names = sorted(buffers)
    header = {
        "spec": asdict(net.spec),
        "seed": net.seed,
        "tensors": [[n, list(net.weights[n].shape)] for n in names],
        "buffers": [[n, list(np.shape(buffers[n]))] for n in buf_names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(net.weights[n]).astype("<f8").tobytes())
        for n in buf_names:
            fh.write(np.ascontiguousarray(buffers[n], dtype=np.float64).astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (EmbeddingNet, extra header dict, buffers dict)."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen])
    offset = 12 + hlen

    def take(entries):
        nonlocal offset
        out = {}
        for name, shape in entries:
            n = int(np.prod(shape))
            if offset + 8 * n > len(data):
                raise ValueError(f"{path}: truncated checkpoint")
            out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * n
        return out

    weights = take(header["tensors"])
    buffers = take(header.get("buffers", []))
    spec = NetSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["spec"].items()})
    return EmbeddingNet(spec, weights, int(header["seed"])), header["extra"], buffers
