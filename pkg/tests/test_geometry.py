import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from masd.geometry import (
    CenterBank,
    DegenerateEmbeddingError,
    cos_margin,
    cosine,
    init_centers,
    chord_residual,
    normalize,
    sq_dist,
)

vectors = st.integers(2, 64).flatmap(
    lambda d: arrays(np.float64, d, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)
)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)
    u = normalize([1.0, 2.0, 2.0])
    np.testing.assert_array_equal(normalize(u), u)
    with pytest.raises(DegenerateEmbeddingError):
        normalize(np.zeros(5))


def test_normalize_rows():
    m = normalize(np.random.default_rng(0).standard_normal((10, 6)))
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-12)


def test_cosine_examples():
    assert cosine([1.0, 0.0], [1.0, 0.0]) == 1.0
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine([1.0, 0.0], [-1.0, 0.0]) == -1.0


def test_cosine_is_clamped():
    u = np.array([1.0 + 1e-12, 0.0])
    assert cosine(u, u) == 1.0


def test_sq_dist_examples():
    assert sq_dist([0.0, 1.0], [0.0, 1.0]) == 0.0
    assert sq_dist([1.0, 0.0], [0.0, 1.0]) == 2.0
    assert sq_dist([1.0, 0.0], [-1.0, 0.0]) == 4.0


def test_chord_identity_orthogonal_is_exact():
    assert chord_residual([1.0, 0.0], [0.0, 1.0]) == 0.0


@settings(max_examples=200, deadline=None)
@given(vectors, st.integers(0, 2**32 - 1))
def test_chord_identity_property(v, seed):
    u = normalize(v)
    w = normalize(np.random.default_rng(seed).standard_normal(u.shape))
    assert chord_residual(u, w) <= 1e-12
    assert abs(sq_dist(u, w) - 2.0 * (1.0 - cosine(u, w))) <= 1e-12


def test_chord_identity_high_dim():
    rng = np.random.default_rng(1)
    u = normalize(rng.standard_normal((1000, 256)))
    v = normalize(rng.standard_normal((1000, 256)))
    assert max(chord_residual(a, b) for a, b in zip(u, v)) <= 1e-12


def test_cos_margin_examples():
    u, c = normalize([1.0, 2.0]), normalize([2.0, -1.0])
    assert cos_margin(u, c, 0.0) == pytest.approx(cosine(u, c), abs=1e-15)
    assert cos_margin(u, u, math.pi / 2) == pytest.approx(0.0, abs=1e-15)
    a = np.array([1.0, 0.0])
    b = np.array([0.5, math.sqrt(3) / 2])  # cosine 0.5, angle pi/3
    assert cos_margin(a, b, math.pi / 6) == pytest.approx(0.0, abs=1e-12)


def test_cos_margin_clamps_at_pi():
    assert cos_margin([1.0, 0.0], [-1.0, 0.0], 0.3) == -1.0


@pytest.mark.parametrize("m", [-0.1, math.pi / 2 + 1e-9, 4.0])
def test_cos_margin_range(m):
    with pytest.raises(ValueError):
        cos_margin([1.0, 0.0], [0.0, 1.0], m)


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0, math.pi / 2), st.floats(0, math.pi / 2))
def test_cos_margin_monotone(v, m1, m2):
    w = np.roll(v, 1) + 0.5
    assume(np.linalg.norm(w) > 1e-6)
    u, c = normalize(v), normalize(w)
    lo, hi = sorted((m1, m2))
    assert cos_margin(u, c, hi) <= cos_margin(u, c, lo) + 1e-12


def test_center_bank_unit_and_deterministic():
    a = init_centers(4, 3, 16, 9)
    b = init_centers(4, 3, 16, 9)
    assert a.centers.shape == (4, 3, 16)
    np.testing.assert_allclose(np.linalg.norm(a.centers, axis=-1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(a.centers, b.centers)
    assert not np.array_equal(a.centers, init_centers(4, 3, 16, 10).centers)


def test_center_bank_is_immutable():
    bank = init_centers(2, 2, 4, 0)
    with pytest.raises(ValueError):
        bank.centers[0, 0, 0] = 1.0


def test_center_bank_serializes_by_seed():
    bank = init_centers(3, 2, 8, 5)
    again = CenterBank.from_dict(bank.to_dict())
    np.testing.assert_array_equal(again.centers, bank.centers)
    assert bank.flat.shape == (6, 8)


def test_center_bank_rejects_empty():
    with pytest.raises(ValueError):
        init_centers(0, 1, 4, 0)


def test_high_dim_centers_nearly_orthogonal():
    flat = init_centers(342, 16, 256, 0).flat
    total, count = 0.0, 0
    for i in range(0, flat.shape[0], 1024):
        block = np.abs(flat[i : i + 1024] @ flat.T)
        total += block.sum()
        count += block.size
    n = flat.shape[0]
    mean_offdiag = (total - n) / (count - n)
    assert mean_offdiag <= 0.1
