import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazemap.errors import ImageTooSmall
from gazemap.features import (
    DESCRIPTOR_BYTES,
    FeatureParams,
    Keypoint,
    detect_and_describe,
    hamming_distances,
    match_descriptors,
    match_score,
)
from gazemap.geometry import apply_homography
from gazemap.synth import make_texture, render_view


@pytest.fixture(scope="module")
def texture():
    return make_texture(np.random.default_rng(3), 240, 320)


@pytest.fixture(scope="module")
def texture_features(texture):
    return detect_and_describe(texture)


def similarity_about_centre(angle_deg, scale, centre=(160.0, 120.0)):
    """View -> base map of a view rotated by ``angle_deg`` and zoomed by ``scale``."""
    a = math.radians(angle_deg)
    r = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]]) / [[scale], [scale], [1]]
    t = np.array([[1, 0, centre[0]], [0, 1, centre[1]], [0, 0, 1]])
    return t @ r @ np.linalg.inv(t)


def consistent_fraction(fa, fb, m, h_b_to_a, tol=3.0):
    pa, pb = m.points(fa, fb)
    return float((np.linalg.norm(apply_homography(h_b_to_a, pb) - pa, axis=1) < tol).mean())


# --- detection -----------------------------------------------------------------------

def test_constant_image_has_no_keypoints():
    assert len(detect_and_describe(np.full((64, 64), 128, np.uint8))) == 0


def test_too_small():
    with pytest.raises(ImageTooSmall):
        detect_and_describe(np.zeros((31, 64), np.uint8))


def test_checkerboard_corners():
    cell = 32
    yy, xx = np.mgrid[0:256, 0:256]
    board = (((xx // cell) + (yy // cell)) % 2 * 255).astype(np.uint8)
    f = detect_and_describe(board)
    # corners sit on pixel boundaries, i.e. half-way between pixel centres
    grid = np.array([(x - 0.5, y - 0.5) for x in range(cell, 256, cell) for y in range(cell, 256, cell)])
    d = np.linalg.norm(grid[:, None, :] - f.xy[None, :, :].astype(float), axis=2)
    assert d.min(axis=1).max() <= 2.0
    assert len(grid) == 49


def test_output_contract(texture, texture_features):
    f = texture_features
    assert 0 < len(f) <= 1000
    assert f.descriptors.shape == (len(f), DESCRIPTOR_BYTES)
    assert np.all(np.diff(f.response) <= 0)
    assert np.all((f.orientation >= 0) & (f.orientation < 2 * np.pi))
    assert np.all(f.scale > 0)
    h, w = texture.shape
    assert np.all((f.xy[:, 0] >= 0) & (f.xy[:, 0] < w) & (f.xy[:, 1] >= 0) & (f.xy[:, 1] < h))
    kp, desc = next(iter(f))
    assert isinstance(kp, Keypoint) and len(desc) == DESCRIPTOR_BYTES
    assert len(detect_and_describe(texture, FeatureParams(max_keypoints=50))) == 50


def test_detection_deterministic(texture, texture_features):
    assert detect_and_describe(texture.copy()) == texture_features


def test_fast_detector_runs(texture):
    f = detect_and_describe(texture, FeatureParams(detector="fast"))
    assert len(f) > 100


# --- matching ------------------------------------------------------------------------

def test_identical_sets_match_themselves(rng):
    a = rng.integers(0, 256, (200, DESCRIPTOR_BYTES), dtype=np.uint8)
    m = match_descriptors(a, a)
    assert len(m) == 200
    assert np.array_equal(m.idx_a, m.idx_b)
    assert np.all(m.distance == 0)


def test_complement_gives_nothing(rng):
    a = rng.integers(0, 256, (100, DESCRIPTOR_BYTES), dtype=np.uint8)
    assert len(match_descriptors(a, ~a, 0.8)) == 0


def test_planted_matches(rng):
    a = rng.integers(0, 256, (100, DESCRIPTOR_BYTES), dtype=np.uint8)
    bits = np.unpackbits(a, axis=1)
    for row in bits:
        flip = rng.choice(256, size=rng.integers(0, 9), replace=False)
        row[flip] ^= 1
    noisy = np.packbits(bits, axis=1)
    decoys = rng.integers(0, 256, (100, DESCRIPTOR_BYTES), dtype=np.uint8)
    b = np.vstack([noisy, decoys])
    perm = rng.permutation(len(b))
    b = b[perm]
    truth = {(i, int(np.nonzero(perm == i)[0][0])) for i in range(100)}
    m = match_descriptors(a, b)
    assert len(m.pairs() & truth) >= 95


def test_match_sorted_by_distance(texture_features):
    a = texture_features.descriptors
    b = a.copy()
    b[:, 0] ^= 0b1011
    m = match_descriptors(a, b)
    assert np.all(np.diff(m.distance) >= 0)


def test_match_score_examples(texture, texture_features):
    assert match_score(texture_features, texture_features) == len(texture_features)
    blank = detect_and_describe(np.full_like(texture, 90))
    assert match_score(texture_features, blank) == 0


def test_rotated_warp(texture, texture_features):
    h = similarity_about_centre(15, 1.0)
    g = detect_and_describe(render_view(texture, h))
    m = match_descriptors(texture_features, g)
    assert len(m) >= 0.3 * len(texture_features)
    assert consistent_fraction(texture_features, g, m, h) >= 0.9


@pytest.mark.parametrize("scale", [0.5, 2.0])
def test_scale_survival(texture, texture_features, scale):
    h = similarity_about_centre(0, scale)
    g = detect_and_describe(render_view(texture, h))
    m = match_descriptors(texture_features, g)
    assert len(m) >= 50
    assert consistent_fraction(texture_features, g, m, h) >= 0.8


def test_geometric_consistency_on_noisy_blend(texture):
    # checker-plus-noise texture, sigma 5 grey levels of sensor noise on the view
    rng = np.random.default_rng(8)
    h = np.array([[0.97, 0.08, 6.0], [-0.06, 1.02, -4.0], [1e-4, -5e-5, 1.0]])
    view = render_view(texture, h).astype(float) + rng.normal(0, 5, texture.shape)
    view = np.clip(np.rint(view), 0, 255).astype(np.uint8)
    fa, fb = detect_and_describe(texture), detect_and_describe(view)
    m = match_descriptors(fa, fb)
    assert len(m) > 100
    assert consistent_fraction(fa, fb, m, h) >= 0.9


# --- properties ------------------------------------------------------------------------

descriptor_sets = st.tuples(st.integers(0, 2**32 - 1), st.integers(1, 60), st.integers(1, 60), st.integers(0, 40))


def _related_sets(seed, na, nb, shared):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (na, DESCRIPTOR_BYTES), dtype=np.uint8)
    b = rng.integers(0, 256, (nb, DESCRIPTOR_BYTES), dtype=np.uint8)
    k = min(shared, na, nb)
    b[:k] = a[rng.permutation(na)[:k]]
    b[:k, 0] ^= rng.integers(0, 256, k, dtype=np.uint8)
    return a, b


@pytest.mark.property
@settings(max_examples=150, deadline=None)
@given(descriptor_sets, st.floats(0.3, 1.0))
def test_matching_symmetric(params, ratio):
    a, b = _related_sets(*params)
    ab = match_descriptors(a, b, ratio).pairs()
    ba = match_descriptors(b, a, ratio).pairs()
    assert ab == {(j, i) for i, j in ba}


@pytest.mark.property
@settings(max_examples=150, deadline=None)
@given(descriptor_sets, st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_matching_monotone_in_ratio(params, r1, r2):
    a, b = _related_sets(*params)
    lo, hi = sorted((r1, r2))
    assert len(match_descriptors(a, b, lo)) <= len(match_descriptors(a, b, hi))


@pytest.mark.property
@settings(max_examples=100, deadline=None)
@given(descriptor_sets)
def test_hamming_matches_popcount_oracle(params):
    a, b = _related_sets(*params)
    oracle = np.unpackbits(a[:, None, :] ^ b[None, :, :], axis=2).sum(axis=2)
    d = hamming_distances(a, b)
    assert np.array_equal(d, oracle)
    assert d.min() >= 0 and d.max() <= 256
    m = match_descriptors(a, b)
    assert np.all((m.distance >= 0) & (m.distance <= 256))
