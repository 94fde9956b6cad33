"""Multi-scale corner detection, steered binary descriptors and Hamming matching.

The detector works on a Gaussian scale pyramid (default 8 levels, factor 1.2).
Corners are local maxima of the Harris response (or, optionally, pixels
passing the FAST-9 segment test, ranked by Harris response).  Each keypoint
gets an orientation from the intensity centroid of its patch and a 256-bit
descriptor of pairwise intensity comparisons rotated to that orientation.
"""
from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import ndimage

from .geometry import Point2
from .imaging import check_image

DESCRIPTOR_BYTES = 32
DESCRIPTOR_BITS = 8 * DESCRIPTOR_BYTES
PATCH_RADIUS = 15
PATTERN_RADIUS = 13
BORDER = 16


class Keypoint(NamedTuple):
    position: Point2
    scale: float
    orientation: float
    response: float


@dataclass(frozen=True)
class FeatureParams:
    max_keypoints: int = 1000
    threshold: float = 1e-6
    n_levels: int = 8
    scale_factor: float = 1.2
    detector: str = "harris"  # or "fast"
    fast_threshold: int = 20
    harris_k: float = 0.04
    nms_radius: int = 2

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _make_pattern(seed: int = 0x0B5E55ED) -> np.ndarray:
    """Fixed (256, 2, 2) test-pair offsets, isotropic Gaussian inside a disc."""
    rng = np.random.default_rng(seed)
    out = []
    sigma = (2 * PATCH_RADIUS + 1) / 5.0
    while len(out) < DESCRIPTOR_BITS:
        p = np.rint(rng.normal(0.0, sigma, size=(2, 2)))
        if np.any((p**2).sum(axis=1) > PATTERN_RADIUS**2) or np.array_equal(p[0], p[1]):
            continue
        out.append(p)
    return np.array(out)


PATTERN = _make_pattern()
_dy, _dx = np.mgrid[-PATCH_RADIUS : PATCH_RADIUS + 1, -PATCH_RADIUS : PATCH_RADIUS + 1]
_disc = _dx**2 + _dy**2 <= PATCH_RADIUS**2
DISC_DX, DISC_DY = _dx[_disc], _dy[_disc]
# Bresenham circle of radius 3 used by the segment test, in angular order
FAST_CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)]
)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints and descriptors of one image, stored column-wise.

    Coordinates are level-0 pixels; all float fields are float32 so the set
    survives a binary round trip unchanged.
    """

    xy: np.ndarray  # (N, 2) float32
    scale: np.ndarray  # (N,) float32, patch diameter in level-0 pixels
    orientation: np.ndarray  # (N,) float32, radians in [0, 2pi)
    response: np.ndarray  # (N,) float32
    descriptors: np.ndarray  # (N, 32) uint8
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.xy)

    def __iter__(self) -> Iterator[tuple[Keypoint, bytes]]:
        for i in range(len(self)):
            yield self.keypoint(i), self.descriptors[i].tobytes()

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(
            Point2(float(self.xy[i, 0]), float(self.xy[i, 1])),
            float(self.scale[i]),
            float(self.orientation[i]),
            float(self.response[i]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("xy", "scale", "orientation", "response", "descriptors")
        )

    @cached_property
    def bits(self) -> np.ndarray:
        return unpack_bits(self.descriptors)

    @cached_property
    def _gram_operands(self) -> tuple[np.ndarray, np.ndarray]:
        return _gram_operands(self.bits)

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(
            np.zeros((0, 2), np.float32),
            np.zeros(0, np.float32),
            np.zeros(0, np.float32),
            np.zeros(0, np.float32),
            np.zeros((0, DESCRIPTOR_BYTES), np.uint8),
        )


def build_pyramid(img: np.ndarray, n_levels: int, factor: float, min_side: int) -> list[tuple[float, np.ndarray]]:
    """(scale, float image in [0, 1]) per level, each resampled from level 0."""
    base = img.astype(np.float32) / np.float32(255.0)
    h, w = base.shape
    levels = [(1.0, base)]
    blurred, sigma_done = base, 0.0
    for lev in range(1, n_levels):
        s = factor**lev
        lh, lw = int(round(h / s)), int(round(w / s))
        if min(lh, lw) < min_side:
            break
        # incremental blur: Gaussian variances add
        sigma = 0.6 * math.sqrt(s * s - 1.0)
        blurred = ndimage.gaussian_filter(blurred, math.sqrt(sigma**2 - sigma_done**2), mode="nearest")
        sigma_done = sigma
        yy = (np.arange(lh) + 0.5) * s - 0.5
        xx = (np.arange(lw) + 0.5) * s - 0.5
        grid = np.meshgrid(yy, xx, indexing="ij")
        levels.append((s, ndimage.map_coordinates(blurred, grid, order=1, mode="nearest")))
    return levels


def harris_response(im: np.ndarray, k: float = 0.04, sigma: float = 1.5) -> np.ndarray:
    gx = ndimage.sobel(im, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(im, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def fast_mask(im: np.ndarray, threshold: float, arc: int = 9) -> np.ndarray:
    """Segment test: ``arc`` contiguous circle pixels all brighter or all darker."""
    h, w = im.shape
    pad = np.pad(im, 3, mode="edge")
    ring = np.stack([pad[3 + dy : 3 + dy + h, 3 + dx : 3 + dx + w] for dx, dy in FAST_CIRCLE])
    out = np.zeros((h, w), dtype=bool)
    for cmp in (ring > im + threshold, ring < im - threshold):
        wrapped = np.concatenate([cmp, cmp[: arc - 1]])
        for start in range(16):
            out |= wrapped[start : start + arc].all(axis=0)
    return out


def _level_quotas(total: int, n_levels: int, factor: float) -> list[int]:
    f = 1.0 / (factor * factor)
    raw = [total * (1 - f) / (1 - f**n_levels) * f**i for i in range(n_levels)]
    quotas = [int(round(r)) for r in raw]
    quotas[0] += total - sum(quotas)
    return quotas


def _detect_level(im: np.ndarray, params: FeatureParams, quota: int):
    resp = harris_response(im, params.harris_k)
    size = 2 * params.nms_radius + 1
    if params.detector == "fast":
        cand = fast_mask(im, params.fast_threshold / 255.0)
        score = np.where(cand, resp, -np.inf)
        peaks = cand & (score == ndimage.maximum_filter(score, size=size, mode="constant", cval=-np.inf))
    elif params.detector == "harris":
        peaks = resp == ndimage.maximum_filter(resp, size=size, mode="nearest")
    else:
        raise ValueError(f"unknown detector {params.detector!r}")
    peaks &= resp > params.threshold
    peaks[:BORDER, :] = False
    peaks[-BORDER:, :] = False
    peaks[:, :BORDER] = False
    peaks[:, -BORDER:] = False
    ys, xs = np.nonzero(peaks)
    if len(ys) == 0 or quota <= 0:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0, int), np.zeros(0, int)
    r = resp[ys, xs]
    # descending response, raster order breaks ties
    order = np.lexsort((xs, ys, -r))[:quota]
    ys, xs, r = ys[order], xs[order], r[order]
    # quadratic sub-pixel refinement of the response peak
    def offset(lo, mid, hi):
        den = lo - 2 * mid + hi
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(den < 0, 0.5 * (lo - hi) / den, 0.0)
        return np.clip(d, -0.5, 0.5)

    ox = offset(resp[ys, xs - 1], r, resp[ys, xs + 1])
    oy = offset(resp[ys - 1, xs], r, resp[ys + 1, xs])
    sub = np.stack([xs + ox, ys + oy], axis=1)
    return sub, r, xs, ys


def _orientation(im: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    patch = im[ys[:, None] + DISC_DY[None, :], xs[:, None] + DISC_DX[None, :]]
    m10 = patch @ DISC_DX.astype(float)
    m01 = patch @ DISC_DY.astype(float)
    return np.mod(np.arctan2(m01, m10), 2 * np.pi)


def _describe(smooth: np.ndarray, xs, ys, theta) -> np.ndarray:
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    bits = []
    for k in (0, 1):
        px, py = PATTERN[:, k, 0][None, :], PATTERN[:, k, 1][None, :]
        rx = np.rint(c * px - s * py).astype(int)
        ry = np.rint(s * px + c * py).astype(int)
        bits.append(smooth[ys[:, None] + ry, xs[:, None] + rx])
    return np.packbits(bits[0] < bits[1], axis=1, bitorder="little")


def detect_and_describe(img, params: FeatureParams | None = None) -> FeatureSet:
    """Detect up to ``params.max_keypoints`` oriented keypoints with binary descriptors.

    Output is sorted by descending response and fully deterministic.
    """
    params = params or FeatureParams()
    img = check_image(img)
    levels = build_pyramid(img, params.n_levels, params.scale_factor, 2 * BORDER + 8)
    quotas = _level_quotas(params.max_keypoints, len(levels), params.scale_factor)
    chunks = []
    for lev, ((s, im), quota) in enumerate(zip(levels, quotas)):
        sub, r, xs, ys = _detect_level(im, params, quota)
        if len(r) == 0:
            continue
        theta = _orientation(im, xs, ys)
        smooth = ndimage.gaussian_filter(im, 2.0, mode="nearest")
        desc = _describe(smooth, xs, ys, theta)
        xy0 = (sub + 0.5) * s - 0.5
        chunks.append((xy0, np.full(len(r), (2 * PATCH_RADIUS + 1) * s), theta, r, desc, np.full(len(r), lev)))
    if not chunks:
        return FeatureSet.empty()
    xy, scale, theta, resp, desc, lev = (np.concatenate(c) for c in zip(*chunks))
    order = np.lexsort((xy[:, 0], xy[:, 1], lev, -resp))[: params.max_keypoints]
    return FeatureSet(
        xy=xy[order].astype(np.float32),
        scale=scale[order].astype(np.float32),
        orientation=np.mod(theta[order].astype(np.float32), np.float32(2 * np.pi)),
        response=resp[order].astype(np.float32),
        descriptors=np.ascontiguousarray(desc[order], dtype=np.uint8),
    )


def unpack_bits(desc: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.asarray(desc, dtype=np.uint8), axis=1).astype(np.float32)


def _gram_operands(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # left [x, |x|, 1] and right [-2y, 1, |y|] so one product gives |x|+|y|-2x.y
    n = bits.sum(axis=1, keepdims=True)
    one = np.ones_like(n)
    return np.hstack([bits, n, one]), np.hstack([-2.0 * bits, one, n])


def _hamming_float(a, b) -> np.ndarray:
    la = a._gram_operands[0] if isinstance(a, FeatureSet) else _gram_operands(unpack_bits(a))[0]
    rb = b._gram_operands[1] if isinstance(b, FeatureSet) else _gram_operands(unpack_bits(b))[1]
    return la @ rb.T


def hamming_distances(a, b) -> np.ndarray:
    """All-pairs Hamming distance between 256-bit descriptors.

    Uses |x ^ y| = |x| + |y| - 2 x.y on unpacked bits, so the heavy lifting
    is one float32 matrix product; every term is a small integer, so the
    float32 result is exact.
    """
    return _hamming_float(a, b).astype(np.int32)


@dataclass(frozen=True, eq=False)
class Matches:
    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.idx_a)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))

    def points(self, fa: FeatureSet, fb: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
        return fa.xy[self.idx_a].astype(float), fb.xy[self.idx_b].astype(float)


def _nearest_two(d: np.ndarray, axis: int = 1):
    """Index and distance of the nearest and second-nearest along ``axis``.

    ``d`` is float and is modified temporarily, then restored.
    """
    nn = np.argmin(d, axis=axis)
    other = np.arange(len(nn))
    idx = (other, nn) if axis == 1 else (nn, other)
    d1 = d[idx]
    if d.shape[axis] < 2:
        return nn, d1, np.full(len(nn), np.inf)
    d[idx] = np.inf
    d2 = d.min(axis=axis)
    d[idx] = d1
    return nn, d1, d2


def match_descriptors(a, b, ratio: float = 0.8, cross_check: bool = True) -> Matches:
    """Ratio-tested, optionally mutually consistent nearest-neighbour matches.

    With ``cross_check`` the ratio test is applied from both sides, which
    makes the result symmetric in ``a`` and ``b``.  Sorted by ascending
    distance, then by index in ``a``.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    if not isinstance(a, FeatureSet):
        a = np.asarray(a, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if not isinstance(b, FeatureSet):
        b = np.asarray(b, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if len(a) == 0 or len(b) == 0:
        z = np.zeros(0, dtype=np.int64)
        return Matches(z, z, z)
    d = _hamming_float(a, b)
    nn_ab, d1, d2 = _nearest_two(d)
    keep = d1 < ratio * d2
    if cross_check:
        nn_ba, e1, e2 = _nearest_two(d, axis=0)
        back_ok = e1 < ratio * e2
        keep &= (nn_ba[nn_ab] == np.arange(len(a))) & back_ok[nn_ab]
    ia = np.nonzero(keep)[0]
    ib = nn_ab[ia]
    dist = d1[ia].astype(np.int64)
    order = np.lexsort((ia, dist))
    return Matches(ia[order].astype(np.int64), ib[order].astype(np.int64), dist[order])


def match_score(fa: FeatureSet, fb: FeatureSet, ratio: float = 0.8) -> int:
    return len(match_descriptors(fa, fb, ratio))
