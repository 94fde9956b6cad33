"""Planar projective geometry: homography fitting, robust estimation and transforms.

Points are handled as ``(N, 2)`` float arrays in image pixel coordinates
(origin top-left, y down).  Homographies are plain ``(3, 3)`` arrays kept in a
canonical scale: unit Frobenius norm with a non-negative lower-right entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InvertedBox,
    NoConsensus,
    PointAtInfinity,
    TooFewPoints,
)

W_EPS = 1e-12
# relative singular-value floor below which the design matrix is rank deficient
RANK_TOL = 1e-9


class Point2(NamedTuple):
    x: float
    y: float


class Correspondence(NamedTuple):
    src: Point2
    dst: Point2
    distance: int = 0


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; ``(x_min, y_min)`` is the upper-left corner."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvertedBox(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvertedBox(f"box must satisfy x_min < x_max and y_min < y_max, got {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point2:
        return Point2(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def corners(self) -> np.ndarray:
        return np.array(
            [
                [self.x_min, self.y_min],
                [self.x_max, self.y_min],
                [self.x_max, self.y_max],
                [self.x_min, self.y_max],
            ]
        )

    def contains(self, p) -> bool:
        # strict inequalities: points on the border are outside
        x, y = p
        return self.x_min < x < self.x_max and self.y_min < y < self.y_max

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def clip(self, width: float, height: float) -> "BoundingBox | None":
        """Intersect with the image rectangle; ``None`` if nothing is left."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def as_list(self) -> list[float]:
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)


def normalize_homography(h) -> np.ndarray:
    """Scale ``h`` to unit Frobenius norm with ``h[2, 2] >= 0``."""
    h = np.asarray(h, dtype=float)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    norm = np.linalg.norm(h)
    if not np.isfinite(norm) or norm == 0:
        raise DegenerateConfiguration("zero or non-finite homography")
    h = h / norm
    pivot = h[2, 2]
    if pivot == 0:
        # fall back to the largest-magnitude entry for a stable sign
        pivot = h.flat[np.argmax(np.abs(h))]
    if pivot < 0:
        h = -h
    return h


def invert_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if abs(np.linalg.det(h)) < 1e-15:
        raise DegenerateConfiguration("homography is singular")
    return normalize_homography(np.linalg.inv(h))


def hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean radius sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateConfiguration("points are coincident")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _as_points(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"{name} must have shape (N, 2), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return a


def _split_correspondences(src, dst=None):
    if dst is None:
        # a sequence of Correspondence records
        items = list(src)
        src = [c.src for c in items]
        dst = [c.dst for c in items]
    src = _as_points(src if len(src) else np.zeros((0, 2)), "src")
    dst = _as_points(dst if len(dst) else np.zeros((0, 2)), "dst")
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same length")
    return src, dst


def _design_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """DLT rows for y ~ H x; works on (..., N, 2) stacks."""
    shape = x.shape[:-1]
    zeros = np.zeros(shape)
    ones = np.ones(shape)
    u, v = x[..., 0], x[..., 1]
    up, vp = y[..., 0], y[..., 1]
    r1 = np.stack([-u, -v, -ones, zeros, zeros, zeros, up * u, up * v, up], axis=-1)
    r2 = np.stack([zeros, zeros, zeros, -u, -v, -ones, vp * u, vp * v, vp], axis=-1)
    a = np.stack([r1, r2], axis=-2)  # (..., N, 2, 9)
    return a.reshape(*shape[:-1], 2 * shape[-1], 9)


def estimate_homography_dlt(src, dst=None) -> np.ndarray:
    """Normalized DLT fit of ``H`` with ``dst ~ H @ src``.

    ``src``/``dst`` are ``(N, 2)`` arrays; alternatively pass a single
    sequence of :class:`Correspondence`.  Needs at least four points in
    general position.
    """
    src, dst = _split_correspondences(src, dst)
    n = len(src)
    if n < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")
    t_src = hartley_normalization(src)
    t_dst = hartley_normalization(dst)
    xs = apply_homography(t_src, src)
    ys = apply_homography(t_dst, dst)
    a = _design_matrix(xs, ys)
    _, s, vt = np.linalg.svd(a, full_matrices=len(a) < 9)
    # rank 8 is required for a unique null vector
    if s[7] <= RANK_TOL * s[0]:
        raise DegenerateConfiguration("design matrix is rank deficient (collinear or coincident points)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(np.linalg.det(normalize_homography(h))) < 1e-12:
        raise DegenerateConfiguration("fitted homography is singular")
    return normalize_homography(h)


def apply_homography(h, pts) -> np.ndarray:
    """Vectorized point transform; returns NaN rows where ``w'`` vanishes."""
    h = np.asarray(h, dtype=float)
    pts = np.asarray(pts, dtype=float)
    # h may be a stack (..., 3, 3) broadcasting against pts (..., N, 2)
    h = h[..., None, :, :] if h.ndim > 2 else h
    w = pts[..., 0] * h[..., 2, 0] + pts[..., 1] * h[..., 2, 1] + h[..., 2, 2]
    x = pts[..., 0] * h[..., 0, 0] + pts[..., 1] * h[..., 0, 1] + h[..., 0, 2]
    y = pts[..., 0] * h[..., 1, 0] + pts[..., 1] * h[..., 1, 1] + h[..., 1, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.stack([x / w, y / w], axis=-1)
    out[np.abs(w) < W_EPS] = np.nan
    return out


def transform_point(h, p) -> Point2:
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"non-finite point {p!r}")
    h = np.asarray(h, dtype=float)
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if abs(w) < W_EPS:
        raise PointAtInfinity(f"point {p!r} maps to the line at infinity")
    return Point2(
        (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w,
        (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w,
    )


def transform_box(h, box: BoundingBox) -> BoundingBox:
    """Axis-aligned hull of the four transformed corners."""
    pts = np.array([transform_point(h, c) for c in box.corners()])
    return BoundingBox(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def symmetric_transfer_error(h, src, dst, h_inv=None) -> np.ndarray:
    """Per-correspondence RMS of forward and backward transfer distances."""
    if h_inv is None:
        h_inv = np.linalg.inv(h)
    fwd = ((apply_homography(h, src) - dst) ** 2).sum(axis=-1)
    bwd = ((apply_homography(h_inv, dst) - src) ** 2).sum(axis=-1)
    err = np.sqrt(0.5 * (fwd + bwd))
    return np.where(np.isfinite(err), err, np.inf)


def reprojection_rms(h, src, dst) -> float:
    d = apply_homography(h, src) - np.asarray(dst, dtype=float)
    return float(np.sqrt((d**2).sum(axis=1).mean()))


@dataclass(frozen=True)
class RansacParams:
    inlier_threshold_px: float = 3.0
    max_iterations: int = 2000
    confidence: float = 0.995
    min_inliers: int = 15
    seed: int = 0
    batch_size: int = 64


def _batched_minimal_fits(src4: np.ndarray, dst4: np.ndarray) -> np.ndarray:
    """Unnormalized 4-point DLT on (B, 4, 2) stacks, conditioned per sample."""
    def cond(p):
        c = p.mean(axis=1, keepdims=True)
        d = np.sqrt(((p - c) ** 2).sum(axis=2)).mean(axis=1)
        s = math.sqrt(2.0) / np.maximum(d, 1e-12)
        t = np.zeros((len(p), 3, 3))
        t[:, 0, 0] = s
        t[:, 1, 1] = s
        t[:, 0, 2] = -s * c[:, 0, 0]
        t[:, 1, 2] = -s * c[:, 0, 1]
        t[:, 2, 2] = 1.0
        return t, (p - c) * s[:, None, None]

    ts, xs = cond(src4)
    td, ys = cond(dst4)
    a = _design_matrix(xs, ys)  # (B, 8, 9)
    _, _, vt = np.linalg.svd(a)
    hn = vt[:, -1, :].reshape(-1, 3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return h / np.linalg.norm(h, axis=(1, 2), keepdims=True)


def _collinear_any(p: np.ndarray, tol: float) -> np.ndarray:
    """True where any 3 of the 4 points in each (B, 4, 2) sample are near-collinear."""
    out = np.zeros(len(p), dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a = p[:, j] - p[:, i]
        b = p[:, k] - p[:, i]
        area = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        scale = np.maximum((a**2).sum(1), (b**2).sum(1))
        out |= area <= tol * np.maximum(scale, 1e-300)
    return out


def _required_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    if inlier_ratio <= 0:
        return cap
    p_good = inlier_ratio**4
    if p_good >= 1.0:
        return 1
    n = math.log(1.0 - confidence) / math.log(1.0 - p_good)
    return int(min(cap, math.ceil(n)))


def estimate_homography_ransac(src, dst=None, params: RansacParams | None = None, **overrides):
    """Robust homography with dst ~ H @ src.

    Minimal four-point hypotheses are scored by symmetric transfer error; the
    winner is refit by DLT on its inliers.  Returns ``(H, inlier_mask)``.
    """
    params = params or RansacParams()
    if overrides:
        params = RansacParams(**{**params.__dict__, **overrides})
    src, dst = _split_correspondences(src, dst)
    n = len(src)
    if n < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")
    need = max(4, params.min_inliers)
    if n < need:
        raise NoConsensus(f"{n} correspondences cannot reach {need} inliers")

    rng = np.random.default_rng(params.seed)
    thr = params.inlier_threshold_px
    best_count, best_mask, best_err = -1, None, np.inf
    budget = params.max_iterations
    done = 0
    while done < budget:
        b = min(params.batch_size, budget - done)
        idx = np.argpartition(rng.random((b, n)), 3, axis=1)[:, :4]
        done += b
        s4, d4 = src[idx], dst[idx]
        ok = ~(_collinear_any(s4, 1e-6) | _collinear_any(d4, 1e-6))
        if not ok.any():
            continue
        hs = _batched_minimal_fits(s4[ok], d4[ok])
        det = np.linalg.det(hs)
        hs = hs[np.abs(det) > 1e-12]
        if len(hs) == 0:
            continue
        hinv = np.linalg.inv(hs)
        fwd = apply_homography(hs, src[None])
        bwd = apply_homography(hinv, dst[None])
        err = np.sqrt(0.5 * (((fwd - dst) ** 2).sum(-1) + ((bwd - src) ** 2).sum(-1)))
        err = np.where(np.isfinite(err), err, np.inf)
        inl = err < thr
        counts = inl.sum(axis=1)
        # tie-break on summed truncated error so the choice is stable
        cost = np.where(inl, err, thr).sum(axis=1)
        for k in np.lexsort((cost, -counts))[:1]:
            if counts[k] > best_count or (counts[k] == best_count and cost[k] < best_err):
                best_count, best_mask, best_err = int(counts[k]), inl[k].copy(), float(cost[k])
        if best_count > 0:
            budget = min(budget, max(done, _required_iterations(best_count / n, params.confidence, params.max_iterations)))

    if best_mask is None or best_count < need:
        raise NoConsensus(f"best consensus {max(best_count, 0)} < required {need}")

    mask = best_mask
    h = estimate_homography_dlt(src[mask], dst[mask])
    for _ in range(3):
        new_mask = symmetric_transfer_error(h, src, dst) < thr
        if new_mask.sum() < need or np.array_equal(new_mask, mask) or new_mask.sum() < mask.sum():
            break
        mask = new_mask
        h = estimate_homography_dlt(src[mask], dst[mask])
    return h, mask
