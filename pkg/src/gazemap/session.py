"""Test-phase pipeline: gaze ingestion, frame sync, localization, dwells, fixations."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    FrameSetError,
    GazeLogError,
    GazemapError,
    MalformedRow,
    NoHomography,
    NonMonotonicTimestamp,
    PointAtInfinity,
)
from .features import FeatureParams, FeatureSet, detect_and_describe
from .geometry import BoundingBox, Point2, RansacParams, apply_homography, transform_point
from .imaging import check_image, load_image, thumbnail_signature
from .registry import CameraPose, LinkParams, Registry, link_images, top_k_by_signature

GAZE_HEADER = ["t_ms", "x_px", "y_px", "valid"]
DEFAULT_FPS = 25.0
DEFAULT_GAZE_PERIOD_MS = 10.0
MIN_DWELL_MS = 240.0


class GazeSample(NamedTuple):
    t: float
    gaze: Point2
    valid: bool


@dataclass(frozen=True, eq=False)
class GazeLog:
    """Column-wise gaze samples; ``t`` strictly increasing (ms)."""

    t: np.ndarray
    xy: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[GazeSample]:
        for t, (x, y), v in zip(self.t.tolist(), self.xy.tolist(), self.valid.tolist()):
            yield GazeSample(t, Point2(x, y), v)

    def __getitem__(self, i) -> GazeSample:
        return GazeSample(float(self.t[i]), Point2(float(self.xy[i, 0]), float(self.xy[i, 1])), bool(self.valid[i]))

    @property
    def span_ms(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0

    @property
    def period_ms(self) -> float:
        if len(self.t) < 2:
            return DEFAULT_GAZE_PERIOD_MS
        return float(np.median(np.diff(self.t)))


def ingest_gaze_log(path) -> GazeLog:
    """Parse a ``t_ms,x_px,y_px,valid`` CSV; invalid rows are kept but flagged."""
    ts, xs, ys, vs = [], [], [], []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise GazeLogError(f"cannot read gaze log {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise GazeLogError(f"{path}: empty gaze log")
        if [h.strip() for h in header] != GAZE_HEADER:
            raise MalformedRow(1, f"expected header {','.join(GAZE_HEADER)}")
        prev = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(lineno, f"expected 4 fields, got {len(row)}")
            try:
                t = int(row[0])
                x, y = float(row[1]), float(row[2])
                v = int(row[3])
            except ValueError as exc:
                raise MalformedRow(lineno, str(exc)) from exc
            if v not in (0, 1):
                raise MalformedRow(lineno, "valid must be 0 or 1")
            if v == 1 and not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedRow(lineno, "non-finite gaze on a valid row")
            if t <= prev:
                raise NonMonotonicTimestamp(lineno)
            prev = t
            ts.append(t)
            xs.append(x)
            ys.append(y)
            vs.append(v == 1)
    if not ts:
        raise GazeLogError(f"{path}: gaze log has no samples")
    return GazeLog(np.array(ts, dtype=np.int64), np.column_stack([xs, ys]).astype(float), np.array(vs, dtype=bool))


def write_gaze_log(path, log: GazeLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAZE_HEADER)
        for t, (x, y), v in zip(log.t.tolist(), log.xy.tolist(), log.valid.tolist()):
            w.writerow([int(t), f"{x:.3f}", f"{y:.3f}", int(v)])


# --- frames ------------------------------------------------------------------

@dataclass(frozen=True)
class TestFrame:
    __test__ = False  # not a pytest class

    index: int
    t: float
    img: np.ndarray


@dataclass(frozen=True)
class FrameSet:
    """Numbered frames on disk plus their ``frames.json`` metadata."""

    directory: Path
    fps: float
    count: int
    width: int
    height: int
    pattern: str = "frame_{:06d}.png"

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.fps

    def time(self, index: int) -> float:
        return index * self.period_ms

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> TestFrame:
        if not 0 <= index < self.count:
            raise IndexError(index)
        img = load_image(self.directory / self.pattern.format(index))
        if img.shape != (self.height, self.width):
            raise FrameSetError(f"frame {index} is {img.shape[1]}x{img.shape[0]}, expected {self.width}x{self.height}")
        return TestFrame(index, self.time(index), img)

    def __iter__(self) -> Iterator[TestFrame]:
        for i in range(self.count):
            yield self[i]


def load_frames(directory) -> FrameSet:
    d = Path(directory)
    meta_path = d / "frames.json"
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FrameSetError(f"cannot read {meta_path}: {exc}") from exc
    try:
        fs = FrameSet(d, float(meta["fps"]), int(meta["count"]), int(meta["width"]), int(meta["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FrameSetError(f"{meta_path}: needs fps, count, width, height") from exc
    if fs.fps <= 0 or fs.count < 1:
        raise FrameSetError(f"{meta_path}: fps must be > 0 and count >= 1")
    missing = [i for i in range(fs.count) if not (d / fs.pattern.format(i)).is_file()]
    if missing:
        raise FrameSetError(f"missing frame files, first: {fs.pattern.format(missing[0])}")
    return fs


def write_frames(directory, frames: Sequence[np.ndarray], fps: float = DEFAULT_FPS) -> Path:
    from .imaging import save_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = frames[0].shape
    for i, img in enumerate(frames):
        save_image(d / f"frame_{i:06d}.png", img)
    meta = {"fps": fps, "count": len(frames), "width": w, "height": h}
    (d / "frames.json").write_text(json.dumps(meta, indent=2) + "\n")
    return d


# --- synchronisation -----------------------------------------------------------

def sync_gaze_to_frames(gaze: GazeLog, frame_times, slack_ms: float = 30.0) -> np.ndarray:
    """Index of the nearest valid gaze sample per frame, -1 where gaze is missing.

    Ties go to the earlier sample; samples farther than ``slack_ms`` from the
    frame timestamp do not count.
    """
    frame_times = np.asarray(frame_times, dtype=float)
    valid_idx = np.nonzero(gaze.valid)[0]
    out = np.full(len(frame_times), -1, dtype=np.int64)
    if len(valid_idx) == 0 or len(frame_times) == 0:
        return out
    vt = gaze.t[valid_idx].astype(float)
    right = np.searchsorted(vt, frame_times, side="left")
    left = right - 1
    right_c = np.clip(right, 0, len(vt) - 1)
    left_c = np.clip(left, 0, len(vt) - 1)
    d_right = np.where(right < len(vt), vt[right_c] - frame_times, np.inf)
    d_left = np.where(left >= 0, frame_times - vt[left_c], np.inf)
    pick = np.where(d_left <= d_right, left_c, right_c)
    dist = np.minimum(d_left, d_right)
    ok = dist <= slack_ms
    out[ok] = valid_idx[pick[ok]]
    return out


# --- localization ----------------------------------------------------------------

@dataclass(frozen=True)
class LocalizeParams:
    top_k: int = 5
    min_inliers: int = 15
    ratio: float = 0.8
    ransac: RansacParams = RansacParams()
    features: FeatureParams = FeatureParams()

    def link(self) -> LinkParams:
        return LinkParams(self.min_inliers, self.top_k, self.ratio, self.ransac)


@dataclass(frozen=True)
class FrameObservation:
    index: int
    t: float = 0.0
    ref_id: str | None = None
    h: np.ndarray | None = None  # frame pixels -> reference pixels
    inliers: int = 0
    gaze_fpv: Point2 | None = None
    gaze_ref: Point2 | None = None
    hit_aoi: str | None = None
    worker_pos: CameraPose | None = None

    @property
    def localized(self) -> bool:
        return self.ref_id is not None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "t_ms": self.t,
            "ref_id": self.ref_id,
            "inliers": self.inliers,
            "h": None if self.h is None else [[float(v) for v in row] for row in self.h],
            "gaze_fpv": None if self.gaze_fpv is None else [float(self.gaze_fpv.x), float(self.gaze_fpv.y)],
            "gaze_ref": None if self.gaze_ref is None else [float(self.gaze_ref.x), float(self.gaze_ref.y)],
            "hit_aoi": self.hit_aoi,
            "worker_pos": None if self.worker_pos is None else self.worker_pos.to_dict(),
        }


def localize_frame(reg: Registry, frame, params: LocalizeParams | None = None,
                   features: FeatureSet | None = None) -> FrameObservation:
    """Match one test frame against its signature-nearest references.

    The reference with most RANSAC inliers wins (ties: lower id); below
    ``min_inliers`` the observation is left unlocalized.
    """
    params = params or LocalizeParams()
    img = check_image(frame.img)
    feats = features if features is not None else detect_and_describe(img, params.features)
    obs = FrameObservation(frame.index, frame.t)
    if len(feats) < 4:
        return obs
    link = params.link()
    best = None
    for ref in top_k_by_signature(thumbnail_signature(img), list(reg.images), params.top_k):
        # a candidate only matters if it can still beat (or tie, with a lower id) the best
        need = 0 if best is None else best[0] + (0 if ref.id < best[1].id else 1)
        h, n = link_images(feats, ref.features, link, min_matches=need)
        if h is None:
            continue
        if best is None or n > best[0] or (n == best[0] and ref.id < best[1].id):
            best = (n, ref, h)
    if best is None:
        return obs
    n, ref, h = best
    return replace(obs, ref_id=ref.id, h=h, inliers=n, worker_pos=ref.pose)


def map_gaze(obs: FrameObservation, gaze_fpv) -> Point2:
    if obs.h is None:
        raise NoHomography(f"frame {obs.index} has no homography")
    return transform_point(obs.h, gaze_fpv)


def hit_test(p, aois: dict) -> str | None:
    """AOI id whose box strictly contains ``p``; smallest box, then lowest id, wins."""
    hits = [(box.area, aoi_id) for aoi_id, box in aois.items() if box.contains(p)]
    return min(hits)[1] if hits else None


# --- dwell and fixation detection ----------------------------------------------

@dataclass(frozen=True)
class AoiDwell:
    aoi_id: str
    start: float
    end: float
    duration: float

    def to_dict(self) -> dict:
        return {"aoi_id": self.aoi_id, "start_ms": self.start, "end_ms": self.end, "duration_ms": self.duration}


def detect_aoi_dwells(hits: Sequence[str | None], frame_period_ms: float = 1000.0 / DEFAULT_FPS,
                      min_dwell_ms: float = MIN_DWELL_MS, t0: float = 0.0) -> list[AoiDwell]:
    """Maximal same-AOI frame runs lasting at least ``min_dwell_ms``.

    A run of n frames lasts ``n * frame_period_ms``; ``None`` entries
    (no hit, gaze missing, unlocalized) break runs.
    """
    dwells = []
    run_id, run_start = None, 0
    for i, h in enumerate(list(hits) + [None]):
        if h != run_id:
            if run_id is not None:
                n = i - run_start
                duration = n * frame_period_ms
                if duration >= min_dwell_ms - 1e-9:
                    start = t0 + run_start * frame_period_ms
                    dwells.append(AoiDwell(run_id, start, start + duration, duration))
            run_id, run_start = h, i
    return dwells


@dataclass(frozen=True)
class Fixation:
    start: float
    end: float
    centroid: Point2
    ref_id: str | None = None  # coordinate frame of the centroid; None = FPV
    aoi_id: str | None = None

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_dict(self) -> dict:
        return {
            "start_ms": self.start,
            "end_ms": self.end,
            "duration_ms": self.duration,
            "centroid": [float(self.centroid.x), float(self.centroid.y)],
            "ref_id": self.ref_id,
            "aoi_id": self.aoi_id,
        }


def detect_fixations(t, xy, dispersion_px: float = 25.0, min_duration_ms: float = 100.0,
                     sample_period_ms: float = DEFAULT_GAZE_PERIOD_MS, segments=None) -> list[Fixation]:
    """Dispersion-threshold (I-DT) fixation identification.

    A window grows while (max x - min x) + (max y - min y) stays within
    ``dispersion_px``.  It is emitted when ``E - S >= min_duration_ms`` with
    S the first sample time and E the last sample time plus one period.
    Windows never span a gap longer than two sample periods or a change of
    ``segments`` label (used for the coordinate frame of each sample).
    Non-finite samples are dropped and so act as gaps.
    """
    t = np.asarray(t, dtype=float)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    seg = list(segments) if segments is not None else [None] * len(t)
    keep = np.isfinite(xy).all(axis=1) & np.isfinite(t)
    if not keep.all():
        t, xy = t[keep], xy[keep]
        seg = [s for s, k in zip(seg, keep) if k]
    n = len(t)
    out = []
    i = 0
    max_gap = 2.0 * sample_period_ms + 1e-9
    while i < n:
        x0 = x1 = xy[i, 0]
        y0 = y1 = xy[i, 1]
        j = i + 1
        while j < n and seg[j] == seg[i] and t[j] - t[j - 1] <= max_gap:
            nx0, nx1 = min(x0, xy[j, 0]), max(x1, xy[j, 0])
            ny0, ny1 = min(y0, xy[j, 1]), max(y1, xy[j, 1])
            if (nx1 - nx0) + (ny1 - ny0) > dispersion_px:
                break
            x0, x1, y0, y1 = nx0, nx1, ny0, ny1
            j += 1
        start, end = t[i], t[j - 1] + sample_period_ms
        if end - start >= min_duration_ms - 1e-9:
            c = xy[i:j].mean(axis=0)
            out.append(Fixation(float(start), float(end), Point2(float(c[0]), float(c[1])), seg[i]))
            i = j
        else:
            i += 1
    return out


# --- full session ------------------------------------------------------------------

@dataclass(frozen=True)
class SessionParams:
    localize: LocalizeParams = LocalizeParams()
    sync_slack_ms: float = 30.0
    min_dwell_ms: float = MIN_DWELL_MS
    dispersion_px: float = 25.0
    min_fixation_ms: float = 100.0
    seed: int = 0

    def to_dict(self) -> dict:
        lp = self.localize
        return {
            "localize": {
                "top_k": lp.top_k,
                "min_inliers": lp.min_inliers,
                "ratio": lp.ratio,
                "ransac": dict(lp.ransac.__dict__),
                "features": lp.features.to_dict(),
            },
            "sync_slack_ms": self.sync_slack_ms,
            "min_dwell_ms": self.min_dwell_ms,
            "dispersion_px": self.dispersion_px,
            "min_fixation_ms": self.min_fixation_ms,
            "seed": self.seed,
        }


@dataclass
class AttentionRecord:
    observations: list
    fixations: list
    dwells: list
    trajectory: list  # (t_ms, CameraPose)
    span_ms: float
    frame_period_ms: float
    aoi_ids: list = field(default_factory=list)

    @property
    def hits(self) -> list:
        return [o.hit_aoi for o in self.observations]

    @property
    def n_localized(self) -> int:
        return sum(o.localized for o in self.observations)


def run_session(reg: Registry, gaze, frames, params: SessionParams | None = None) -> AttentionRecord:
    """Localize every frame, map gaze, then fold dwells and fixations over time.

    ``gaze`` is a :class:`GazeLog` or a CSV path; ``frames`` is a
    :class:`FrameSet`, a frames directory, or a sequence of :class:`TestFrame`.
    """
    params = params or SessionParams()
    if not isinstance(gaze, GazeLog):
        gaze = ingest_gaze_log(gaze)
    if isinstance(frames, (str, Path)):
        frames = load_frames(frames)
    if isinstance(frames, FrameSet):
        period = frames.period_ms
    else:
        frames = list(frames)
        if not frames:
            raise FrameSetError("no frames")
        period = frames[1].t - frames[0].t if len(frames) > 1 else 1000.0 / DEFAULT_FPS
    lp = replace(params.localize, ransac=replace(params.localize.ransac, seed=params.seed))

    observations = []
    frame_t = []
    for fr in frames:
        observations.append(localize_frame(reg, fr, lp))
        frame_t.append(fr.t)
    frame_t = np.array(frame_t, dtype=float)
    assign = sync_gaze_to_frames(gaze, frame_t, params.sync_slack_ms)

    for k, obs in enumerate(observations):
        if assign[k] < 0:
            continue
        g = Point2(*map(float, gaze.xy[assign[k]]))
        obs = replace(obs, gaze_fpv=g)
        if obs.localized:
            try:
                p = map_gaze(obs, g)
            except PointAtInfinity:
                p = None
            if p is not None:
                obs = replace(obs, gaze_ref=p, hit_aoi=hit_test(p, reg.boxes_for(obs.ref_id)))
        observations[k] = obs

    hits = [o.hit_aoi for o in observations]
    dwells = detect_aoi_dwells(hits, period, params.min_dwell_ms, t0=float(frame_t[0]))

    fixations = _session_fixations(reg, gaze, observations, frame_t, params)
    trajectory = [(o.t, o.worker_pos) for o in observations if o.worker_pos is not None]
    return AttentionRecord(observations, fixations, dwells, trajectory, gaze.span_ms, period,
                           [a.aoi_id for a in reg.aois])


def _session_fixations(reg: Registry, gaze: GazeLog, observations, frame_t, params: SessionParams) -> list[Fixation]:
    """Fixations over valid gaze samples, each mapped through its nearest frame."""
    vidx = np.nonzero(gaze.valid)[0]
    if len(vidx) < 2:
        return []
    ts = gaze.t[vidx].astype(float)
    pts = gaze.xy[vidx].copy()
    nearest = np.clip(np.searchsorted(frame_t, ts, side="left"), 0, len(frame_t) - 1)
    prev = np.clip(nearest - 1, 0, len(frame_t) - 1)
    nearest = np.where(np.abs(frame_t[prev] - ts) <= np.abs(frame_t[nearest] - ts), prev, nearest)
    seg = [None] * len(ts)
    for k, f in enumerate(nearest.tolist()):
        obs = observations[f]
        if obs.localized:
            q = apply_homography(obs.h, pts[k])
            if np.all(np.isfinite(q)):
                pts[k] = q
                seg[k] = obs.ref_id
    fixes = detect_fixations(ts, pts, params.dispersion_px, params.min_fixation_ms, gaze.period_ms, seg)
    out = []
    for f in fixes:
        aoi = hit_test(f.centroid, reg.boxes_for(f.ref_id)) if f.ref_id is not None else None
        out.append(replace(f, aoi_id=aoi))
    return out
