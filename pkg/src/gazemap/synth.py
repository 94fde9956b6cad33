"""Synthetic scenes and scripted gaze sessions with analytic ground truth.

A scene is one textured base image plus views rendered through known
homographies.  A session script (fixate / saccade / off-scene events) is
turned into FPV frames, a 100 Hz gaze log and a truth record that is derived
from the script alone, so the analysis pipeline can be checked against it.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import InvalidWarpRange, PointOutsideScene, SchemaError
from .geometry import BoundingBox, Point2, apply_homography
from .registry import CameraPose

# hazard labels of the five-AOI walkthrough layout
DEFAULT_AOIS = (
    ("H1", "Trip Hazard", (30.0, 165.0, 90.0, 212.0)),
    ("H2", "Live Electrical Wires", (40.0, 28.0, 100.0, 75.0)),
    ("H3", "Protruding Rod", (135.0, 98.0, 190.0, 145.0)),
    ("H4", "Chemical Hazard", (222.0, 30.0, 284.0, 80.0)),
    ("H5", "Electric Junction Box", (228.0, 160.0, 290.0, 210.0)),
)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 7
    width: int = 320
    height: int = 240
    texture: str = "blended"  # checker | noise | blended
    cell_px: int = 24
    n_views: int = 10
    rotation_deg: tuple = (-10.0, 10.0)
    scale: tuple = (0.9, 1.1)
    translation_px: tuple = (-16.0, 16.0)
    projective: tuple = (-2e-4, 2e-4)
    aois: tuple = DEFAULT_AOIS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aois"] = [[a, label, list(box)] for a, label, box in self.aois]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown scene fields: {sorted(unknown)}")
        for k in ("rotation_deg", "scale", "translation_px", "projective"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        if "aois" in d:
            d["aois"] = tuple((str(a), str(label), tuple(float(v) for v in box)) for a, label, box in d["aois"])
        return cls(**d)


@dataclass(frozen=True)
class View:
    id: str
    image: np.ndarray
    h: np.ndarray  # view pixels -> base pixels
    pose: CameraPose


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    base: np.ndarray
    views: tuple
    aois: dict  # aoi id -> (label, BoundingBox on base)


def make_texture(rng: np.random.Generator, height: int, width: int, kind: str = "blended", cell: int = 24) -> np.ndarray:
    if kind not in ("checker", "noise", "blended"):
        raise InvalidWarpRange(f"unknown texture kind {kind!r}")
    # cells carry random grey levels so the pattern does not repeat
    cells = rng.uniform(30.0, 225.0, size=(height // cell + 2, width // cell + 2))
    checker = np.kron(cells, np.ones((cell, cell)))[:height, :width]
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (height, width)), 2.0)
    noise *= 40.0 / noise.std()
    if kind == "checker":
        img = checker
    elif kind == "noise":
        img = 128.0 + 1.5 * noise
    else:
        img = 0.7 * checker + noise + 0.3 * 128.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _check_range(name, r, positive=False):
    if len(r) != 2 or not all(math.isfinite(v) for v in r) or r[0] > r[1]:
        raise InvalidWarpRange(f"{name} range must be finite (lo, hi) with lo <= hi, got {r}")
    if positive and r[0] <= 0:
        raise InvalidWarpRange(f"{name} range must be positive (non-invertible warp), got {r}")


def sample_warp(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    """Random view->base homography about the image centre."""
    rot = math.radians(rng.uniform(*spec.rotation_deg))
    s = rng.uniform(*spec.scale)
    tx, ty = rng.uniform(*spec.translation_px, size=2)
    g, h = rng.uniform(*spec.projective, size=2)
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    a = np.array([
        [s * math.cos(rot), -s * math.sin(rot), tx],
        [s * math.sin(rot), s * math.cos(rot), ty],
        [g, h, 1.0],
    ])
    c = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    c_inv = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    return c @ a @ c_inv


def render_view(base: np.ndarray, h: np.ndarray, shape=None) -> np.ndarray:
    """Inverse-warp ``base`` with bilinear sampling; ``h`` maps output -> base pixels."""
    rows, cols = shape or base.shape
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
    src = apply_homography(h, np.stack([xx.ravel(), yy.ravel()], axis=1))
    coords = [src[:, 1].reshape(rows, cols), src[:, 0].reshape(rows, cols)]
    out = ndimage.map_coordinates(base.astype(float), coords, order=1, mode="constant", cval=0.0)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def walk_pose(k: int) -> CameraPose:
    return CameraPose((1.5 * k, round(0.5 * math.sin(k), 6), 1.6), f"P{k:02d}")


def generate_scene(spec: SceneSpec | None = None) -> Scene:
    spec = spec or SceneSpec()
    for name in ("rotation_deg", "translation_px", "projective"):
        _check_range(name, getattr(spec, name))
    _check_range("scale", spec.scale, positive=True)
    if spec.n_views < 1 or spec.width < 32 or spec.height < 32:
        raise InvalidWarpRange("need n_views >= 1 and a base of at least 32x32")
    aois = {}
    for aoi_id, label, box in spec.aois:
        b = BoundingBox.from_list(box)
        if not b.within(spec.width, spec.height):
            raise InvalidWarpRange(f"AOI {aoi_id} lies outside the base image")
        aois[aoi_id] = (label, b)
    rng = np.random.default_rng(spec.seed)
    base = make_texture(rng, spec.height, spec.width, spec.texture, spec.cell_px)
    corners = np.array([[0, 0], [spec.width - 1, 0], [spec.width - 1, spec.height - 1], [0, spec.height - 1]], float)
    views = []
    for k in range(spec.n_views):
        h = sample_warp(rng, spec)
        w = corners @ h[2, :2] + h[2, 2]
        if abs(np.linalg.det(h)) < 1e-9 or np.any(w <= 0):
            raise InvalidWarpRange(f"view {k}: sampled warp is not invertible over the image")
        views.append(View(f"view_{k:02d}", render_view(base, h), h, walk_pose(k)))
    return Scene(spec, base, tuple(views), aois)


# --- sessions ------------------------------------------------------------------

class Event(NamedTuple):
    kind: str  # fixate | saccade | off_scene
    duration_ms: float
    point: tuple | None = None  # base-image point for fixations


@dataclass(frozen=True)
class SessionScript:
    events: tuple
    fps: float = 25.0
    gaze_hz: float = 100.0
    noise_px: float = 1.0
    frame_noise: float = 1.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["events"] = [
            {"kind": e.kind, "duration_ms": e.duration_ms, **({"point": list(e.point)} if e.point is not None else {})}
            for e in self.events
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SessionScript":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown script fields: {sorted(unknown)}")
        try:
            events = tuple(
                Event(e["kind"], float(e["duration_ms"]), tuple(float(v) for v in e["point"]) if "point" in e else None)
                for e in d.pop("events")
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad script events: {exc}") from exc
        return cls(events, **d)


@dataclass
class SyntheticSession:
    frames: list  # uint8 images
    frame_views: list  # view index per frame
    gaze_t: np.ndarray
    gaze_xy: np.ndarray
    gaze_valid: np.ndarray
    truth: dict = field(default_factory=dict)

    @property
    def frame_period_ms(self) -> float:
        return self.truth["frame_period_ms"]

    def gaze_log(self):
        from .session import GazeLog

        return GazeLog(self.gaze_t.copy(), self.gaze_xy.copy(), self.gaze_valid.copy())


def _validate_script(scene: Scene, script: SessionScript):
    if not script.events:
        raise SchemaError("script has no events")
    if script.fps <= 0 or script.gaze_hz <= 0:
        raise SchemaError("fps and gaze_hz must be positive")
    for e in script.events:
        if e.kind not in ("fixate", "saccade", "off_scene"):
            raise SchemaError(f"unknown event kind {e.kind!r}")
        if not e.duration_ms > 0:
            raise SchemaError("event durations must be > 0")
        if e.kind == "fixate":
            if e.point is None:
                raise SchemaError("fixate events need a point")
            x, y = e.point
            if not (0 <= x < scene.spec.width and 0 <= y < scene.spec.height):
                raise PointOutsideScene(f"fixation point {e.point} outside the {scene.spec.width}x{scene.spec.height} scene")


def generate_session(scene: Scene, script: SessionScript) -> SyntheticSession:
    """Render frames and gaze for ``script``; truth comes from the script alone.

    The walk advances to the next view halfway through every non-fixation
    event.  Truth dwells snap to the frame grid: they start at the first
    frame at or after the fixation onset and end at the first frame at or
    after its offset.
    """
    _validate_script(scene, script)
    rng = np.random.default_rng(script.seed)
    bounds = np.cumsum([0.0] + [e.duration_ms for e in script.events])
    total = bounds[-1]
    gaze_period = 1000.0 / script.gaze_hz
    frame_period = 1000.0 / script.fps
    n_views = len(scene.views)

    # view changes at the middle of saccades / off-scene stretches
    switch_times = [0.5 * (bounds[i] + bounds[i + 1]) for i, e in enumerate(script.events) if e.kind != "fixate"]

    def view_at(t: float) -> int:
        return int(np.searchsorted(switch_times, t, side="right")) % n_views

    fix_points = [(i, np.array(e.point, float)) for i, e in enumerate(script.events) if e.kind == "fixate"]

    def neighbours(i):
        before = [p for j, p in fix_points if j < i]
        after = [p for j, p in fix_points if j > i]
        return (before[-1] if before else None), (after[0] if after else None)

    n_samples = int(math.ceil(total / gaze_period - 1e-9))
    gt = np.round(np.arange(n_samples) * gaze_period, 6)
    gxy = np.zeros((n_samples, 2))
    gvalid = np.zeros(n_samples, dtype=bool)
    ev_idx = np.searchsorted(bounds, gt, side="right") - 1
    for i, e in enumerate(script.events):
        members = np.nonzero(ev_idx == i)[0]
        if len(members) == 0:
            continue
        if e.kind == "fixate":
            base_pts = np.repeat(np.array(e.point, float)[None], len(members), axis=0)
        elif e.kind == "saccade":
            a, b = neighbours(i)
            if a is None and b is None:
                continue
            a = b if a is None else a
            b = a if b is None else b
            frac = (np.arange(len(members)) + 1.0) / (len(members) + 1.0)
            base_pts = a[None] + frac[:, None] * (b - a)[None]
        else:
            continue
        for k, s in enumerate(members):
            v = scene.views[view_at(gt[s])]
            gxy[s] = apply_homography(np.linalg.inv(v.h), base_pts[k])
        gvalid[members] = True
    noise = rng.normal(0.0, script.noise_px, size=gxy.shape)
    gxy[gvalid] += noise[gvalid]

    n_frames = int(math.ceil(total / frame_period - 1e-9))
    frame_views = [view_at(i * frame_period) for i in range(n_frames)]
    frames = []
    for vi in frame_views:
        img = scene.views[vi].image.astype(float)
        if script.frame_noise > 0:
            img = img + rng.normal(0.0, script.frame_noise, size=img.shape)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))

    truth = script_truth(scene, script)
    truth["frame_views"] = [scene.views[v].id for v in frame_views]
    truth["n_frames"] = n_frames
    truth["n_samples"] = n_samples
    truth["span_ms"] = float(gt[-1] - gt[0]) if n_samples else 0.0
    return SyntheticSession(frames, frame_views, gt, gxy, gvalid, truth)


def script_truth(scene: Scene, script: SessionScript, min_dwell_ms: float = 240.0) -> dict:
    """Fixations, frame-snapped dwells and metrics implied by the script."""
    from .metrics import compute_metrics
    from .session import AoiDwell, Fixation, hit_test

    frame_period = 1000.0 / script.fps
    gaze_period = 1000.0 / script.gaze_hz
    boxes = {a: box for a, (_, box) in scene.aois.items()}
    t = 0.0
    fixations, dwells = [], []
    per_aoi = {a: 0.0 for a in scene.aois}
    for e in script.events:
        t0, t1 = t, t + e.duration_ms
        t = t1
        if e.kind != "fixate":
            continue
        aoi = hit_test(e.point, boxes)
        fixations.append(Fixation(t0, t1, Point2(*e.point), "base", aoi))
        if aoi is None:
            continue
        per_aoi[aoi] += e.duration_ms
        start = math.ceil(t0 / frame_period - 1e-9) * frame_period
        end = math.ceil(t1 / frame_period - 1e-9) * frame_period
        if end - start >= min_dwell_ms - 1e-9:
            dwells.append(AoiDwell(aoi, start, end, end - start))
    n_samples = int(math.ceil(t / gaze_period - 1e-9))
    span = (n_samples - 1) * gaze_period
    report = compute_metrics(fixations, dwells, span)
    return {
        "frame_period_ms": frame_period,
        "fixations": [f.to_dict() for f in fixations],
        "dwells": [d.to_dict() for d in dwells],
        "aoi_fixation_ms": per_aoi,
        "metrics": report.to_dict(),
    }


# --- ready-made specs -----------------------------------------------------------

def _centre(box) -> tuple:
    x0, y0, x1, y1 = box
    return (0.5 * (x0 + x1), 0.5 * (y0 + y1))


def default_script(scene_spec: SceneSpec | None = None, seed: int = 0) -> SessionScript:
    """A short walk with one dwell on each AOI and three off-target fixations."""
    spec = scene_spec or SceneSpec()
    c = {a: _centre(box) for a, _, box in spec.aois}
    ev = [
        Event("fixate", 400, c["H1"]),
        Event("saccade", 80),
        Event("fixate", 320, (160.0, 40.0)),
        Event("saccade", 80),
        Event("fixate", 480, c["H2"]),
        Event("saccade", 120),
        Event("fixate", 360, c["H3"]),
        Event("saccade", 80),
        Event("fixate", 280, (150.0, 210.0)),
        Event("saccade", 80),
        Event("fixate", 520, c["H4"]),
        Event("off_scene", 200),
        Event("fixate", 440, c["H5"]),
        Event("saccade", 80),
        Event("fixate", 320, (200.0, 125.0)),
        Event("saccade", 80),
        Event("fixate", 400, c["H1"]),
        Event("saccade", 120),
        Event("fixate", 360, c["H4"]),
    ]
    return SessionScript(tuple(ev), seed=seed)


def case_study_script(scene_spec: SceneSpec | None = None, seed: int = 0) -> SessionScript:
    """18.2 s walk whose per-AOI fixation totals are 900/235/257/1148/1270 ms."""
    spec = scene_spec or SceneSpec()
    c = {a: _centre(box) for a, _, box in spec.aois}
    rng = np.random.default_rng(seed + 1)
    on_target = [("H1", 500), ("H4", 600), ("H2", 235), ("H5", 700), ("H1", 400),
                 ("H3", 257), ("H4", 548), ("H5", 570)]
    events = []
    elapsed = 0.0
    slots = 33
    target_at = set(np.linspace(1, slots - 2, len(on_target)).round().astype(int).tolist())
    queue = list(on_target)
    for k in range(slots):
        if k in target_at and queue:
            aoi, dur = queue.pop(0)
            events.append(Event("fixate", float(dur), c[aoi]))
        else:
            # off-target points stay clear of every AOI box
            while True:
                p = (float(rng.uniform(10, spec.width - 10)), float(rng.uniform(10, spec.height - 10)))
                if not any(box[0] - 15 < p[0] < box[2] + 15 and box[1] - 15 < p[1] < box[3] + 15 for _, _, box in spec.aois):
                    break
            events.append(Event("fixate", 170.0, p))
        elapsed += events[-1].duration_ms
        if k < slots - 1:
            events.append(Event("saccade", 280.0))
            elapsed += 280.0
    events.append(Event("off_scene", 18200.0 - elapsed))
    return SessionScript(tuple(events), seed=seed)


def default_spec() -> dict:
    scene = SceneSpec()
    return {"scene": scene.to_dict(), "script": default_script(scene).to_dict()}


def case_study_spec() -> dict:
    scene = SceneSpec()
    return {"scene": scene.to_dict(), "script": case_study_script(scene).to_dict()}


def parse_spec(d: dict) -> tuple[SceneSpec, SessionScript]:
    if not isinstance(d, dict):
        raise SchemaError("spec must be a JSON object")
    scene = SceneSpec.from_dict(d.get("scene", {}))
    script = SessionScript.from_dict(d["script"]) if "script" in d else default_script(scene)
    return scene, script


# --- materialisation ---------------------------------------------------------------

def write_outputs(out_dir, scene: Scene, session: SyntheticSession, spec_dict: dict | None = None) -> dict:
    """Write scene references, frames, gaze CSV and truth.json under ``out_dir``."""
    from .imaging import save_image
    from .session import GazeLog, write_frames, write_gaze_log

    out = Path(out_dir)
    refs = out / "scene" / "refs"
    refs.mkdir(parents=True, exist_ok=True)
    save_image(refs / "base.png", scene.base)
    for v in scene.views:
        save_image(refs / f"{v.id}.png", v.image)
    with open(out / "scene" / "poses.csv", "w") as fh:
        fh.write("image_id,x_m,y_m,z_m,label\n")
        for v in scene.views:
            x, y, z = v.pose.position
            fh.write(f"{v.id},{x!r},{y!r},{z!r},{v.pose.label}\n")
    aois = [{"aoi_id": a, "label": label, "image": "base", "box": box.as_list()} for a, (label, box) in scene.aois.items()]
    (out / "scene" / "aois.json").write_text(json.dumps(aois, indent=2) + "\n")
    (out / "scene" / "views.json").write_text(json.dumps(
        {v.id: {"h_view_to_base": v.h.tolist(), "pose": v.pose.to_dict()} for v in scene.views}, indent=2) + "\n")
    write_frames(out / "frames", session.frames, fps=1000.0 / session.frame_period_ms)
    write_gaze_log(out / "gaze.csv", GazeLog(session.gaze_t.astype(np.int64), session.gaze_xy, session.gaze_valid))
    truth = dict(session.truth)
    if spec_dict is not None:
        truth["spec"] = spec_dict
    (out / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return truth
