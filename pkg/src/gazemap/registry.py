"""Reference-image registry: build, annotate, propagate AOIs, persist.

A :class:`Registry` is an immutable value.  ``seed_aoi`` and
``propagate_aois`` return new registries and leave their input untouched.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BoxOutOfBounds,
    ChecksumMismatch,
    DuplicateImageId,
    FormatVersionMismatch,
    GazemapError,
    NoConsensus,
    NoSeeds,
    PoseForUnknownImage,
    RegistryIOError,
    UnknownImage,
)
from .features import DESCRIPTOR_BYTES, FeatureParams, FeatureSet, detect_and_describe, match_descriptors
from .geometry import BoundingBox, RansacParams, estimate_homography_ransac, normalize_homography, transform_box
from .imaging import load_image, thumbnail_signature

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"GZRG"
MANIFEST = "manifest.json"
BLOB = "descriptors.bin"


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float] | None = None
    label: str | None = None

    def __post_init__(self):
        if self.position is not None and not all(math.isfinite(v) for v in self.position):
            raise GazemapError(f"non-finite camera position {self.position}")

    def to_dict(self) -> dict:
        return {"position": list(self.position) if self.position is not None else None, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict | None) -> "CameraPose | None":
        if d is None:
            return None
        pos = d.get("position")
        return cls(tuple(float(v) for v in pos) if pos is not None else None, d.get("label"))


@dataclass(frozen=True, eq=False)
class ReferenceImage:
    id: str
    path: str
    width: int
    height: int
    features: FeatureSet
    thumbnail_sig: np.ndarray
    pose: CameraPose | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReferenceImage):
            return NotImplemented
        return (
            (self.id, self.path, self.width, self.height, self.pose)
            == (other.id, other.path, other.width, other.height, other.pose)
            and self.features == other.features
            and np.array_equal(self.thumbnail_sig, other.thumbnail_sig)
        )


@dataclass(frozen=True)
class AoiAnnotation:
    aoi_id: str
    label: str
    boxes: dict  # image id -> BoundingBox
    seeds: frozenset = frozenset()  # image ids whose box was placed by hand


@dataclass(frozen=True)
class Registry:
    images: tuple
    aois: tuple = ()
    build_params: dict = field(default_factory=dict)
    # image id -> {"anchor": id, "inliers": n, "h_from_seed": {seed id: 3x3}}
    propagation: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise DuplicateImageId("image ids must be unique")

    @property
    def ids(self) -> list[str]:
        return [im.id for im in self.images]

    def image(self, image_id: str) -> ReferenceImage:
        for im in self.images:
            if im.id == image_id:
                return im
        raise UnknownImage(f"unknown image id {image_id!r}")

    def index(self, image_id: str) -> int:
        for i, im in enumerate(self.images):
            if im.id == image_id:
                return i
        raise UnknownImage(f"unknown image id {image_id!r}")

    def aoi(self, aoi_id: str) -> AoiAnnotation | None:
        for a in self.aois:
            if a.aoi_id == aoi_id:
                return a
        return None

    def boxes_for(self, image_id: str) -> dict:
        """AOI id -> box on one reference image."""
        return {a.aoi_id: a.boxes[image_id] for a in self.aois if image_id in a.boxes}

    def annotated_ids(self) -> set[str]:
        return {img for a in self.aois for img in a.boxes}

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class PropagationReport:
    propagated: list = field(default_factory=list)  # (image id, anchor id, inliers)
    uncovered: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "propagated": [{"image": i, "anchor": a, "inliers": n} for i, a, n in self.propagated],
            "uncovered": list(self.uncovered),
            "n_propagated": len(self.propagated),
            "n_uncovered": len(self.uncovered),
        }


def make_reference(image_id: str, img: np.ndarray, path: str = "", feature_params: FeatureParams | None = None,
                   pose: CameraPose | None = None) -> ReferenceImage:
    feats = detect_and_describe(img, feature_params)
    return ReferenceImage(image_id, str(path), int(img.shape[1]), int(img.shape[0]), feats,
                          thumbnail_signature(img), pose)


def read_poses(path) -> dict[str, CameraPose]:
    """Parse the ``image_id,x_m,y_m,z_m,label`` sidecar."""
    poses = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:4]] != ["image_id", "x_m", "y_m", "z_m"]:
                raise GazemapError(f"{path}: expected header image_id,x_m,y_m,z_m,label")
            for lineno, row in enumerate(reader, start=2):
                if not row or not any(c.strip() for c in row):
                    continue
                try:
                    xyz = tuple(float(v) for v in row[1:4])
                except (ValueError, IndexError) as exc:
                    raise GazemapError(f"{path}:{lineno}: bad pose row") from exc
                label = row[4] if len(row) > 4 and row[4] != "" else None
                poses[row[0].strip()] = CameraPose(xyz, label)
    except OSError as exc:
        raise RegistryIOError(f"cannot read poses file {path}: {exc}") from exc
    return poses


def build_registry(image_paths, poses_file=None, feature_params: FeatureParams | None = None) -> Registry:
    """Decode, feature and sign every image; ids are file stems."""
    feature_params = feature_params or FeatureParams()
    paths = [Path(p) for p in image_paths]
    if not paths:
        raise GazemapError("at least one reference image is required")
    ids = [p.stem for p in paths]
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateImageId(f"duplicate image id {i!r}")
        seen.add(i)
    poses = read_poses(poses_file) if poses_file is not None else {}
    unknown = sorted(set(poses) - seen)
    if unknown:
        raise PoseForUnknownImage(f"poses given for unknown image ids: {', '.join(unknown)}")
    images = []
    for image_id, path in zip(ids, paths):
        img = load_image(path)
        images.append(make_reference(image_id, img, str(path), feature_params, poses.get(image_id)))
    return Registry(tuple(images), (), {"features": feature_params.to_dict()})


def registry_from_arrays(named_images, poses=None, feature_params: FeatureParams | None = None) -> Registry:
    """In-memory variant of :func:`build_registry` for ``(id, array)`` pairs."""
    feature_params = feature_params or FeatureParams()
    poses = poses or {}
    images = tuple(make_reference(i, img, "", feature_params, poses.get(i)) for i, img in named_images)
    return Registry(images, (), {"features": feature_params.to_dict()})


def seed_aoi(reg: Registry, aoi_id: str, label: str, image_id: str, box: BoundingBox) -> Registry:
    im = reg.image(image_id)
    if not isinstance(box, BoundingBox):
        box = BoundingBox.from_list(box)
    if not box.within(im.width, im.height):
        raise BoxOutOfBounds(f"box {box.as_list()} outside image {image_id!r} ({im.width}x{im.height})")
    aois = []
    found = False
    for a in reg.aois:
        if a.aoi_id == aoi_id:
            found = True
            a = AoiAnnotation(aoi_id, label or a.label, {**a.boxes, image_id: box}, a.seeds | {image_id})
        aois.append(a)
    if not found:
        aois.append(AoiAnnotation(aoi_id, label, {image_id: box}, frozenset({image_id})))
    return replace(reg, aois=tuple(aois))


@dataclass(frozen=True)
class LinkParams:
    min_inliers: int = 15
    top_k: int = 10
    ratio: float = 0.8
    ransac: RansacParams = RansacParams()


def link_images(fa: FeatureSet, fb: FeatureSet, params: LinkParams, min_matches: int = 0):
    """Robust homography mapping image ``a`` coordinates into image ``b``.

    Returns ``(H, inlier_count)`` or ``(None, 0)`` when no consensus exists.
    Pairs with fewer than ``min_matches`` putative matches are skipped
    without running RANSAC (the inlier count can never exceed them).
    """
    m = match_descriptors(fa, fb, params.ratio)
    if len(m) < max(4, params.min_inliers, min_matches):
        return None, 0
    src, dst = m.points(fa, fb)
    try:
        h, mask = estimate_homography_ransac(src, dst, replace(params.ransac, min_inliers=params.min_inliers))
    except NoConsensus:
        return None, 0
    except GazemapError as exc:
        log.debug("link failed: %s", exc)
        return None, 0
    return h, int(mask.sum())


def top_k_by_signature(sig: np.ndarray, candidates: list[ReferenceImage], k: int) -> list[ReferenceImage]:
    """The ``k`` candidates with smallest SSD to ``sig`` (ties by registry order)."""
    if not candidates:
        return []
    sigs = np.stack([c.thumbnail_sig for c in candidates])
    ssd = ((sigs - sig[None, :]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(candidates)), ssd))[:k]
    return [candidates[i] for i in order]


def propagate_aois(reg: Registry, min_inliers: int = 15, link_top_k: int = 10,
                   params: LinkParams | None = None) -> tuple[Registry, PropagationReport]:
    """Transfer seeded AOI boxes to every linkable reference image.

    Best-first: at each step the pending image with the strongest link
    (RANSAC inlier count) to an already annotated image is annotated next,
    so newly covered images can anchor later ones.  Homographies are chained
    back to the seed images and the *seed* box is transformed, so hulls do
    not grow from hop to hop.  A pending image is only matched against
    anchors that rank among its ``link_top_k`` signature-nearest when they
    become anchors.
    """
    if not any(a.seeds for a in reg.aois):
        raise NoSeeds("no seeded AOIs to propagate")
    params = replace(params or LinkParams(), min_inliers=min_inliers, top_k=link_top_k)
    order = {im.id: i for i, im in enumerate(reg.images)}
    seed_boxes = {a.aoi_id: {s: a.boxes[s] for s in sorted(a.seeds, key=order.get)} for a in reg.aois}
    boxes = {a.aoi_id: dict(a.boxes) for a in reg.aois}
    seeded = {s for a in reg.aois for s in a.seeds}
    # image id -> {seed id: H mapping seed pixels to this image}
    chains = {i: {i: np.eye(3)} for i in seeded}
    for i, rec in reg.propagation.items():
        chains.setdefault(i, {k: np.asarray(v, float) for k, v in rec["h_from_seed"].items()})
    covered = set(reg.annotated_ids()) | set(reg.propagation)
    pending = {im.id: im for im in reg.images if im.id not in covered}
    shortlist: dict[str, list] = {pid: [] for pid in pending}  # sorted (ssd, order) of top-k anchors
    best: dict[str, tuple] = {}  # pending id -> (inliers, anchor, H anchor->pending)
    propagation = dict(reg.propagation)
    report = PropagationReport()

    def add_anchor(a: ReferenceImage):
        for pid, p in pending.items():
            ssd = float(((p.thumbnail_sig - a.thumbnail_sig) ** 2).sum())
            key = (ssd, order[a.id])
            short = shortlist[pid]
            if len(short) >= params.top_k and key >= short[-1]:
                continue
            short.append(key)
            short.sort()
            del short[params.top_k:]
            h, n = link_images(a.features, p.features, params)
            if h is not None and n >= params.min_inliers and n > best.get(pid, (0,))[0]:
                best[pid] = (n, a, h)

    for im in reg.images:
        if im.id in chains and any(im.id in b for b in boxes.values()):
            add_anchor(im)

    while best:
        pid = max(best, key=lambda i: (best[i][0], -order[i]))
        n, anchor, h = best.pop(pid)
        p = pending.pop(pid)
        shortlist.pop(pid)
        chain = {s: normalize_homography(h @ hs) for s, hs in chains.get(anchor.id, {}).items()}
        chains[pid] = chain
        gained = False
        for aoi_id, seeds in seed_boxes.items():
            src = next((s for s in seeds if s in chain), None)
            if src is None:
                continue
            try:
                hull = transform_box(chain[src], seeds[src])
            except GazemapError:
                continue
            clipped = hull.clip(p.width, p.height)
            if clipped is not None:
                boxes[aoi_id][pid] = clipped
                gained = True
        propagation[pid] = {
            "anchor": anchor.id,
            "inliers": n,
            "h_from_seed": {s: hs.tolist() for s, hs in chain.items()},
        }
        report.propagated.append((pid, anchor.id, n))
        if gained:
            add_anchor(p)
    report.uncovered = [im.id for im in reg.images if im.id in pending]
    aois = tuple(
        AoiAnnotation(a.aoi_id, a.label,
                      {im.id: boxes[a.aoi_id][im.id] for im in reg.images if im.id in boxes[a.aoi_id]}, a.seeds)
        for a in reg.aois
    )
    return replace(reg, aois=aois, propagation=propagation), report


# --- persistence -------------------------------------------------------------

def _encode_blob(reg: Registry) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for im in reg.images:
        f = im.features
        parts.append(struct.pack("<I", len(f)))
        rec = np.empty(len(f), dtype=[("kp", "<f4", (5,)), ("desc", "u1", (DESCRIPTOR_BYTES,))])
        rec["kp"] = np.column_stack([f.xy[:, 0], f.xy[:, 1], f.scale, f.orientation, f.response])
        rec["desc"] = f.descriptors
        parts.append(rec.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def _decode_blob(data: bytes, counts: list[int]) -> list[FeatureSet]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise RegistryIOError("descriptors.bin: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"descriptors.bin version {version}, expected {FORMAT_VERSION}")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch("descriptors.bin CRC32 does not match its payload")
    dt = np.dtype([("kp", "<f4", (5,)), ("desc", "u1", (DESCRIPTOR_BYTES,))])
    off = 8
    out = []
    for expected in counts:
        (n,) = struct.unpack_from("<I", payload, off)
        off += 4
        if n != expected:
            raise RegistryIOError(f"descriptors.bin keypoint count {n} != manifest {expected}")
        rec = np.frombuffer(payload, dtype=dt, count=n, offset=off)
        off += n * dt.itemsize
        kp = rec["kp"].astype(np.float32)
        out.append(FeatureSet(
            xy=np.ascontiguousarray(kp[:, :2]),
            scale=np.ascontiguousarray(kp[:, 2]),
            orientation=np.ascontiguousarray(kp[:, 3]),
            response=np.ascontiguousarray(kp[:, 4]),
            descriptors=np.ascontiguousarray(rec["desc"], dtype=np.uint8),
        ))
    if off != len(payload):
        raise RegistryIOError("descriptors.bin has trailing data")
    return out


def save_registry(reg: Registry, directory) -> Path:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        blob = _encode_blob(reg)
        manifest = {
            "format": "gazemap-registry",
            "version": FORMAT_VERSION,
            "build_params": reg.build_params,
            "images": [
                {
                    "id": im.id,
                    "path": im.path,
                    "width": im.width,
                    "height": im.height,
                    "n_keypoints": len(im.features),
                    "thumbnail_sig": [float(v) for v in im.thumbnail_sig],
                    "pose": im.pose.to_dict() if im.pose else None,
                }
                for im in reg.images
            ],
            "aois": [
                {
                    "aoi_id": a.aoi_id,
                    "label": a.label,
                    "boxes": {k: b.as_list() for k, b in a.boxes.items()},
                    "seeds": sorted(a.seeds),
                }
                for a in reg.aois
            ],
            "propagation": reg.propagation,
        }
        (d / BLOB).write_bytes(blob)
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise RegistryIOError(f"cannot write registry to {d}: {exc}") from exc
    return d


def load_registry(directory) -> Registry:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
        blob = (d / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise RegistryIOError(f"cannot read registry at {d}: {exc}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"manifest version {manifest.get('version')!r}, expected {FORMAT_VERSION}")
    recs = manifest["images"]
    feats = _decode_blob(blob, [r["n_keypoints"] for r in recs])
    images = tuple(
        ReferenceImage(r["id"], r["path"], int(r["width"]), int(r["height"]), f,
                       np.array(r["thumbnail_sig"], dtype=float), CameraPose.from_dict(r.get("pose")))
        for r, f in zip(recs, feats)
    )
    aois = tuple(
        AoiAnnotation(a["aoi_id"], a["label"], {k: BoundingBox.from_list(v) for k, v in a["boxes"].items()},
                      frozenset(a.get("seeds", ())))
        for a in manifest.get("aois", [])
    )
    return Registry(images, aois, manifest.get("build_params", {}), dict(manifest.get("propagation", {})))
