"""Synthetic street scenes and dataset ingestion.

The generator places class-labeled landmarks in a 3D box, renders them into
two pinhole camera views as small grayscale patches with procedural
class-dependent texture, and derives match labels from 3D distances.  The
ingestion path reads the same manifest format back from disk, so externally
prepared datasets flow through identical code.

Conventions: world axes are x lateral, y vertical, z forward (depth);
cameras look along +z of their own frame.
"""

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for

LANDMARK_CLASSES = ("traffic_light", "traffic_sign", "pole", "window")

# physical extent (width, height) in meters used to size bounding boxes
_CLASS_SIZE = {
    "traffic_light": (0.35, 0.95),
    "traffic_sign": (0.6, 0.6),
    "pole": (0.2, 2.4),
    "window": (1.1, 1.4),
}

PATCH_SIDE = 32  # rendered patches are PATCH_SIDE x PATCH_SIDE grayscale


class BehindCameraError(ValueError):
    """Raised when a point with camera-frame depth <= 0 is projected."""


class GenerationError(RuntimeError):
    """Raised when scene constraints cannot be satisfied."""


@dataclass
class Landmark3D:
    landmark_id: str
    landmark_class: str
    position: np.ndarray  # world, meters
    appearance_seed: int

    def __post_init__(self):
        if self.landmark_class not in LANDMARK_CLASSES:
            raise ValueError("unknown landmark class %r" % self.landmark_class)
        self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = None     # world -> camera, 3x3
    position: np.ndarray = None     # camera center in world coordinates

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.rotation is None:
            self.rotation = np.eye(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.position is None:
            self.position = np.zeros(3)
        self.position = np.asarray(self.position, dtype=np.float64)

    def world_to_camera(self, point):
        return self.rotation @ (np.asarray(point, dtype=np.float64) - self.position)


@dataclass
class Patch:
    patch_id: str
    frame_id: str
    bbox: tuple                     # (u0, v0, u1, v1), pixels, floats
    pixels: np.ndarray              # 8-bit grayscale or RGB block
    loc3d: np.ndarray = None        # estimated 3D location, meters
    loc_is_world: bool = True
    landmark_id: str = None
    feature: np.ndarray = None      # optional precomputed descriptor bypass

    def __post_init__(self):
        u0, v0, u1, v1 = self.bbox
        if not (u0 < u1 and v0 < v1):
            raise ValueError("degenerate bounding box %r" % (self.bbox,))
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.loc3d is not None:
            self.loc3d = np.asarray(self.loc3d, dtype=np.float64)


@dataclass
class Frame:
    frame_id: str
    camera: CameraModel
    position: np.ndarray            # global camera position, meters
    patches: list

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        for p in self.patches:
            if p.frame_id != self.frame_id:
                raise ValueError("patch %s carries frame id %r, expected %r"
                                 % (p.patch_id, p.frame_id, self.frame_id))


@dataclass
class PairEntry:
    patch_a: str
    patch_b: str
    label: int  # 1 matched, 0 unmatched


@dataclass
class PairDataset:
    entries: list
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError("split must be 'train' or 'test'")
        for e in self.entries:
            if e.label not in (0, 1):
                raise ValueError("labels must be 0 or 1")


@dataclass
class SceneConfig:
    class_counts: dict = field(default_factory=lambda: {
        "traffic_light": 2, "traffic_sign": 2, "pole": 3, "window": 2})
    x_range: tuple = (-12.0, 12.0)
    y_range: tuple = (0.0, 5.0)
    z_range: tuple = (6.0, 28.0)
    min_spacing: float = 1.5
    max_retries: int = 2000


@dataclass
class NoiseConfig:
    sigma_loc: float = 0.2          # Gaussian noise on estimated 3D location
    occlusion_prob: float = 0.1     # chance a landmark is dropped per view
    sigma_pixel: float = 8.0        # additive pixel noise before quantization
    bbox_margin: float = 0.0        # extra pixels kept around the projection


def generate_scene(config, seed):
    """Place landmarks uniformly in the configured box, rejecting draws that
    come closer than ``min_spacing`` to an accepted one."""
    rng = rng_for(seed, "scene")
    landmarks = []
    positions = []
    idx = 0
    for cls in LANDMARK_CLASSES:
        count = int(config.class_counts.get(cls, 0))
        for _ in range(count):
            placed = False
            for _ in range(config.max_retries):
                pos = np.array([
                    rng.uniform(*config.x_range),
                    rng.uniform(*config.y_range),
                    rng.uniform(*config.z_range),
                ])
                if all(np.linalg.norm(pos - q) >= config.min_spacing
                       for q in positions):
                    placed = True
                    break
            if not placed:
                raise GenerationError(
                    "could not place landmark %d with spacing %.3g"
                    % (idx, config.min_spacing))
            positions.append(pos)
            landmarks.append(Landmark3D(
                landmark_id="lm%03d" % idx,
                landmark_class=cls,
                position=pos,
                appearance_seed=int(rng.integers(0, 2 ** 31)),
            ))
            idx += 1
    return landmarks


def standard_camera(position, yaw=0.0, fx=700.0, fy=700.0, cx=640.0, cy=480.0,
                    width=1280, height=960):
    """Camera at ``position`` looking along world +z, rotated by ``yaw``
    radians about the vertical axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    rotation = np.array([[c, 0.0, -s],
                         [0.0, 1.0, 0.0],
                         [s, 0.0, c]])
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                       rotation=rotation, position=np.asarray(position, float))


def project_to_image(point3d, camera):
    """Pinhole projection.  Returns (u, v, depth, in_view).

    Raises BehindCameraError when the camera-frame depth is <= 0; a
    projection landing outside the image is flagged, not an error.
    """
    pc = camera.world_to_camera(point3d)
    z = pc[2]
    if z <= 0.0:
        raise BehindCameraError("point at camera-frame depth %.6g" % z)
    u = camera.fx * pc[0] / z + camera.cx
    v = camera.fy * pc[1] / z + camera.cy
    in_view = (0.0 <= u < camera.width) and (0.0 <= v < camera.height)
    return u, v, z, in_view


def back_project(u, v, depth, camera):
    """Camera-frame point recovered from a pixel and its depth."""
    x = (u - camera.cx) / camera.fx * depth
    y = (v - camera.cy) / camera.fy * depth
    return np.array([x, y, depth])


# -- procedural patch textures ----------------------------------------------

def _texture(cls, appearance_seed, view_scale, side=PATCH_SIDE):
    """Class-dependent grayscale texture with small per-landmark variation.

    ``view_scale`` compresses or enlarges the drawn figure with distance, so
    the same landmark does not produce pixel-identical patches from two
    viewpoints.
    """
    rng = np.random.default_rng(appearance_seed)
    jitter = lambda lo, hi: float(rng.uniform(lo, hi))
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, side),
                         np.linspace(0.0, 1.0, side), indexing="ij")
    img = np.full((side, side), 60.0 + jitter(-8, 8))
    s = float(np.clip(view_scale, 0.6, 1.6))
    cx = 0.5 + jitter(-0.03, 0.03)

    if cls == "traffic_light":
        w = 0.18 * s
        box = (np.abs(xx - cx) < w) & (yy > 0.08) & (yy < 0.92)
        img[box] = 28.0 + jitter(-6, 6)
        for k, level in enumerate((235.0, 150.0, 195.0)):
            cyk = 0.22 + 0.28 * k
            disk = (xx - cx) ** 2 + (yy - cyk) ** 2 < (0.085 * s) ** 2
            img[disk] = level + jitter(-10, 10)
    elif cls == "traffic_sign":
        cy0 = 0.34 + jitter(-0.02, 0.02)
        r = 0.27 * s
        disk = (xx - cx) ** 2 + (yy - cy0) ** 2 < r ** 2
        ring = (np.sqrt((xx - cx) ** 2 + (yy - cy0) ** 2) > r * 0.66) & disk
        img[disk] = 215.0 + jitter(-10, 10)
        img[ring] = 95.0 + jitter(-8, 8)
        stem = (np.abs(xx - cx) < 0.04 * s) & (yy >= cy0 + r)
        img[stem] = 120.0
    elif cls == "pole":
        w = 0.07 * s
        stripe = np.abs(xx - cx) < w
        img[stripe] = 182.0 + jitter(-4, 4)
    elif cls == "window":
        lo, hi = 0.5 - 0.36 * s, 0.5 + 0.36 * s
        inside = (xx > lo) & (xx < hi) & (yy > lo) & (yy < hi)
        border = inside & ((xx < lo + 0.06) | (xx > hi - 0.06)
                           | (yy < lo + 0.06) | (yy > hi - 0.06))
        img[inside] = 95.0 + jitter(-6, 6)
        img[border] = 205.0 + jitter(-8, 8)
        img[inside & (np.abs(xx - 0.5) < 0.025)] = 205.0
        img[inside & (np.abs(yy - 0.5) < 0.025)] = 205.0
    return img


def render_views(scene, camera_a, camera_b, noise, seed, frame_ids=None):
    """Render a landmark list into two camera views.

    Each landmark visible in a view becomes one Patch: procedural texture
    plus pixel noise, a projection-derived bounding box, the true location
    corrupted by Gaussian noise, and the landmark id for ground truth.
    ``frame_ids`` overrides the default ("f0", "f1") naming so frames from
    many renders can share one dataset.
    """
    frames = []
    for cam_idx, camera in enumerate((camera_a, camera_b)):
        frame_id = "f%d" % cam_idx if frame_ids is None else frame_ids[cam_idx]
        rng = rng_for(seed, "render/%d" % cam_idx)
        patches = []
        for lm in scene:
            # one rng draw per landmark regardless of visibility keeps the
            # stream aligned across camera poses
            occlude = rng.uniform() < noise.occlusion_prob
            loc_noise = rng.normal(0.0, noise.sigma_loc, size=3) \
                if noise.sigma_loc > 0 else np.zeros(3)
            pixel_rng_seed = int(rng.integers(0, 2 ** 31))
            try:
                u, v, depth, in_view = project_to_image(lm.position, camera)
            except BehindCameraError:
                continue
            if occlude or not in_view:
                continue
            size_w, size_h = _CLASS_SIZE[lm.landmark_class]
            half_w = 0.5 * camera.fx * size_w / depth + noise.bbox_margin
            half_h = 0.5 * camera.fy * size_h / depth + noise.bbox_margin
            bbox = (u - half_w, v - half_h, u + half_w, v + half_h)
            img = _texture(lm.landmark_class, lm.appearance_seed, 8.0 / depth)
            if noise.sigma_pixel > 0:
                img = img + np.random.default_rng(pixel_rng_seed).normal(
                    0.0, noise.sigma_pixel, img.shape)
            pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            patches.append(Patch(
                patch_id="%s/p%03d" % (frame_id, len(patches)),
                frame_id=frame_id,
                bbox=bbox,
                pixels=pixels,
                loc3d=lm.position + loc_noise,
                loc_is_world=True,
                landmark_id=lm.landmark_id,
            ))
        frames.append(Frame(frame_id=frame_id, camera=camera,
                            position=camera.position.copy(), patches=patches))
    return frames[0], frames[1]


def ground_truth_pairs(frame_a, frame_b, tau_match=1.0, max_pairs=None, rng=None):
    """Label every cross-frame patch pair by 3D distance.

    Matched iff the L2 distance between locations is <= tau_match
    (inclusive).  When both patches carry landmark ids, the id equality
    overrides the distance rule; pairs where the two rules disagree are
    returned separately for inspection.

    Returns (entries, disagreements).
    """
    for p in list(frame_a.patches) + list(frame_b.patches):
        if p.loc3d is None:
            raise ValueError("patch %s has no 3D location" % p.patch_id)
    entries = []
    disagreements = []
    for pa in frame_a.patches:
        for pb in frame_b.patches:
            dist = float(np.linalg.norm(pa.loc3d - pb.loc3d))
            dist_label = 1 if dist <= tau_match else 0
            if pa.landmark_id is not None and pb.landmark_id is not None:
                label = 1 if pa.landmark_id == pb.landmark_id else 0
                if label != dist_label:
                    disagreements.append({
                        "patch_a": pa.patch_id, "patch_b": pb.patch_id,
                        "distance": dist, "id_label": label,
                        "distance_label": dist_label,
                    })
            else:
                label = dist_label
            entries.append(PairEntry(pa.patch_id, pb.patch_id, label))
    if max_pairs is not None and len(entries) > max_pairs:
        if rng is None:
            raise ValueError("subsampling requires an rng")
        keep = rng.choice(len(entries), size=max_pairs, replace=False)
        entries = [entries[i] for i in sorted(keep)]
    return entries, disagreements


def pair_frames(frames, min_gap_m=2.0, max_dist_m=25.0):
    """Frame pairs whose camera distance lies in [min_gap_m, max_dist_m],
    both bounds inclusive."""
    out = []
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            d = float(np.linalg.norm(frames[i].position - frames[j].position))
            if min_gap_m <= d <= max_dist_m:
                out.append((frames[i], frames[j]))
    return out


# -- PGM / PPM ---------------------------------------------------------------

def write_image(path, pixels):
    """Binary PGM (grayscale) or PPM (RGB) with maxval 255."""
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim == 2:
        magic, h, w = b"P5", arr.shape[0], arr.shape[1]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, h, w = b"P6", arr.shape[0], arr.shape[1]
    else:
        raise ValueError("expected HxW or HxWx3 8-bit pixels")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def read_image(path):
    """Read a binary PGM (P5) or PPM (P6) file written by write_image or any
    standard tool (comments allowed in the header)."""
    with open(path, "rb") as fh:
        data = fh.read()

    def tokens():
        i = 0
        while i < len(data):
            if data[i:i + 1].isspace():
                i += 1
            elif data[i:i + 1] == b"#":
                while i < len(data) and data[i:i + 1] != b"\n":
                    i += 1
            else:
                j = i
                while j < len(data) and not data[j:j + 1].isspace():
                    j += 1
                yield data[i:j], j
                i = j

    it = tokens()
    magic, _ = next(it)
    if magic not in (b"P5", b"P6"):
        raise ValueError("unsupported image magic %r" % magic)
    (w, _), (h, _), (maxval, pos) = (next(it) for _ in range(3))
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    raw = data[pos + 1:]  # exactly one whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    if len(raw) < need:
        raise ValueError("truncated pixel data")
    arr = np.frombuffer(raw[:need], dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


# -- manifest save / load ----------------------------------------------------

def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def save_dataset(out_dir, frames, pairs=None):
    """Write frames to ``out_dir``: manifest.jsonl, an images/ directory of
    PGM/PPM files, and pairs.csv when a PairDataset is given."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for frame in frames:
            cam = frame.camera
            patch_records = []
            for p in frame.patches:
                rel = "images/%s.pgm" % p.patch_id.replace("/", "_")
                img_path = os.path.join(out_dir, rel)
                write_image(img_path, p.pixels)
                rec = {
                    "patch_id": p.patch_id,
                    "bbox": [float(b) for b in p.bbox],
                    "image": rel,
                    "loc3d": [float(x) for x in p.loc3d],
                    "sha256": _sha256(img_path),
                }
                if not p.loc_is_world:
                    rec["loc_frame"] = "camera"
                if p.landmark_id is not None:
                    rec["landmark_id"] = p.landmark_id
                patch_records.append(rec)
            fh.write(json.dumps({
                "frame_id": frame.frame_id,
                "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx,
                           "cy": cam.cy, "W": cam.width, "H": cam.height},
                "position": [float(x) for x in frame.position],
                "patches": patch_records,
            }) + "\n")
    if pairs is not None:
        with open(os.path.join(out_dir, "pairs.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patch_a", "patch_b", "label"])
            for e in pairs.entries:
                writer.writerow([e.patch_a, e.patch_b, e.label])
    return manifest_path


@dataclass
class LoadedDataset:
    frames: list
    pairs: PairDataset
    diagnostics: list


def load_dataset(manifest_path, pairs_path=None, split="train"):
    """Read a manifest written by save_dataset (or prepared externally).

    Malformed records are skipped and reported in ``diagnostics`` as
    "record N: reason"; loading never raises for per-record problems.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    frames = []
    diagnostics = []
    seen_patch_ids = set()
    with open(manifest_path) as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                diagnostics.append("record %d: invalid JSON (%s)" % (idx, exc))
                continue
            try:
                cam_rec = rec["camera"]
                camera = CameraModel(
                    fx=float(cam_rec["fx"]), fy=float(cam_rec["fy"]),
                    cx=float(cam_rec["cx"]), cy=float(cam_rec["cy"]),
                    width=int(cam_rec["W"]), height=int(cam_rec["H"]),
                    position=np.asarray(rec["position"], dtype=np.float64),
                )
                frame_id = rec["frame_id"]
            except (KeyError, TypeError, ValueError) as exc:
                diagnostics.append("record %d: malformed frame (%s)" % (idx, exc))
                continue
            patches = []
            for p_rec in rec.get("patches", []):
                err = _load_patch(base, frame_id, p_rec, patches, seen_patch_ids)
                if err:
                    diagnostics.append("record %d: %s" % (idx, err))
            frames.append(Frame(frame_id=frame_id, camera=camera,
                                position=np.asarray(rec["position"]),
                                patches=patches))
    entries = []
    if pairs_path is None:
        candidate = os.path.join(base, "pairs.csv")
        pairs_path = candidate if os.path.exists(candidate) else None
    if pairs_path is not None:
        with open(pairs_path, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append(PairEntry(row["patch_a"], row["patch_b"],
                                         int(row["label"])))
    return LoadedDataset(frames=frames,
                         pairs=PairDataset(entries=entries, split=split),
                         diagnostics=diagnostics)


def _load_patch(base, frame_id, p_rec, patches, seen_patch_ids):
    try:
        patch_id = p_rec["patch_id"]
        bbox = tuple(float(b) for b in p_rec["bbox"])
        image_rel = p_rec["image"]
    except (KeyError, TypeError, ValueError) as exc:
        return "malformed patch record (%s)" % exc
    if len(bbox) != 4 or not (bbox[0] < bbox[2] and bbox[1] < bbox[3]):
        return "patch %s: degenerate bbox %r" % (patch_id, bbox)
    if patch_id in seen_patch_ids:
        return "patch %s: duplicate patch id" % patch_id
    img_path = os.path.join(base, image_rel)
    if not os.path.exists(img_path):
        return "patch %s: missing image %s" % (patch_id, image_rel)
    if "sha256" in p_rec and _sha256(img_path) != p_rec["sha256"]:
        return "patch %s: checksum mismatch for %s" % (patch_id, image_rel)
    try:
        pixels = read_image(img_path)
    except ValueError as exc:
        return "patch %s: unreadable image (%s)" % (patch_id, exc)
    loc = p_rec.get("loc3d")
    patches.append(Patch(
        patch_id=patch_id,
        frame_id=frame_id,
        bbox=bbox,
        pixels=pixels,
        loc3d=None if loc is None else np.asarray(loc, dtype=np.float64),
        loc_is_world=p_rec.get("loc_frame", "world") == "world",
        landmark_id=p_rec.get("landmark_id"),
    ))
    seen_patch_ids.add(patch_id)
    return None
