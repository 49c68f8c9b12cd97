"""Synthetic scenes with exact ground truth and the on-disk scene directory.

A scene directory holds five files:

``points.bin``
    little-endian float32 records ``x y z intensity``
``labels.bin``
    little-endian uint32, one per point
``calib.txt``
    intrinsic matrix and pose chain (see :mod:`boxprior.geometry`)
``boxes.txt``
    one 3D box per line: ``cx cy cz w l h yaw class``
``image.ppm``
    binary PPM (P6), 8-bit RGB
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from boxprior.errors import BoxNotVisibleError, ConsistencyError, GenerationError, SceneParseError
from boxprior.geometry import (
    BoundingBox2D,
    BoundingBox3D,
    ImagePlane,
    IntrinsicMatrix,
    PointCloud,
    PoseChain,
    Projection,
    RigidTransform,
    box3d_corners,
    compose_chain,
    format_calibration,
    parse_calibration,
    points_in_box3d,
    project_box3d,
    project_points,
    rotation_z,
)

POINTS_FILE = "points.bin"
LABELS_FILE = "labels.bin"
CALIB_FILE = "calib.txt"
BOXES_FILE = "boxes.txt"
IMAGE_FILE = "image.ppm"
SCENE_FILES = (POINTS_FILE, LABELS_FILE, CALIB_FILE, BOXES_FILE, IMAGE_FILE)

BACKGROUND_CLASS = 0
LIDAR_HEIGHT = 1.8
INTENSITY_BAND = 0.4  # fraction of each class's 1/c slot of the intensity range

# Camera axes (x right, y down, z forward) expressed in the ego frame.
_EGO_FROM_CAMERA = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])

# (width, length, height) templates for object classes 1, 2, 3, ...
_SIZE_TEMPLATES = [(0.8, 0.8, 1.7), (1.8, 4.2, 1.5), (2.5, 6.0, 3.0), (0.7, 1.8, 1.3)]


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    num_objects: int = 4
    num_classes: int = 4
    points_per_object: tuple[int, int] = (20, 50)
    background_points: int = 300
    camera_offset: tuple[float, float, float] = (1.5, 0.0, 1.6)
    image_size: tuple[int, int] = (160, 120)
    noise: float = 0.02
    max_attempts: int = 50

    def __post_init__(self):
        lo, hi = self.points_per_object
        if self.num_objects < 1 or self.num_classes < 2 or lo < 1 or hi < lo or self.background_points < 0:
            raise ValueError("generator counts must be positive")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")
        if min(self.image_size) <= 0:
            raise ValueError("image size must be positive")


def class_palette(num_classes: int) -> np.ndarray:
    """Flat RGB color per class; class 0 (ground) is gray."""
    colors = [(96, 96, 96)]
    for k in range(1, num_classes):
        r, g, b = colorsys.hsv_to_rgb((k - 1) / max(num_classes - 1, 1), 0.9, 1.0)
        colors.append((round(255 * r), round(255 * g), round(255 * b)))
    return np.array(colors, dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class SceneBundle:
    cloud: PointCloud
    labels: np.ndarray
    image: np.ndarray  # (height, width, 3) uint8
    intrinsic: IntrinsicMatrix
    chain: PoseChain
    boxes3d: tuple[BoundingBox3D, ...]
    boxes2d: tuple[BoundingBox2D | None, ...] = field(default=())

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != len(self.cloud):
            raise ConsistencyError(f"{labels.shape[0]} labels for {len(self.cloud)} points")
        image = np.asarray(self.image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("image must be (height, width, 3)")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "boxes3d", tuple(self.boxes3d))
        if not self.boxes2d:
            object.__setattr__(self, "boxes2d", derive_boxes2d(self.boxes3d, self.intrinsic, self.extrinsic, self.plane))

    @property
    def plane(self) -> ImagePlane:
        return ImagePlane(self.image.shape[1], self.image.shape[0])

    @property
    def extrinsic(self) -> RigidTransform:
        return compose_chain(self.chain)

    def project(self) -> Projection:
        return project_points(self.cloud, self.intrinsic, self.extrinsic, self.plane)

    def annotated(self) -> list[tuple[int, BoundingBox3D, BoundingBox2D]]:
        """(index, 3D box, derived 2D box) for every box visible in the image."""
        return [(i, b3, b2) for i, (b3, b2) in enumerate(zip(self.boxes3d, self.boxes2d)) if b2 is not None]

    def equals(self, other: "SceneBundle") -> bool:
        return (
            self.cloud.equals(other.cloud)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.image, other.image)
            and self.intrinsic == other.intrinsic
            and [l for l, _ in self.chain.stages] == [l for l, _ in other.chain.stages]
            and all(a == b for (_, a), (_, b) in zip(self.chain.stages, other.chain.stages))
            and self.boxes3d == other.boxes3d
            and self.boxes2d == other.boxes2d
        )


def derive_boxes2d(boxes3d, k: IntrinsicMatrix, t: RigidTransform, plane: ImagePlane):
    out = []
    for box in boxes3d:
        try:
            out.append(project_box3d(box, k, t, plane))
        except BoxNotVisibleError:
            out.append(None)
    return tuple(out)


# --- generation -------------------------------------------------------------------


def _pose(yaw: float, translation) -> RigidTransform:
    return RigidTransform.from_rotation_translation(rotation_z(yaw), translation)


def _build_chain(rng: np.random.Generator, cfg: GeneratorConfig) -> PoseChain:
    ego_from_lidar = _pose(0.0, (0.0, 0.0, LIDAR_HEIGHT))
    heading = rng.uniform(-math.pi, math.pi)
    global_from_ego_tl = _pose(heading, (*rng.uniform(-500, 500, 2), 0.0))
    # Ego keeps moving between the LiDAR sweep and the camera exposure.
    step = rng.uniform(0.05, 0.5)
    dyaw = rng.uniform(-0.01, 0.01)
    move = np.array([step * math.cos(heading), step * math.sin(heading), 0.0])
    global_from_ego_tc = _pose(heading + dyaw, global_from_ego_tl.translation + move)
    ego_from_camera = RigidTransform.from_rotation_translation(_EGO_FROM_CAMERA, cfg.camera_offset)
    return PoseChain(
        (
            ("ego_tl<-lidar", ego_from_lidar),
            ("global<-ego_tl", global_from_ego_tl),
            ("ego_tc<-global", global_from_ego_tc.inverse()),
            ("camera<-ego_tc", ego_from_camera.inverse()),
        )
    )


def _intrinsic(cfg: GeneratorConfig) -> IntrinsicMatrix:
    width, height = cfg.image_size
    focal = 0.8 * width
    return IntrinsicMatrix.from_pinhole(focal, focal, width / 2.0, height / 2.0)


def _intensity(rng, labels, num_classes) -> np.ndarray:
    # Each class reflects within its own band of [0, 1], centered in its slot.
    lo = (labels + 0.5 - INTENSITY_BAND / 2) / num_classes
    return rng.uniform(lo, lo + INTENSITY_BAND / num_classes)


def _quantize(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def _sample_boxes(rng, cfg, k, t, plane) -> list[BoundingBox3D]:
    boxes: list[BoundingBox3D] = []
    ground = -LIDAR_HEIGHT
    tries = 0
    while len(boxes) < cfg.num_objects and tries < 40 * cfg.num_objects:
        tries += 1
        cls = int(rng.integers(1, cfg.num_classes))
        template = np.array(_SIZE_TEMPLATES[(cls - 1) % len(_SIZE_TEMPLATES)])
        size = template * rng.uniform(0.85, 1.15, 3)
        x = rng.uniform(7.0, 22.0)
        y = rng.uniform(-0.35, 0.35) * x
        box = BoundingBox3D((x, y, ground + size[2] / 2 + 0.05), size, rng.uniform(-math.pi, math.pi), cls)
        radius = 0.5 * math.hypot(size[0], size[1])
        if any(
            math.dist(box.center[:2], b.center[:2]) < radius + 0.5 * math.hypot(b.size[0], b.size[1]) + 0.3
            for b in boxes
        ):
            continue
        corners_cam = t.apply(box3d_corners(box))
        if np.any(corners_cam[:, 2] <= 0.5):
            continue
        try:
            project_box3d(box, k, t, plane)
        except BoxNotVisibleError:
            continue
        boxes.append(box)
    return boxes


def _fill_box(rng, box: BoundingBox3D, n: int) -> np.ndarray:
    w, length, h = box.size
    # Shrink slightly so float32 storage cannot push a point across a face.
    local = rng.uniform(-0.49, 0.49, size=(n, 3)) * (length, w, h)
    return local @ rotation_z(box.yaw).T + np.asarray(box.center)


def render_image(cloud: PointCloud, labels, k, t, plane: ImagePlane, num_classes: int) -> np.ndarray:
    """Paint each projected point's class color; the nearest point wins a pixel."""
    image = np.zeros((plane.height, plane.width, 3), dtype=np.uint8)
    proj = project_points(cloud, k, t, plane)
    order = np.argsort(-proj.depth, kind="stable")
    px = proj.pixels()[order]
    image[px[:, 1], px[:, 0]] = class_palette(num_classes)[np.asarray(labels)[proj.source_index[order]]]
    return image


def _attempt(rng, cfg: GeneratorConfig) -> SceneBundle | None:
    chain = _build_chain(rng, cfg)
    t = compose_chain(chain)
    k = _intrinsic(cfg)
    plane = ImagePlane(*cfg.image_size)
    boxes = _sample_boxes(rng, cfg, k, t, plane)
    if not boxes:
        return None

    lo, hi = cfg.points_per_object
    xyz_parts, label_parts = [], []
    for box in boxes:
        n = int(rng.integers(lo, hi + 1))
        xyz_parts.append(_fill_box(rng, box, n))
        label_parts.append(np.full(n, box.class_id))
    ground = np.column_stack(
        [
            rng.uniform(-20.0, 40.0, cfg.background_points),
            rng.uniform(-20.0, 20.0, cfg.background_points),
            -LIDAR_HEIGHT + cfg.noise * rng.standard_normal(cfg.background_points),
        ]
    )
    inside_any = np.zeros(len(ground), dtype=bool)
    for box in boxes:
        inside_any |= points_in_box3d(ground, box)
    xyz_parts.append(ground[~inside_any])
    label_parts.append(np.full(int((~inside_any).sum()), BACKGROUND_CLASS))

    xyz = np.concatenate(xyz_parts)
    labels = np.concatenate(label_parts).astype(np.int64)
    order = rng.permutation(len(labels))
    xyz, labels = _quantize(xyz[order]), labels[order]
    intensity = _quantize(_intensity(rng, labels, cfg.num_classes))
    cloud = PointCloud(xyz, intensity)

    image = render_image(cloud, labels, k, t, plane, cfg.num_classes)
    bundle = SceneBundle(cloud, labels, image, k, chain, tuple(boxes))
    if any(b is None for b in bundle.boxes2d):
        return None
    # Every annotated box must own at least one labeled point that reaches the image.
    proj = bundle.project()
    visible = np.zeros(len(cloud), dtype=bool)
    visible[proj.source_index] = True
    for box in boxes:
        if not np.any(points_in_box3d(xyz, box) & visible & (labels == box.class_id)):
            return None
    return bundle


def generate_scene(cfg: GeneratorConfig) -> SceneBundle:
    """Random scene with boxed objects on a ground plane, reproducible from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.max_attempts):
        bundle = _attempt(rng, cfg)
        if bundle is not None:
            return bundle
    raise GenerationError(f"no scene with a visible box after {cfg.max_attempts} attempts (seed {cfg.seed})")


def generate_scenes(seed: int, count: int, **overrides) -> list[SceneBundle]:
    """``count`` scenes whose generator seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64) if count else []
    return [generate_scene(GeneratorConfig(seed=int(s), **overrides)) for s in seeds]


# --- serialization ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def format_boxes(boxes) -> str:
    return "".join(
        " ".join([*map(_fmt, b.center), *map(_fmt, b.size), _fmt(b.yaw), str(b.class_id)]) + "\n" for b in boxes
    )


def encode_ppm(image: np.ndarray) -> bytes:
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def write_scene(bundle: SceneBundle, directory) -> Path:
    directory = Path(directory)
    records = np.column_stack([bundle.cloud.xyz, bundle.cloud.intensity]).astype("<f4")
    files = {
        POINTS_FILE: records.tobytes(),
        LABELS_FILE: bundle.labels.astype("<u4").tobytes(),
        CALIB_FILE: format_calibration(bundle.intrinsic, bundle.chain).encode(),
        BOXES_FILE: format_boxes(bundle.boxes3d).encode(),
        IMAGE_FILE: encode_ppm(bundle.image),
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, payload in files.items():
            (directory / name).write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write scene to {directory}: {exc}") from exc
    return directory


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise SceneParseError(path, 0, f"cannot read: {exc.strerror or exc}") from None


def parse_points(data: bytes, path="points.bin") -> PointCloud:
    usable = len(data) - len(data) % 16
    if usable != len(data):
        raise SceneParseError(path, usable, f"truncated record ({len(data) - usable} trailing bytes)")
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(records).all(axis=1) | (records[:, 3] < 0) | (records[:, 3] > 1))
    if bad.size:
        raise SceneParseError(path, int(bad[0]) * 16, "non-finite coordinate or intensity outside [0, 1]")
    return PointCloud(records[:, :3], records[:, 3])


def parse_labels(data: bytes, path="labels.bin") -> np.ndarray:
    usable = len(data) - len(data) % 4
    if usable != len(data):
        raise SceneParseError(path, usable, "truncated label")
    return np.frombuffer(data, dtype="<u4").astype(np.int64)


def parse_boxes(text: str, path="boxes.txt") -> list[BoundingBox3D]:
    boxes = []
    offset = 0
    for line in text.splitlines(keepends=True):
        here = offset
        offset += len(line.encode())
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 8:
            raise SceneParseError(path, here, f"expected 8 fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields[:7]]
            boxes.append(BoundingBox3D(values[:3], values[3:6], values[6], int(fields[7])))
        except ValueError as exc:
            raise SceneParseError(path, here, str(exc)) from None
    return boxes


def decode_ppm(data: bytes, path="image.ppm") -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneParseError(path, pos, "incomplete PPM header")
        tokens.append((start, data[start:pos]))
    if tokens[0][1] != b"P6":
        raise SceneParseError(path, 0, "not a binary PPM (P6)")
    try:
        width, height, maxval = (int(tok) for _, tok in tokens[1:])
    except ValueError:
        raise SceneParseError(path, tokens[1][0], "bad PPM dimensions") from None
    if maxval != 255 or width <= 0 or height <= 0:
        raise SceneParseError(path, tokens[3][0], "only 8-bit PPM images with positive size are supported")
    pos += 1  # single whitespace byte ends the header
    need = width * height * 3
    if len(data) - pos != need:
        raise SceneParseError(path, min(len(data), pos + need), f"expected {need} pixel bytes, got {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(height, width, 3).copy()


def read_scene(directory) -> SceneBundle:
    directory = Path(directory)
    cloud = parse_points(_read_bytes(directory / POINTS_FILE), directory / POINTS_FILE)
    labels = parse_labels(_read_bytes(directory / LABELS_FILE), directory / LABELS_FILE)
    if len(labels) != len(cloud):
        raise ConsistencyError(f"{directory}: {len(cloud)} points but {len(labels)} labels")
    calib_path = directory / CALIB_FILE
    k, chain = parse_calibration(_read_bytes(calib_path).decode(), calib_path)
    boxes = parse_boxes(_read_bytes(directory / BOXES_FILE).decode(), directory / BOXES_FILE)
    image = decode_ppm(_read_bytes(directory / IMAGE_FILE), directory / IMAGE_FILE)
    return SceneBundle(cloud, labels, image, k, chain, tuple(boxes))
