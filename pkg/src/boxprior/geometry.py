"""Rigid transforms, pinhole projection, rasterization and box geometry.

Point clouds are stored as arrays (struct of arrays) so that projection of
millions of points stays vectorized. Frames follow the usual LiDAR
convention (x forward, y left, z up); the camera frame is x right, y down,
z forward. Transform labels are written ``"target<-source"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from boxprior.errors import BoxNotVisibleError, ChainError, SceneParseError, TransformError

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float
    intensity: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError("point coordinates must be finite")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points in the LiDAR frame.

    Args:
        xyz: Array of shape (N, 3), meters.
        intensity: Array of shape (N,), reflection rate in [0, 1].
    """

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
        if xyz.shape[0] != intensity.shape[0]:
            raise ValueError("xyz and intensity lengths differ")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        if intensity.size and (intensity.min() < 0.0 or intensity.max() > 1.0):
            raise ValueError("intensity outside [0, 1]")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)

    @classmethod
    def from_points(cls, points: Sequence[Point3]) -> "PointCloud":
        xyz = np.array([[p.x, p.y, p.z] for p in points], dtype=np.float64).reshape(-1, 3)
        return cls(xyz, np.array([p.intensity for p in points], dtype=np.float64))

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    @property
    def points(self) -> list[Point3]:
        return [Point3(*map(float, row), float(i)) for row, i in zip(self.xyz, self.intensity)]

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def take(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.intensity[index])

    def equals(self, other: "PointCloud") -> bool:
        return np.array_equal(self.xyz, other.xyz) and np.array_equal(self.intensity, other.intensity)


@dataclass(frozen=True)
class ImagePlane:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image plane dimensions must be positive")

    @property
    def num_pixels(self) -> int:
        return self.width * self.height


def _as_matrix(entries, shape) -> np.ndarray:
    m = np.array(entries, dtype=np.float64)
    if m.shape != shape:
        m = m.reshape(shape)
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class IntrinsicMatrix:
    """3x4 camera matrix mapping camera-frame points to homogeneous pixels."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.matrix, (3, 4))
        if not np.array_equal(m[2], [0.0, 0.0, 1.0, 0.0]):
            raise TransformError("intrinsic bottom row must be [0, 0, 1, 0]")
        if not (m[0, 0] > 0 and m[1, 1] > 0):
            raise TransformError("focal entries must be positive")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_pinhole(cls, fx: float, fy: float, cx: float, cy: float) -> "IntrinsicMatrix":
        return cls([[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])

    def __eq__(self, other):
        return isinstance(other, IntrinsicMatrix) and np.array_equal(self.matrix, other.matrix)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """4x4 homogeneous rigid transform; ``T @ [x, y, z, 1]`` maps source to target."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.matrix, (4, 4))
        if not np.all(np.isfinite(m)):
            raise TransformError("transform entries must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise TransformError("transform bottom row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() >= ORTHONORMAL_TOL or np.linalg.det(r) <= 0:
            raise TransformError("rotation block is not a proper rotation")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rotation_translation(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        return invert_transform(self)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def __eq__(self, other):
        return isinstance(other, RigidTransform) and np.array_equal(self.matrix, other.matrix)


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def parse_frame_label(label: str) -> tuple[str, str]:
    """Split ``"target<-source"`` into its two frame names."""
    parts = label.split("<-")
    if len(parts) != 2 or not all(parts) or any(ch.isspace() or ch == ":" for ch in label):
        raise ChainError(f"malformed stage label {label!r}; expected 'target<-source'")
    return parts[0], parts[1]


@dataclass(frozen=True)
class PoseChain:
    """Transform stages listed in application order.

    The first stage consumes LiDAR-frame points; the target frame of each
    stage must be the source frame of the next one.
    """

    stages: tuple[tuple[str, RigidTransform], ...]

    def __post_init__(self):
        stages = tuple((str(label), t) for label, t in self.stages)
        if not stages:
            raise ChainError("pose chain is empty")
        frames = [parse_frame_label(label) for label, _ in stages]
        for i in range(len(frames) - 1):
            if frames[i][0] != frames[i + 1][1]:
                raise ChainError(
                    f"stage {i} targets {frames[i][0]!r} but stage {i + 1} "
                    f"expects source {frames[i + 1][1]!r}"
                )
        object.__setattr__(self, "stages", stages)

    @property
    def source(self) -> str:
        return parse_frame_label(self.stages[0][0])[1]

    @property
    def target(self) -> str:
        return parse_frame_label(self.stages[-1][0])[0]

    def __len__(self) -> int:
        return len(self.stages)

    def inverted(self) -> "PoseChain":
        """Chain mapping ``target`` back to ``source``."""
        out = []
        for label, t in reversed(self.stages):
            dst, src = parse_frame_label(label)
            out.append((f"{src}<-{dst}", invert_transform(t)))
        return PoseChain(tuple(out))


def compose_chain(chain: PoseChain) -> RigidTransform:
    """Collapse a chain into a single transform.

    With stages ``[ego_tl<-lidar, global<-ego_tl, ego_tc<-global,
    camera<-ego_tc]`` this is ``camera<-ego_tc @ ego_tc<-global @
    global<-ego_tl @ ego_tl<-lidar``.
    """
    if not isinstance(chain, PoseChain):
        chain = PoseChain(tuple(chain))
    m = chain.stages[0][1].matrix.copy()
    for _, t in chain.stages[1:]:
        m = t.matrix @ m
    m[3] = (0.0, 0.0, 0.0, 1.0)
    return RigidTransform(m)


def invert_transform(t: RigidTransform) -> RigidTransform:
    r = t.rotation
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -(r.T @ t.translation)
    return RigidTransform(m)


class ProjectedPoint(NamedTuple):
    source_index: int
    u: float
    v: float
    depth: float


@dataclass(frozen=True, eq=False)
class Projection:
    """Points that landed in the image, in source order.

    ``source_index[k]`` is the row of the original cloud that produced the
    k-th projected point; ``len(self)`` is the in-view point count.
    """

    source_index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray

    def __len__(self) -> int:
        return self.source_index.shape[0]

    def __getitem__(self, k: int) -> ProjectedPoint:
        return ProjectedPoint(int(self.source_index[k]), float(self.u[k]), float(self.v[k]), float(self.depth[k]))

    def __iter__(self) -> Iterator[ProjectedPoint]:
        for k in range(len(self)):
            yield self[k]

    def pixels(self) -> np.ndarray:
        """Rasterized (column, row) pixel of every projected point, shape (n, 2)."""
        return rasterize_all(self.u, self.v)


def project_points(cloud: PointCloud, k: IntrinsicMatrix, t: RigidTransform, plane: ImagePlane) -> Projection:
    """Project a cloud through ``K @ T`` and keep points inside the image.

    The divisor is the camera-frame depth (third homogeneous component);
    points with depth <= 0 or pixel coordinates outside
    ``[0, width) x [0, height)`` are dropped.
    """
    p = k.matrix @ t.matrix
    xyz = cloud.xyz
    depth = xyz @ p[2, :3] + p[2, 3]
    front = np.flatnonzero(depth > 0)
    pts = xyz[front]
    d = depth[front]
    u = (pts @ p[0, :3] + p[0, 3]) / d
    v = (pts @ p[1, :3] + p[1, 3]) / d
    keep = (u >= 0) & (u < plane.width) & (v >= 0) & (v < plane.height)
    return Projection(front[keep], u[keep], v[keep], d[keep])


def rasterize(pp: ProjectedPoint) -> tuple[int, int]:
    return math.floor(pp.u), math.floor(pp.v)


def rasterize_all(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.empty((u.shape[0], 2), dtype=np.int64)
    out[:, 0] = np.floor(u)
    out[:, 1] = np.floor(v)
    return out


@dataclass(frozen=True)
class BoundingBox3D:
    """Yaw-rotated cuboid.

    ``size`` is (width, length, height): length runs along the heading
    (x at yaw 0), width along y, height along z.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size need three components")
        if not all(s > 0 for s in self.size):
            raise ValueError("box size components must be positive")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")


@dataclass(frozen=True)
class BoundingBox2D:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate 2D box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @classmethod
    def whole_image(cls, plane: ImagePlane, class_id: int = 0) -> "BoundingBox2D":
        # Strict bounds: a margin of one unit keeps u = 0 inside.
        return cls(-1.0, -1.0, float(plane.width), float(plane.height), class_id)


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=np.float64
)


def box3d_corners(box: BoundingBox3D) -> np.ndarray:
    """The 8 corners of the box, shape (8, 3)."""
    w, length, h = box.size
    half = _CORNER_SIGNS * (0.5 * length, 0.5 * w, 0.5 * h)
    return half @ rotation_z(box.yaw).T + np.asarray(box.center)


def points_in_box3d(xyz: np.ndarray, box: BoundingBox3D) -> np.ndarray:
    """Boolean mask of points inside (or on) the cuboid."""
    local = (np.asarray(xyz) - np.asarray(box.center)) @ rotation_z(box.yaw)
    w, length, h = box.size
    half = np.array([0.5 * length, 0.5 * w, 0.5 * h])
    return np.all(np.abs(local) <= half, axis=1)


def project_box3d(
    box: BoundingBox3D,
    k: IntrinsicMatrix,
    t: RigidTransform,
    plane: ImagePlane,
    clamp: bool = True,
) -> BoundingBox2D:
    """Axis-aligned image box spanning the projected corners.

    Corners are projected without FOV clipping; only those in front of the
    camera contribute. The extreme u and v values give the largest box,
    which is then clamped to the image unless ``clamp`` is False.
    """
    corners = np.hstack([box3d_corners(box), np.ones((8, 1))])
    q = corners @ (k.matrix @ t.matrix).T
    front = q[:, 2] > 0
    if not front.any():
        raise BoxNotVisibleError("all box corners are behind the camera")
    u = q[front, 0] / q[front, 2]
    v = q[front, 1] / q[front, 2]
    x1, x2, y1, y2 = u.min(), u.max(), v.min(), v.max()
    if clamp:
        x1, x2 = np.clip([x1, x2], 0.0, plane.width)
        y1, y2 = np.clip([y1, y2], 0.0, plane.height)
    if not (x1 < x2 and y1 < y2) or x2 <= 0 or y2 <= 0 or x1 >= plane.width or y1 >= plane.height:
        raise BoxNotVisibleError("box does not cover any area of the image")
    return BoundingBox2D(float(x1), float(y1), float(x2), float(y2), box.class_id)


def box2d_mask(proj: Projection, box: BoundingBox2D) -> np.ndarray:
    """Mask over projected points strictly inside the box."""
    return (box.x1 < proj.u) & (proj.u < box.x2) & (box.y1 < proj.v) & (proj.v < box.y2)


def points_in_box2d(proj: Projection, box: BoundingBox2D) -> np.ndarray:
    """Source indices of projected points strictly inside ``box``."""
    return proj.source_index[box2d_mask(proj, box)]


# --- calibration text format ------------------------------------------------


def _fmt(values) -> str:
    return " ".join(format(float(x), ".17g") for x in np.ravel(values))


def format_calibration(k: IntrinsicMatrix, chain: PoseChain) -> str:
    lines = [f"K: {_fmt(k.matrix)}"]
    lines += [f"T {label}: {_fmt(t.matrix)}" for label, t in chain.stages]
    return "\n".join(lines) + "\n"


def parse_calibration(text: str, path: str | Path = "<calib>") -> tuple[IntrinsicMatrix, PoseChain]:
    k = None
    stages = []
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.strip()
        here = offset
        offset += len(line.encode())
        if not body:
            continue
        head, sep, tail = body.partition(":")
        if not sep:
            raise SceneParseError(path, here, "missing ':' separator")
        try:
            values = [float(x) for x in tail.split()]
        except ValueError as exc:
            raise SceneParseError(path, here, str(exc)) from None
        try:
            if head == "K":
                if len(values) != 12:
                    raise SceneParseError(path, here, f"K needs 12 values, got {len(values)}")
                k = IntrinsicMatrix(np.reshape(values, (3, 4)))
            elif head.startswith("T "):
                if len(values) != 16:
                    raise SceneParseError(path, here, f"T needs 16 values, got {len(values)}")
                stages.append((head[2:].strip(), RigidTransform(np.reshape(values, (4, 4)))))
            else:
                raise SceneParseError(path, here, f"unknown record {head!r}")
        except (TransformError, ChainError) as exc:
            raise SceneParseError(path, here, str(exc)) from None
    if k is None:
        raise SceneParseError(path, offset, "no K record")
    try:
        chain = PoseChain(tuple(stages))
    except ChainError as exc:
        raise SceneParseError(path, offset, str(exc)) from None
    return k, chain


def write_calibration(path: str | Path, k: IntrinsicMatrix, chain: PoseChain) -> None:
    Path(path).write_text(format_calibration(k, chain))


def read_calibration(path: str | Path) -> tuple[IntrinsicMatrix, PoseChain]:
    path = Path(path)
    return parse_calibration(path.read_text(), path)
