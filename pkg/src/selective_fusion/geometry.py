"""Boxes, overlap and the birds-eye-view to camera-image transforms.

Conventions: boxes are corner format ``(x1, y1, x2, y2)``. The camera frame is
right-handed with +z along the optical axis, image u to the right and v down.
Radar/lidar Cartesian frames have x to the right, y forward and z up.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from selective_fusion.errors import BehindCameraError, ConfigError, DomainError

# Representative object heights in meters, keyed by class label.
CLASS_NAMES = {
    1: "car",
    2: "van",
    3: "truck",
    4: "bus",
    5: "motorbike",
    6: "bicycle",
    7: "pedestrian",
    8: "group",
}
DEFAULT_CLASS_HEIGHTS = {1: 1.5, 2: 2.0, 3: 3.0, 4: 3.2, 5: 1.4, 6: 1.4, 7: 1.7, 8: 1.7}


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list(), dtype=float)

    def clip(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        """Build a box from two arbitrary corners, reordering if needed."""
        return cls(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 if either has zero area."""
    area_a = a.area
    area_b = b.area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` and ``(m, 4)`` corner arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    # Zero-area boxes have zero intersection; guard only the 0/0 case.
    return inter / np.where(union > 0, union, 1.0)


@dataclass(frozen=True)
class RadarGrid:
    gamma: float
    w: int
    h: int

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"radar resolution must be positive, got {self.gamma}")
        if self.w < 1 or self.h < 1:
            raise ConfigError(f"radar image size must be >= 1, got {self.w}x{self.h}")


@dataclass(frozen=True)
class SensorExtrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0):
            raise ConfigError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ConfigError("rotation matrix must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    # Image size used for clipping; defaults to twice the principal point.
    width: Optional[float] = None
    height: Optional[float] = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("focal lengths must be positive")
        if self.width is None:
            object.__setattr__(self, "width", 2.0 * self.cx)
        if self.height is None:
            object.__setattr__(self, "height", 2.0 * self.cy)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ClassHeightTable:
    heights: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_CLASS_HEIGHTS))

    def __post_init__(self):
        heights = {int(k): float(v) for k, v in self.heights.items()}
        if any(v <= 0 for v in heights.values()):
            raise ConfigError("class heights must be positive")
        object.__setattr__(self, "heights", heights)

    def __getitem__(self, label: int) -> float:
        try:
            return self.heights[label]
        except KeyError:
            raise KeyError(f"no class height for label {label!r}") from None

    def __contains__(self, label) -> bool:
        return label in self.heights


def radar_pixel_to_cartesian(u: float, v: float, grid: RadarGrid) -> tuple:
    """Map a radar image pixel to metric (x, y) with the origin at the image center."""
    if not (0 <= u <= grid.w and 0 <= v <= grid.h):
        raise DomainError(f"pixel ({u}, {v}) outside {grid.w}x{grid.h} radar image")
    x = grid.gamma * (u - grid.w / 2)
    y = grid.gamma * (-v + grid.h / 2)
    return (x, y)


def cartesian_to_radar_pixel(x: float, y: float, grid: RadarGrid) -> tuple:
    """Inverse of :func:`radar_pixel_to_cartesian` (no range check)."""
    return (x / grid.gamma + grid.w / 2, grid.h / 2 - y / grid.gamma)


def lift_with_class_height(x: float, y: float, label: int, table: ClassHeightTable) -> np.ndarray:
    return np.array([x, y, table[label]], dtype=float)


def to_camera_frame(p, e: SensorExtrinsics) -> np.ndarray:
    """Express a sensor-frame point in the camera frame: ``R (p + T)``."""
    return e.rotation @ (np.asarray(p, dtype=float) + e.translation)


def project_to_image(p, K: CameraIntrinsics) -> tuple:
    x, y, z = np.asarray(p, dtype=float)
    if not z > 0:
        raise BehindCameraError(f"point depth {z} is not in front of the camera")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def yaw_rotation(angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians about the +z axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def bev_to_camera_axes() -> np.ndarray:
    """Rotation taking (right, forward, up) sensor axes to (right, down, forward) camera axes."""
    return np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def bev_box_to_image_box(
    box: BoundingBox,
    label: int,
    grid: RadarGrid,
    table: ClassHeightTable,
    e: SensorExtrinsics,
    K: CameraIntrinsics,
) -> Optional[BoundingBox]:
    """Project a radar-pixel box into the camera image.

    The four footprint corners are lifted at ground level and at the class
    height, transformed and projected; the result is the enclosing image
    rectangle clipped to the image, or ``None`` when nothing is in view.
    """
    height = table[label]
    corners = [(box.x1, box.y1), (box.x2, box.y1), (box.x2, box.y2), (box.x1, box.y2)]
    us, vs = [], []
    for u, v in corners:
        x, y = radar_pixel_to_cartesian(u, v, grid)
        for z in (0.0, height):
            pc = to_camera_frame((x, y, z), e)
            if pc[2] <= 0:
                continue
            pu, pv = project_to_image(pc, K)
            us.append(pu)
            vs.append(pv)
    if not us:
        return None
    clipped = BoundingBox(min(us), min(vs), max(us), max(vs)).clip(K.width, K.height)
    if clipped.area <= 0:
        return None
    return clipped


@dataclass(frozen=True)
class Calibration:
    grid: RadarGrid
    extrinsics: SensorExtrinsics
    intrinsics: CameraIntrinsics
    class_heights: ClassHeightTable


def load_calibration(path) -> Calibration:
    """Read a calibration JSON file (grid, extrinsics, intrinsics, class heights)."""
    data = json.loads(Path(path).read_text())
    return calibration_from_dict(data)


def calibration_from_dict(data: dict) -> Calibration:
    try:
        grid = RadarGrid(**data["grid"])
        ext = data["extrinsics"]
        extrinsics = SensorExtrinsics(
            np.asarray(ext["rotation"], dtype=float).reshape(3, 3),
            np.asarray(ext["translation"], dtype=float),
        )
        intrinsics = CameraIntrinsics(**data["intrinsics"])
        heights = data.get("class_heights", DEFAULT_CLASS_HEIGHTS)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad calibration: {exc}") from exc
    return Calibration(grid, extrinsics, intrinsics, ClassHeightTable(heights))


def calibration_to_dict(cal: Calibration) -> dict:
    K = cal.intrinsics
    return {
        "grid": {"gamma": cal.grid.gamma, "w": cal.grid.w, "h": cal.grid.h},
        "extrinsics": {
            "rotation": cal.extrinsics.rotation.ravel().tolist(),
            "translation": cal.extrinsics.translation.tolist(),
        },
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
        "class_heights": {str(k): v for k, v in cal.class_heights.heights.items()},
    }


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in boxes], dtype=float)
