"""LiDAR frames, the road ROI box and the four-way region split."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAX_SPEED = 13.9  # m/s, 50 km/h


class Region(IntEnum):
    LN = 0
    RN = 1
    LF = 2
    RF = 3

    @property
    def is_near(self) -> bool:
        return self in (Region.LN, Region.RN)

    @property
    def is_left(self) -> bool:
        return self in (Region.LN, Region.LF)


# near region -> the far region ahead of it on the same wheel path
NEAR_FAR_PAIRS = ((Region.LN, Region.LF), (Region.RN, Region.RF))


@dataclass(frozen=True)
class RoiConfig:
    z_max: float = 0.1
    y_min: float = -1.75
    y_max: float = 1.75
    x_max: float = 48.7
    near_far_split: float = 12.0
    x_min: float = 3.2

    def __post_init__(self):
        if not (self.x_min < self.near_far_split < self.x_max):
            raise ValueError(
                f"need x_min < near_far_split < x_max, got "
                f"{self.x_min}, {self.near_far_split}, {self.x_max}"
            )
        if not (self.y_min < 0.0 < self.y_max):
            raise ValueError(f"need y_min < 0 < y_max, got {self.y_min}, {self.y_max}")

    def box(self, region: Region) -> tuple[float, float, float, float]:
        """(x_lo, x_hi, y_lo, y_hi) of a subregion."""
        x_lo, x_hi = (self.x_min, self.near_far_split) if region.is_near else (self.near_far_split, self.x_max)
        y_lo, y_hi = (0.0, self.y_max) if region.is_left else (self.y_min, 0.0)
        return x_lo, x_hi, y_lo, y_hi


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    reflectivity: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError("point coordinates must be finite")
        if not 0.0 <= self.reflectivity <= 255.0:
            raise ValueError(f"reflectivity {self.reflectivity} outside [0, 255]")


@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    """One LiDAR rotation. ``points`` is an (N, 4) array of x, y, z, reflectivity."""

    timestamp: int
    points: np.ndarray = field(repr=False)
    speed: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "points", pts)
        if not (0.0 <= self.speed <= MAX_SPEED):
            raise ValueError(f"speed {self.speed} m/s outside [0, {MAX_SPEED}]")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloudFrame):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.speed == other.speed
            and np.array_equal(self.points, other.points)
        )

    def iter_points(self) -> Iterator[Point]:
        for x, y, z, r in self.points:
            yield Point(float(x), float(y), float(z), float(r))


def roi_mask(points: np.ndarray, cfg: RoiConfig) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return (
        (z <= cfg.z_max)
        & (y >= cfg.y_min) & (y <= cfg.y_max)
        & (x >= cfg.x_min) & (x <= cfg.x_max)
    )


def filter_roi(frame: PointCloudFrame, cfg: RoiConfig = RoiConfig()) -> PointCloudFrame:
    """Keep only road-level returns inside the ROI box, in their original order."""
    return replace(frame, points=frame.points[roi_mask(frame.points, cfg)])


def in_roi(p: Point, cfg: RoiConfig) -> bool:
    return (
        p.z <= cfg.z_max
        and cfg.y_min <= p.y <= cfg.y_max
        and cfg.x_min <= p.x <= cfg.x_max
    )


def assign_region(p: Point, cfg: RoiConfig = RoiConfig()) -> Region:
    """Subregion of a single ROI point.

    y = 0 belongs to the left side and x = near_far_split to the near side.
    """
    if not in_roi(p, cfg):
        raise ValueError(f"{p} lies outside the ROI")
    if p.x <= cfg.near_far_split:
        return Region.LN if p.y >= 0.0 else Region.RN
    return Region.LF if p.y >= 0.0 else Region.RF


def assign_regions(points: np.ndarray, cfg: RoiConfig = RoiConfig()) -> np.ndarray:
    """Vectorised :func:`assign_region`; every row must already be inside the ROI."""
    if not roi_mask(points, cfg).all():
        raise ValueError("assign_regions got points outside the ROI")
    return np.where(points[:, 1] >= 0.0, 0, 1) + np.where(points[:, 0] > cfg.near_far_split, 2, 0)


def overlap_length(step_back: int, speed: float, sample_time: float, near_far_split: float = 12.0) -> float:
    """Distance a far-region slice seen ``step_back`` frames ago now overlaps the near region."""
    if step_back < 1:
        raise ValueError("step_back must be >= 1")
    if sample_time <= 0:
        raise ValueError("sample_time must be positive")
    if speed < 0:
        raise ValueError(f"negative speed {speed}")
    return min(step_back * sample_time * speed, near_far_split)


# -- JSON-lines frame streams ------------------------------------------------


class StreamFormatError(ValueError):
    pass


def frame_to_record(frame: PointCloudFrame, decimals: int | None = 4) -> dict:
    pts = frame.points if decimals is None else np.round(frame.points, decimals)
    return {"t_ms": int(frame.timestamp), "v_mps": float(frame.speed), "pts": pts.tolist()}


def write_frames(path: str | Path, frames: Iterable[PointCloudFrame], decimals: int | None = 4) -> int:
    n = 0
    with open(path, "w") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_record(frame, decimals), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_frames(path: str | Path) -> Iterator[PointCloudFrame]:
    """Read a frame stream, rejecting malformed lines and non-increasing timestamps."""
    last_t = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                t = int(rec["t_ms"])
                frame = PointCloudFrame(t, np.asarray(rec["pts"], dtype=np.float64).reshape(-1, 4), float(rec["v_mps"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise StreamFormatError(f"{path}:{lineno}: bad frame record ({exc})") from exc
            if last_t is not None and t <= last_t:
                raise StreamFormatError(f"{path}:{lineno}: timestamp {t} not after {last_t}")
            last_t = t
            yield frame


def read_frames(path: str | Path) -> list[PointCloudFrame]:
    return list(iter_frames(path))
