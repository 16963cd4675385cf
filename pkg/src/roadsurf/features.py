"""Per-region LiDAR aggregates, time windowing and labelled datasets."""

from __future__ import annotations

import bisect
import struct
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .pointcloud import PointCloudFrame, Region, RoiConfig

N_FEATURES = 3  # point count, mean reflectivity, speed
DEFAULT_WINDOW = 10  # l_t: frames of history on top of the current one


class ClassLabel(IntEnum):
    DRY_ASPHALT = 0
    DRY_CEMENT = 1
    DRY_GRAVEL = 2
    DRY_SAND = 3
    WET_ASPHALT = 4
    WET_CEMENT = 5
    WET_GRAVEL = 6
    WET_SAND = 7
    SNOW = 8

    @property
    def condition(self) -> str:
        return self.name.split("_")[0].lower()


N_CLASSES = len(ClassLabel)
CLASS_NAMES = tuple(c.name.lower() for c in ClassLabel)
DRY_CLASSES = tuple(c for c in ClassLabel if c.condition == "dry")
WET_CLASSES = tuple(c for c in ClassLabel if c.condition == "wet")


class NotWarmError(RuntimeError):
    """Not enough frames buffered to fill the time window yet."""


class RegionFeatures(NamedTuple):
    s_p: int
    s_r: float


def feature_dim(window: int = DEFAULT_WINDOW, with_speed: bool = True) -> int:
    return (N_FEATURES if with_speed else N_FEATURES - 1) * (window + 1)


def frame_region_features(frame: PointCloudFrame, cfg: RoiConfig = RoiConfig()) -> np.ndarray:
    """(4, 2) array of [s_p, s_r] rows indexed by :class:`Region`.

    Empty regions report s_r = 0.
    """
    counts, sums = kernels.region_stats(
        frame.points, cfg.z_max, cfg.y_min, cfg.y_max, cfg.x_min, cfg.x_max, cfg.near_far_split
    )
    out = np.zeros((4, 2))
    out[:, 0] = counts
    nz = counts > 0
    out[nz, 1] = sums[nz] / counts[nz]
    return out


def aggregate_region(frame: PointCloudFrame, region: Region, cfg: RoiConfig = RoiConfig()) -> RegionFeatures:
    row = frame_region_features(frame, cfg)[int(region)]
    return RegionFeatures(int(row[0]), float(row[1]))


def resample_speed(samples: Sequence[tuple[float, float]], frame_timestamp: float) -> float:
    """Zero-order hold of a faster speed trace onto a frame timestamp.

    Returns the latest sample at or before ``frame_timestamp``; frames older
    than the whole trace get the earliest sample.
    """
    if not samples:
        raise ValueError("speed trace is empty")
    times = [t for t, _ in samples]
    i = bisect.bisect_right(times, frame_timestamp) - 1
    return float(samples[max(i, 0)][1])


def stack_window(history: Sequence[tuple[RegionFeatures, float]], window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Build the network input from the newest ``window + 1`` entries of ``history``.

    ``history`` is ordered oldest to newest. The output is block-major
    ([counts | reflectivities | speeds]) with the newest frame first in each
    block.
    """
    if len(history) < window + 1:
        raise NotWarmError(f"need {window + 1} frames, have {len(history)}")
    recent = history[len(history) - window - 1:][::-1]
    sp = [f.s_p for f, _ in recent]
    sr = [f.s_r for f, _ in recent]
    v = [s for _, s in recent]
    return np.array(sp + sr + v, dtype=np.float64)


def stack_stream(s_p: np.ndarray, s_r: np.ndarray, speed: np.ndarray, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Window every warm frame of one region's stream at once.

    Row ``j`` is the input for frame ``window + j``; equivalent to calling
    :func:`stack_window` on each prefix.
    """
    n = len(s_p)
    if n < window + 1:
        return np.empty((0, N_FEATURES * (window + 1)))
    # idx[j, i] = frame index of lag i for warm frame j
    idx = np.arange(window, n)[:, None] - np.arange(window + 1)[None, :]
    return np.hstack([np.asarray(s_p, float)[idx], np.asarray(s_r, float)[idx], np.asarray(speed, float)[idx]])


class WindowBuffer:
    """Streaming counterpart of :func:`stack_window` for one region."""

    def __init__(self, window: int = DEFAULT_WINDOW):
        self.window = window
        self._buf: deque[tuple[RegionFeatures, float]] = deque(maxlen=window + 1)

    def push(self, feats: RegionFeatures, speed: float) -> None:
        self._buf.append((feats, speed))

    @property
    def warm(self) -> bool:
        return len(self._buf) == self.window + 1

    def vector(self) -> np.ndarray:
        return stack_window(list(self._buf), self.window)


def one_hot(label: int, n_classes: int = N_CLASSES) -> np.ndarray:
    if not 0 <= int(label) < n_classes:
        raise ValueError(f"class index {label} outside [0, {n_classes})")
    out = np.zeros(n_classes)
    out[int(label)] = 1.0
    return out


def drop_speed_block(x: np.ndarray, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Strip the speed block from windowed inputs (33 -> 22 columns by default)."""
    return np.asarray(x)[..., : 2 * (window + 1)]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def from_data(cls, x: np.ndarray) -> "NormStats":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        flat = std == 0
        # constant columns pass through untouched
        mean[flat] = 0.0
        std[flat] = 1.0
        return cls(mean, std)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def standardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ValueError(f"feature dim {x.shape[-1]} does not match stats dim {stats.dim}")
    return (x - stats.mean) / stats.std


# -- datasets -----------------------------------------------------------------

DATASET_MAGIC = b"RSDS"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIQ")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Labelled samples: region id, raw (unstandardised) input, one-hot target."""

    regions: np.ndarray
    x: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.uint8)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if not (len(self.regions) == len(self.x) == len(self.targets)):
            raise ValueError("regions, x and targets must have equal length")

    def __len__(self) -> int:
        return len(self.regions)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)

    def for_region(self, region: Region) -> "Dataset":
        m = self.regions == int(region)
        return Dataset(self.regions[m], self.x[m], self.targets[m])

    def without_speed(self, window: int = DEFAULT_WINDOW) -> "Dataset":
        return Dataset(self.regions, drop_speed_block(self.x, window), self.targets)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(
            np.concatenate([p.regions for p in parts]),
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.targets for p in parts]),
        )

    def save(self, path: str | Path) -> None:
        n, dim = self.x.shape
        n_c = self.targets.shape[1]
        rec = np.empty(n, dtype=_record_dtype(dim, n_c))
        rec["region"] = self.regions
        rec["x"] = self.x
        rec["t"] = self.targets
        with open(path, "wb") as fh:
            fh.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n_c, dim, n))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        raw = Path(path).read_bytes()
        if len(raw) < _DS_HEADER.size:
            raise DatasetFormatError(f"{path}: truncated header")
        magic, version, n_c, dim, count = _DS_HEADER.unpack_from(raw)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        dt = _record_dtype(dim, n_c)
        body = raw[_DS_HEADER.size:]
        if len(body) != count * dt.itemsize:
            raise DatasetFormatError(f"{path}: expected {count} records, body has {len(body)} bytes")
        rec = np.frombuffer(body, dtype=dt, count=count)
        return cls(rec["region"].copy(), rec["x"].astype(np.float64), rec["t"].astype(np.float64))


def _record_dtype(dim: int, n_c: int) -> np.dtype:
    return np.dtype([("region", "u1"), ("x", "<f4", (dim,)), ("t", "<f4", (n_c,))])
