"""Seeded synthetic LiDAR streams and training corpora.

Every class/region pair has a profile: point counts are drawn from a
truncated normal whose mean drops linearly with ego speed, reflectivities
are i.i.d. truncated normal, points are spread uniformly over the region box.
The numbers in ``data/default_profiles.json`` are synthetic; they only keep
the qualitative ordering of the real sensor data (wet surfaces return fewer
points than dry ones, wet asphalt reflects strongly, snow weakly).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .features import (
    CLASS_NAMES,
    DEFAULT_WINDOW,
    N_CLASSES,
    ClassLabel,
    Dataset,
    frame_region_features,
    stack_stream,
)
from .pointcloud import MAX_SPEED, PointCloudFrame, Region, RoiConfig

logger = logging.getLogger(__name__)

FRAME_PERIOD_MS = 100
REFL_RANGE = (0.0, 255.0)


@dataclass(frozen=True)
class RegionProfile:
    refl_mean: float
    refl_std: float
    count_mean: float
    count_std: float
    speed_coupling: float = 0.0  # points lost per m/s

    def __post_init__(self):
        if self.refl_std <= 0 or self.count_std <= 0:
            raise ValueError("profile standard deviations must be positive")
        if not REFL_RANGE[0] <= self.refl_mean <= REFL_RANGE[1]:
            raise ValueError(f"refl_mean {self.refl_mean} outside sensor range")
        if self.count_mean < 0:
            raise ValueError("count_mean must be >= 0")

    def count_at(self, speed: float) -> float:
        return self.count_mean - self.speed_coupling * speed

    def shifted(self, frac: float, count_frac: float | None = None) -> "RegionProfile":
        """Scale the reflectivity mean by 1 + frac and the count mean by 1 + count_frac."""
        count_frac = frac if count_frac is None else count_frac
        return RegionProfile(
            min(self.refl_mean * (1 + frac), REFL_RANGE[1]),
            self.refl_std,
            self.count_mean * (1 + count_frac),
            self.count_std,
            self.speed_coupling,
        )


@dataclass(frozen=True)
class ClassProfile:
    regions: Mapping[Region, RegionProfile]

    def __getitem__(self, region: Region) -> RegionProfile:
        return self.regions[Region(region)]

    def shifted(self, frac: float, count_frac: float | None = None) -> "ClassProfile":
        return ClassProfile({r: p.shifted(frac, count_frac) for r, p in self.regions.items()})


Profiles = dict[ClassLabel, ClassProfile]


def profiles_from_dict(raw: Mapping) -> Profiles:
    out = {}
    for name, regions in raw.items():
        label = ClassLabel[name.upper()]
        out[label] = ClassProfile({Region[r]: RegionProfile(**p) for r, p in regions.items()})
    missing = set(ClassLabel) - set(out)
    if missing:
        raise ValueError(f"profiles missing classes: {sorted(c.name for c in missing)}")
    for label, prof in out.items():
        if set(prof.regions) != set(Region):
            raise ValueError(f"{label.name}: profile must cover all four regions")
    return out


def profiles_to_dict(profiles: Profiles) -> dict:
    return {
        CLASS_NAMES[c]: {r.name: asdict(p) for r, p in sorted(profiles[c].regions.items())}
        for c in sorted(profiles)
    }


def load_profiles(path: str | Path) -> Profiles:
    return profiles_from_dict(json.loads(Path(path).read_text()))


def default_profiles() -> Profiles:
    text = resources.files("roadsurf").joinpath("data/default_profiles.json").read_text()
    return profiles_from_dict(json.loads(text))


def _bd_1d(m1, s1, m2, s2):
    v = s1 * s1 + s2 * s2
    return (m1 - m2) ** 2 / (4 * v) + 0.5 * np.log(v / (2 * s1 * s2))


def bhattacharyya(a: RegionProfile, b: RegionProfile, speed: float = 0.0) -> float:
    """Distance between the per-frame (s_p, s_r) distributions of two profiles.

    Both features are treated as independent normals; the frame mean
    reflectivity has spread refl_std / sqrt(count).
    """
    ca, cb = a.count_at(speed), b.count_at(speed)
    d_count = _bd_1d(ca, a.count_std, cb, b.count_std)
    d_refl = _bd_1d(a.refl_mean, a.refl_std / np.sqrt(max(ca, 1.0)), b.refl_mean, b.refl_std / np.sqrt(max(cb, 1.0)))
    return float(d_count + d_refl)


def separation_matrix(profiles: Profiles, speed: float = 0.0) -> np.ndarray:
    """Best-region Bhattacharyya distance for every class pair."""
    out = np.full((N_CLASSES, N_CLASSES), np.inf)
    for i, j in combinations(range(N_CLASSES), 2):
        d = max(bhattacharyya(profiles[ClassLabel(i)][r], profiles[ClassLabel(j)][r], speed) for r in Region)
        out[i, j] = out[j, i] = d
    return out


# -- scenarios ------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """A drive: speed knots (t_s, v_mps) interpolated linearly and per-lane class timelines.

    ``left`` / ``right`` are lists of (t_start_s, class name) sorted by time,
    the first entry starting at 0.
    """

    duration: float
    speed_knots: tuple[tuple[float, float], ...]
    left: tuple[tuple[float, str], ...]
    right: tuple[tuple[float, str], ...]
    seed: int = 0
    clutter_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "speed_knots", tuple((float(t), float(v)) for t, v in self.speed_knots))
        object.__setattr__(self, "left", tuple((float(t), str(c)) for t, c in self.left))
        object.__setattr__(self, "right", tuple((float(t), str(c)) for t, c in self.right))
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not self.speed_knots:
            raise ValueError("speed profile needs at least one knot")
        times = [t for t, _ in self.speed_knots]
        if times != sorted(times):
            raise ValueError("speed knots must be sorted by time")
        if any(not 0.0 <= v <= MAX_SPEED for _, v in self.speed_knots):
            raise ValueError(f"speeds must lie in [0, {MAX_SPEED}] m/s")
        for name, sched in (("left", self.left), ("right", self.right)):
            if not sched or sched[0][0] > 0.0:
                raise ValueError(f"{name} schedule must start at t=0")
            if [t for t, _ in sched] != sorted(t for t, _ in sched):
                raise ValueError(f"{name} schedule must be sorted")
            for _, c in sched:
                ClassLabel[c.upper()]
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ValueError("clutter_fraction must lie in [0, 1)")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * 1000 / FRAME_PERIOD_MS))

    def speed_at(self, t: float) -> float:
        ts, vs = zip(*self.speed_knots)
        return float(np.interp(t, ts, vs))

    def label_at(self, t: float, left: bool) -> ClassLabel:
        sched = self.left if left else self.right
        current = sched[0][1]
        for start, c in sched:
            if start <= t:
                current = c
        return ClassLabel[current.upper()]

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ScenarioSpec":
        return cls(
            duration=raw["duration"],
            speed_knots=raw["speed_knots"],
            left=raw["left"],
            right=raw.get("right", raw["left"]),
            seed=raw.get("seed", 0),
            clutter_fraction=raw.get("clutter_fraction", 0.1),
        )

    def to_dict(self) -> dict:
        return {
            "duration": self.duration,
            "speed_knots": [list(k) for k in self.speed_knots],
            "left": [list(k) for k in self.left],
            "right": [list(k) for k in self.right],
            "seed": self.seed,
            "clutter_fraction": self.clutter_fraction,
        }


def load_scenario(path: str | Path) -> ScenarioSpec:
    try:
        return ScenarioSpec.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed scenario ({exc})") from exc


def default_scenario(seed: int = 0, duration: float = 100.0) -> ScenarioSpec:
    """A mixed drive with a split-friction stretch."""
    return ScenarioSpec(
        duration=duration,
        speed_knots=((0.0, 4.0), (0.3 * duration, 12.0), (0.6 * duration, 8.0), (duration, 13.0)),
        left=((0.0, "dry_asphalt"), (0.25 * duration, "wet_asphalt"), (0.5 * duration, "snow"), (0.75 * duration, "dry_gravel")),
        right=((0.0, "dry_asphalt"), (0.25 * duration, "wet_cement"), (0.5 * duration, "snow"), (0.75 * duration, "dry_sand")),
        seed=seed,
    )


def truncated_normal(rng: np.random.Generator, mean, std, lo, hi, size) -> np.ndarray:
    """Rejection sampler; redraws out-of-range values until all lie in [lo, hi]."""
    out = rng.normal(mean, std, size)
    bad = (out < lo) | (out > hi)
    for _ in range(1000):
        n_bad = int(bad.sum())
        if not n_bad:
            return out
        out[bad] = rng.normal(mean, std, n_bad)
        bad = (out < lo) | (out > hi)
    # pathological profile far outside the range
    return np.clip(out, lo, hi)


def _region_points(rng, prof: RegionProfile, region: Region, speed: float, roi: RoiConfig) -> np.ndarray:
    n = int(round(truncated_normal(rng, prof.count_at(speed), prof.count_std, 0.0, np.inf, 1)[0]))
    x_lo, x_hi, y_lo, y_hi = roi.box(region)
    u = rng.random((n, 3))
    pts = np.empty((n, 4))
    # 1 - u lies in (0, 1]: keeps far points off the split and right points off y = 0
    if region.is_near:
        pts[:, 0] = x_lo + (x_hi - x_lo) * u[:, 0]
    else:
        pts[:, 0] = x_lo + (x_hi - x_lo) * (1.0 - u[:, 0])
    pts[:, 1] = (y_hi if region.is_left else y_lo) * (1.0 - u[:, 1])
    pts[:, 2] = roi.z_max * (u[:, 2] - 0.5)
    pts[:, 3] = truncated_normal(rng, prof.refl_mean, prof.refl_std, *REFL_RANGE, n)
    return pts


def _clutter(rng, n: int, roi: RoiConfig) -> np.ndarray:
    """Returns that the ROI box must reject: raised objects or off-lane ground."""
    pts = np.empty((n, 4))
    pts[:, 0] = rng.uniform(0.5, roi.x_max + 10.0, n)
    raised = rng.random(n) < 0.5
    pts[:, 1] = np.where(raised, rng.uniform(roi.y_min, roi.y_max, n), rng.choice([-1.0, 1.0], n) * rng.uniform(roi.y_max + 0.05, 6.0, n))
    pts[:, 2] = np.where(raised, rng.uniform(roi.z_max + 0.05, 2.5, n), rng.uniform(-0.05, roi.z_max, n))
    pts[:, 3] = rng.uniform(*REFL_RANGE, n)
    return pts


def iter_stream(
    spec: ScenarioSpec,
    profiles: Profiles | None = None,
    roi: RoiConfig = RoiConfig(),
    t0_ms: int = 0,
    right_profiles: Profiles | None = None,
) -> Iterator[tuple[PointCloudFrame, tuple[ClassLabel, ClassLabel]]]:
    """Yield (frame, (left label, right label)) at 10 Hz.

    ``right_profiles`` overrides the profiles of the right wheel path.
    """
    profiles = profiles or default_profiles()
    right_profiles = right_profiles or profiles
    rng = np.random.default_rng(spec.seed)
    for k in range(spec.n_frames):
        t = k * FRAME_PERIOD_MS / 1000.0
        v = spec.speed_at(t)
        labels = (spec.label_at(t, True), spec.label_at(t, False))
        parts = []
        for region in Region:
            if region.is_left:
                prof = profiles[labels[0]][region]
            else:
                prof = right_profiles[labels[1]][region]
            parts.append(_region_points(rng, prof, region, v, roi))
        n_road = sum(len(p) for p in parts)
        n_clutter = int(round(n_road * spec.clutter_fraction / (1.0 - spec.clutter_fraction)))
        parts.append(_clutter(rng, n_clutter, roi))
        pts = np.concatenate(parts)
        pts = pts[rng.permutation(len(pts))]
        yield PointCloudFrame(t0_ms + k * FRAME_PERIOD_MS, pts, v), labels


def generate_stream(spec: ScenarioSpec, profiles: Profiles | None = None, roi: RoiConfig = RoiConfig()) -> list[PointCloudFrame]:
    return [f for f, _ in iter_stream(spec, profiles, roi)]


# -- per-region feature streams and corpora ----------------------------------


@dataclass
class FeatureStream:
    """Per-frame region aggregates of one drive, columns indexed by Region."""

    t_ms: np.ndarray
    speed: np.ndarray
    s_p: np.ndarray  # (n, 4)
    s_r: np.ndarray  # (n, 4)
    labels: np.ndarray  # (n, 4) ground truth per region
    seed: int = 0

    def __len__(self) -> int:
        return len(self.t_ms)

    def windows(self, region: Region, window: int = DEFAULT_WINDOW) -> np.ndarray:
        r = int(region)
        return stack_stream(self.s_p[:, r], self.s_r[:, r], self.speed, window)


def feature_stream(
    spec: ScenarioSpec,
    profiles: Profiles | None = None,
    roi: RoiConfig = RoiConfig(),
    right_profiles: Profiles | None = None,
) -> FeatureStream:
    t, v, sp, sr, lab = [], [], [], [], []
    for frame, (left, right) in iter_stream(spec, profiles, roi, right_profiles=right_profiles):
        feats = frame_region_features(frame, roi)
        t.append(frame.timestamp)
        v.append(frame.speed)
        sp.append(feats[:, 0])
        sr.append(feats[:, 1])
        lab.append([left if r.is_left else right for r in Region])
    return FeatureStream(
        np.asarray(t, dtype=np.int64), np.asarray(v), np.asarray(sp), np.asarray(sr),
        np.asarray(lab, dtype=np.int64), spec.seed,
    )


def dataset_from_streams(streams: Sequence[FeatureStream], window: int = DEFAULT_WINDOW) -> Dataset:
    """One sample per region per warm frame, ordered by (stream, frame, region).

    Inputs are rounded through float32 so the in-memory corpus equals what the
    dataset file stores.
    """
    regions, xs, ts = [], [], []
    eye = np.eye(N_CLASSES)
    for s in streams:
        if len(s) <= window:
            continue
        per_region = [s.windows(r, window) for r in Region]
        n = per_region[0].shape[0]
        x = np.stack(per_region, axis=1).reshape(n * 4, -1)
        lab = s.labels[window:].reshape(-1)
        regions.append(np.tile(np.arange(4, dtype=np.uint8), n))
        xs.append(x)
        ts.append(eye[lab])
    if not xs:
        return Dataset(np.empty(0, np.uint8), np.empty((0, 3 * (window + 1))), np.empty((0, N_CLASSES)))
    x = np.concatenate(xs).astype(np.float32).astype(np.float64)
    return Dataset(np.concatenate(regions), x, np.concatenate(ts))


@dataclass(frozen=True)
class CorpusConfig:
    train_per_class: int = 2000
    val_per_class: int = 500
    train_streams_per_class: int = 50
    val_streams_per_class: int = 5
    window: int = DEFAULT_WINDOW
    val_shift: float = 0.05
    stream_jitter: float = 0.06
    knot_spacing_s: float = 5.0
    classes: tuple[int, ...] = tuple(range(N_CLASSES))
    seed: int = 0

    @property
    def n_streams(self) -> int:
        return len(self.classes) * (self.train_streams_per_class + self.val_streams_per_class)


def _random_spec(rng: np.random.Generator, n_frames: int, left: str, right: str, seed: int, knot_spacing: float) -> ScenarioSpec:
    duration = n_frames * FRAME_PERIOD_MS / 1000.0
    n_knots = int(np.ceil(duration / knot_spacing)) + 1
    knots = tuple((min(i * knot_spacing, duration), float(rng.uniform(0.0, MAX_SPEED))) for i in range(n_knots))
    return ScenarioSpec(duration, knots, ((0.0, left),), ((0.0, right),), seed=seed)


@dataclass
class Corpus:
    train: Dataset
    val: Dataset
    train_streams: list[FeatureStream]
    val_streams: list[FeatureStream]
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.train.save(out / "train.rsds")
        self.val.save(out / "val.rsds")
        _save_streams(out / "train_streams.npz", self.train_streams)
        _save_streams(out / "val_streams.npz", self.val_streams)
        (out / "corpus.json").write_text(json.dumps(asdict(self.config), indent=2))

    @classmethod
    def load(cls, in_dir: str | Path) -> "Corpus":
        d = Path(in_dir)
        raw = json.loads((d / "corpus.json").read_text())
        raw["classes"] = tuple(raw["classes"])
        return cls(
            Dataset.load(d / "train.rsds"),
            Dataset.load(d / "val.rsds"),
            _load_streams(d / "train_streams.npz"),
            _load_streams(d / "val_streams.npz"),
            CorpusConfig(**raw),
        )


def _save_streams(path: Path, streams: Sequence[FeatureStream]) -> None:
    arrays = {}
    for i, s in enumerate(streams):
        for name in ("t_ms", "speed", "s_p", "s_r", "labels"):
            arrays[f"{i}_{name}"] = getattr(s, name)
        arrays[f"{i}_seed"] = np.asarray(s.seed, dtype=np.uint64)
    with open(path, "wb") as fh:
        np.savez(fh, n=np.asarray(len(streams)), **arrays)


def _load_streams(path: Path) -> list[FeatureStream]:
    with np.load(path) as z:
        return [
            FeatureStream(*(z[f"{i}_{name}"] for name in ("t_ms", "speed", "s_p", "s_r", "labels")), int(z[f"{i}_seed"]))
            for i in range(int(z["n"]))
        ]


def generate_corpus(
    cfg: CorpusConfig = CorpusConfig(),
    profiles: Profiles | None = None,
    roi: RoiConfig = RoiConfig(),
) -> Corpus:
    """Balanced train/validation corpus built from single-class lane streams.

    Stream i of a round drives class ``classes[i]`` on the left lane and
    ``classes[i + offset]`` on the right, so every class appears equally often
    on both sides. Each training lane gets its own relative perturbation of
    the reflectivity and count means, uniform in +-``cfg.stream_jitter``.
    Validation streams use fresh seeds and profiles whose means are shifted
    by ``cfg.val_shift``.
    """
    if len(cfg.classes) * (cfg.train_streams_per_class + cfg.val_streams_per_class) < 9:
        raise ValueError("corpus needs at least 9 streams")
    for per, n in ((cfg.train_per_class, cfg.train_streams_per_class), (cfg.val_per_class, cfg.val_streams_per_class)):
        if per % n:
            raise ValueError("samples per class must divide evenly over the streams")
    profiles = profiles or default_profiles()
    val_profiles = {c: p.shifted(cfg.val_shift) for c, p in profiles.items()}

    root = np.random.SeedSequence(cfg.seed)
    knot_rng = np.random.default_rng(root.spawn(1)[0])
    seeds = iter(int(s.generate_state(1)[0]) for s in root.spawn(cfg.n_streams))
    names = [CLASS_NAMES[c] for c in cfg.classes]
    n_cls = len(names)

    def lane(profs: Profiles, label: str, jitter: float) -> Profiles:
        c = ClassLabel[label.upper()]
        if not jitter:
            return {c: profs[c]}
        fr, fc = knot_rng.uniform(-jitter, jitter, 2)
        return {c: profs[c].shifted(fr, fc)}

    def build(rounds: int, per_class: int, profs: Profiles, offset0: int, jitter: float) -> list[FeatureStream]:
        n_frames = per_class // rounds + cfg.window
        out = []
        for rnd in range(rounds):
            offset = offset0 + rnd
            for i in range(n_cls):
                left, right = names[i], names[(i + offset) % n_cls]
                spec = _random_spec(knot_rng, n_frames, left, right, next(seeds), cfg.knot_spacing_s)
                out.append(feature_stream(spec, lane(profs, left, jitter), roi, lane(profs, right, jitter)))
        return out

    train_streams = build(cfg.train_streams_per_class, cfg.train_per_class, profiles, 0, cfg.stream_jitter)
    val_streams = build(cfg.val_streams_per_class, cfg.val_per_class, val_profiles, cfg.train_streams_per_class, 0.0)
    logger.info("corpus: %d train streams, %d val streams", len(train_streams), len(val_streams))
    return Corpus(
        dataset_from_streams(train_streams, cfg.window),
        dataset_from_streams(val_streams, cfg.window),
        train_streams,
        val_streams,
        cfg,
    )
