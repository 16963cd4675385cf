"""Confusion matrices, metrics, the streaming pipeline, baselines and latency."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .features import (
    CLASS_NAMES,
    DEFAULT_WINDOW,
    DRY_CLASSES,
    N_CLASSES,
    WET_CLASSES,
    ClassLabel,
    Dataset,
    NormStats,
    RegionFeatures,
    WindowBuffer,
    frame_region_features,
    standardize,
)
from .fusion import FusionConfig, FusionState, classify, classify_rows, step
from .network import NetworkModel, TrainConfig, train
from .pointcloud import NEAR_FAR_PAIRS, PointCloudFrame, Region, RoiConfig
from .synthgen import Corpus, FeatureStream


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[predicted, actual]."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(c < 0):
            raise ValueError("negative counts")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_predictions(cls, predicted, actual, n_classes: int = N_CLASSES) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(predicted, dtype=np.int64), np.asarray(actual, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def actual_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self, names: Sequence[str] = CLASS_NAMES) -> str:
        lines = ["predicted\\actual," + ",".join(names)]
        for name, row in zip(names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def to_text(self, names: Sequence[str] = CLASS_NAMES) -> str:
        w = max(8, max(len(n) for n in names))
        head = " " * w + "".join(f"{n[:w]:>{w + 1}}" for n in names)
        rows = [f"{n:<{w}}" + "".join(f"{int(v):>{w + 1}}" for v in row) for n, row in zip(names, self.counts)]
        return "\n".join([head, *rows])


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    risk_snow: float  # P(pred dry or wet | actual snow)
    risk_wet: float  # P(pred dry | actual wet)
    total: int

    @property
    def risk_rate(self) -> float:
        return self.risk_snow + self.risk_wet

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": {n: float(v) for n, v in zip(CLASS_NAMES, self.precision)},
            "recall": {n: float(v) for n, v in zip(CLASS_NAMES, self.recall)},
            "risk_snow": self.risk_snow,
            "risk_wet": self.risk_wet,
            "risk_rate": self.risk_rate,
            "total": self.total,
        }


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    c = cm.counts
    diag = np.diag(c)
    snow = int(ClassLabel.SNOW)
    dry = [int(k) for k in DRY_CLASSES]
    wet = [int(k) for k in WET_CLASSES]
    if c.shape[0] == N_CLASSES:
        risk_snow = float(_safe_div(c[dry + wet, snow].sum(), c[:, snow].sum()))
        risk_wet = float(_safe_div(c[np.ix_(dry, wet)].sum(), c[:, wet].sum()))
    else:  # the risk classes only exist in the 9-class layout
        risk_snow = risk_wet = 0.0
    return MetricsReport(
        accuracy=float(_safe_div(diag.sum(), c.sum())),
        precision=_safe_div(diag, c.sum(axis=1)),
        recall=_safe_div(diag, c.sum(axis=0)),
        risk_snow=risk_snow,
        risk_wet=risk_wet,
        total=int(c.sum()),
    )


def evaluate(predict: Callable[[np.ndarray], np.ndarray] | NetworkModel, dataset: Dataset) -> tuple[ConfusionMatrix, MetricsReport]:
    """Score a classifier (a model or any ``x -> labels`` callable) on a dataset."""
    if len(dataset) == 0:
        raise ValueError("empty validation set")
    fn = getattr(predict, "predict", predict)
    cm = ConfusionMatrix.from_predictions(fn(dataset.x), dataset.labels, dataset.targets.shape[1])
    return cm, metrics(cm)


def format_report(title: str, cm: ConfusionMatrix, rep: MetricsReport) -> str:
    lines = [title, cm.to_text(), ""]
    lines.append(f"{'class':<14}{'precision':>10}{'recall':>10}")
    for n, p, r in zip(CLASS_NAMES, rep.precision, rep.recall):
        lines.append(f"{n:<14}{100 * p:>10.1f}{100 * r:>10.1f}")
    lines.append(f"accuracy {100 * rep.accuracy:.1f}%  risk snow {100 * rep.risk_snow:.3f}%  risk wet {100 * rep.risk_wet:.3f}%")
    return "\n".join(lines)


# -- streaming pipeline -----------------------------------------------------


@dataclass
class FrameResult:
    t_ms: int
    region: Region
    p_raw: np.ndarray
    p_final: np.ndarray
    alpha: np.ndarray

    @property
    def label(self) -> int:
        return classify(self.p_final)

    def to_record(self) -> dict:
        return {
            "t_ms": int(self.t_ms),
            "region": self.region.name,
            "p_raw": [float(v) for v in self.p_raw],
            "p_final": [float(v) for v in self.p_final],
            "class": CLASS_NAMES[self.label],
            "alpha": [float(v) for v in self.alpha],
        }


def dump_records(results: Iterable[FrameResult]) -> str:
    return "".join(json.dumps(r.to_record(), separators=(",", ":")) + "\n" for r in results)


class Pipeline:
    """Frame-by-frame classifier: region aggregates, four networks, near/far fusion.

    With ``fuse=False`` the near outputs pass through untouched (the time
    windowing baseline).
    """

    def __init__(
        self,
        models: Mapping[Region, NetworkModel],
        fusion: FusionConfig = FusionConfig(),
        roi: RoiConfig = RoiConfig(),
        window: int = DEFAULT_WINDOW,
        fuse: bool = True,
    ):
        missing = set(Region) - set(models)
        if missing:
            raise ValueError(f"missing models for {sorted(r.name for r in missing)}")
        self.models = {Region(r): m for r, m in models.items()}
        self.fusion_cfg = fusion
        self.roi = roi
        self.window = window
        self.fuse = fuse
        self.reset()

    def reset(self) -> None:
        self.buffers = {r: WindowBuffer(self.window) for r in Region}
        self.states = {near: FusionState(self.fusion_cfg) for near, _ in NEAR_FAR_PAIRS}

    def _fuse_pair(self, near: Region, t_ms: int, p_near, p_far, speed) -> FrameResult:
        state = self.states[near]
        out = step(state, state.k + 1, p_near, p_far, speed)
        if self.fuse:
            return FrameResult(t_ms, near, p_near, out.p_final, out.alpha)
        alpha = np.zeros(self.fusion_cfg.l_s + 1)
        alpha[0] = 1.0
        return FrameResult(t_ms, near, p_near, np.asarray(p_near, float).copy(), alpha)

    def process_region_features(self, t_ms: int, feats: np.ndarray, speed: float) -> list[FrameResult]:
        for r in Region:
            self.buffers[r].push(RegionFeatures(feats[r, 0], feats[r, 1]), speed)
        if not self.buffers[Region.LN].warm:
            return []
        out = []
        for near, far in NEAR_FAR_PAIRS:
            p_near = self.models[near].predict_proba(self.buffers[near].vector())
            p_far = self.models[far].predict_proba(self.buffers[far].vector())
            out.append(self._fuse_pair(near, t_ms, p_near, p_far, speed))
        return out

    def process_frame(self, frame: PointCloudFrame) -> list[FrameResult]:
        return self.process_region_features(frame.timestamp, frame_region_features(frame, self.roi), frame.speed)

    def run(self, frames: Iterable[PointCloudFrame]) -> list[FrameResult]:
        self.reset()
        out = []
        for frame in frames:
            out.extend(self.process_frame(frame))
        return out

    def run_feature_stream(self, fs: FeatureStream) -> dict[Region, dict[str, np.ndarray]]:
        """Whole-stream replay from stored aggregates, forwards batched per region.

        Produces the same probabilities as feeding the frames one by one.
        """
        self.reset()
        probs = {r: self.models[r].predict_proba(fs.windows(r, self.window)) for r in Region}
        offset = self.window
        out = {}
        for near, far in NEAR_FAR_PAIRS:
            raw, final, alphas = [], [], []
            for j in range(probs[near].shape[0]):
                res = self._fuse_pair(near, int(fs.t_ms[offset + j]), probs[near][j], probs[far][j], float(fs.speed[offset + j]))
                raw.append(res.p_raw)
                final.append(res.p_final)
                alphas.append(res.alpha)
            out[near] = {
                "p_raw": np.asarray(raw),
                "p_final": np.asarray(final),
                "alpha": np.asarray(alphas),
                "actual": fs.labels[offset:, int(near)],
            }
        return out


def twm_baseline(models: Mapping[Region, NetworkModel], **kwargs) -> Pipeline:
    """Time-windowed network output without fusion."""
    return Pipeline(models, fuse=False, **kwargs)


def evaluate_streams(pipeline: Pipeline, streams: Sequence[FeatureStream]) -> dict[Region, dict[str, tuple[ConfusionMatrix, MetricsReport]]]:
    """Raw and fused near-region scores over held-out streams."""
    pred = {near: {"raw": [], "final": [], "actual": []} for near, _ in NEAR_FAR_PAIRS}
    for fs in streams:
        res = pipeline.run_feature_stream(fs)
        for near, d in res.items():
            pred[near]["raw"].append(classify_rows(d["p_raw"]))
            pred[near]["final"].append(classify_rows(d["p_final"]))
            pred[near]["actual"].append(d["actual"])
    out = {}
    for near, d in pred.items():
        actual = np.concatenate(d["actual"])
        out[near] = {}
        for key in ("raw", "final"):
            cm = ConfusionMatrix.from_predictions(np.concatenate(d[key]), actual)
            out[near][key] = (cm, metrics(cm))
    return out


# -- KNN --------------------------------------------------------------------


class KnnClassifier:
    """Majority vote of the k nearest standardised training vectors (Euclidean)."""

    def __init__(self, dataset: Dataset, k: int = 5):
        if len(dataset) == 0:
            raise ValueError("empty training set")
        if not 1 <= k <= len(dataset):
            raise ValueError(f"k={k} must lie in [1, {len(dataset)}]")
        self.k = k
        self.norm = NormStats.from_data(dataset.x)
        self.x = np.ascontiguousarray(standardize(dataset.x, self.norm))
        self.y = dataset.labels.astype(np.int64)
        self.n_classes = dataset.targets.shape[1]

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(standardize(np.atleast_2d(x_raw), self.norm))
        return kernels.knn_predict(self.x, self.y, q, self.k, self.n_classes)


def knn_baseline(dataset: Dataset, k: int = 5) -> KnnClassifier:
    return KnnClassifier(dataset, k)


# -- velocity ablation -------------------------------------------------------


@dataclass
class AblationResult:
    region: Region
    with_velocity: MetricsReport
    without_velocity: MetricsReport
    dims: tuple[int, int]

    @property
    def gap(self) -> float:
        return self.with_velocity.accuracy - self.without_velocity.accuracy


def ablation_velocity(
    corpus: Corpus,
    cfg: TrainConfig = TrainConfig(),
    regions: Sequence[Region] = (Region.LN, Region.RN),
    models: Mapping[Region, NetworkModel] | None = None,
) -> list[AblationResult]:
    """Train the same architecture with and without the speed block (same seed)."""
    window = corpus.config.window
    results = []
    for r in regions:
        tr, va = corpus.train.for_region(r), corpus.val.for_region(r)
        full = models[r] if models and r in models else train(tr, va, cfg, region=r)
        reduced = train(tr.without_speed(window), va.without_speed(window), cfg, region=r)
        _, rep_full = evaluate(full, va)
        _, rep_red = evaluate(reduced, va.without_speed(window))
        results.append(AblationResult(r, rep_full, rep_red, (full.input_dim, reduced.input_dim)))
    return results


# -- latency ----------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    mean_ms: float
    p95_ms: float
    max_ms: float
    n_frames: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench_latency(pipeline: Pipeline, frames: Sequence[PointCloudFrame], warmup: int = 20) -> LatencyReport:
    """Wall time per frame of aggregation, windowing, forwards and fusion.

    ``frames`` must already be in memory; generation and file reading are not
    timed.
    """
    if len(frames) <= warmup:
        raise ValueError("stream must be longer than the warm-up")
    pipeline.reset()
    times = []
    clock = time.perf_counter
    for i, frame in enumerate(frames):
        t0 = clock()
        pipeline.process_frame(frame)
        dt = clock() - t0
        if i >= warmup:
            times.append(dt)
    ms = 1e3 * np.asarray(times)
    return LatencyReport(float(ms.mean()), float(np.percentile(ms, 95)), float(ms.max()), len(ms))
