"""Per-region tanh MLP with a softmax head, trained on MSE + L2 with SCG."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import CLASS_NAMES, N_CLASSES, Dataset, NormStats, standardize
from .pointcloud import Region
from .scg import NonFiniteLossError, scg_init, scg_rebatch, scg_step

logger = logging.getLogger(__name__)

HIDDEN_LAYERS = (100, 80, 40, 40, 20, 10)
DEFAULT_DIMS = (33, *HIDDEN_LAYERS, N_CLASSES)


def layer_shapes(dims: Sequence[int]) -> list[tuple[int, int]]:
    return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def n_params(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in layer_shapes(dims))


@dataclass(eq=False)
class NetworkModel:
    """Weights live in one flat vector ``theta``: W1 (row-major, in x out), b1, W2, b2, ..."""

    dims: tuple[int, ...]
    theta: np.ndarray
    norm: NormStats
    region: Region | None = None
    class_names: tuple[str, ...] = CLASS_NAMES
    history: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (n_params(self.dims),):
            raise ValueError(f"theta has {self.theta.size} entries, dims {self.dims} need {n_params(self.dims)}")
        if self.norm.dim != self.dims[0]:
            raise ValueError("norm stats dimension does not match the input layer")

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def layers(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.theta if theta is None else theta, self.dims)

    def predict_proba(self, x_raw: np.ndarray) -> np.ndarray:
        """Class probabilities for raw (unstandardised) inputs."""
        return forward(self, standardize(x_raw, self.norm))

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x_raw), axis=-1)

    def with_theta(self, theta: np.ndarray) -> "NetworkModel":
        return NetworkModel(self.dims, theta.copy(), self.norm, self.region, self.class_names)


def unpack(theta: np.ndarray, dims: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    pos = 0
    for a, b in layer_shapes(dims):
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((W, theta[pos:pos + b]))
        pos += b
    return out


def init_model(
    dims: Sequence[int] = DEFAULT_DIMS,
    rng: np.random.Generator | int | None = 0,
    norm: NormStats | None = None,
    region: Region | None = None,
) -> NetworkModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    theta = np.zeros(n_params(dims))
    model = NetworkModel(tuple(dims), theta, norm or NormStats.identity(dims[0]), region)
    for W, _ in model.layers():
        limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return model


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _forward_theta(theta, dims, x):
    acts = [x]
    layers = unpack(theta, dims)
    a = x
    for W, b in layers[:-1]:
        a = np.tanh(a @ W + b)
        acts.append(a)
    W, b = layers[-1]
    return softmax(a @ W + b), acts


def forward(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    """Softmax probabilities for standardised input(s) of shape (dim,) or (n, dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} != model input dim {model.input_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    p, _ = _forward_theta(model.theta, model.dims, np.atleast_2d(x))
    return p[0] if x.ndim == 1 else p


def loss_theta(theta: np.ndarray, dims, x: np.ndarray, t: np.ndarray, lam: float) -> float:
    p, _ = _forward_theta(theta, dims, x)
    e = p - t
    return float(np.sum(e * e) / x.shape[0] + 0.5 * lam * (theta @ theta))


def loss_and_grad_theta(theta: np.ndarray, dims, x: np.ndarray, t: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    p, acts = _forward_theta(theta, dims, x)
    n = x.shape[0]
    e = p - t
    value = float(np.sum(e * e) / n + 0.5 * lam * (theta @ theta))

    grad = lam * theta
    layers = unpack(grad, dims)  # views into grad
    weights = unpack(theta, dims)
    dp = (2.0 / n) * e
    dz = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    for i in range(len(layers) - 1, -1, -1):
        gW, gb = layers[i]
        gW += acts[i].T @ dz
        gb += dz.sum(axis=0)
        if i:
            a = acts[i]
            dz = (dz @ weights[i][0].T) * (1.0 - a * a)
    return value, grad


def loss(model: NetworkModel, x: np.ndarray, t: np.ndarray, lam: float = 0.0) -> float:
    """Mean over the batch of the squared softmax error, plus (lam/2)*|theta|^2."""
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return loss_theta(model.theta, model.dims, x, np.atleast_2d(t), lam)


def gradient(model: NetworkModel, x: np.ndarray, t: np.ndarray, lam: float = 0.0) -> np.ndarray:
    x = np.atleast_2d(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return loss_and_grad_theta(model.theta, model.dims, x, np.atleast_2d(t), lam)[1]


class BatchObjective:
    """Loss of a fixed batch as a function of the flat parameter vector."""

    def __init__(self, dims, x, t, lam):
        self.dims, self.x, self.t, self.lam = dims, x, t, lam

    def value(self, w):
        return loss_theta(w, self.dims, self.x, self.t, self.lam)

    def value_and_grad(self, w):
        return loss_and_grad_theta(w, self.dims, self.x, self.t, self.lam)


# -- training -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 20
    rng_seed: int = 0
    scg_sigma: float = 1e-5
    scg_lambda: float = 1e-7
    scg_iters_per_batch: int = 1
    hidden: tuple[int, ...] = HIDDEN_LAYERS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


class TrainingDivergedError(NonFiniteLossError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def train(
    dataset: Dataset,
    val_dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    region: Region | None = None,
) -> NetworkModel:
    """Mini-batch SCG training; returns the epoch snapshot with the lowest validation loss."""
    if len(dataset) == 0 or len(val_dataset) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if region is None:
        regions = np.unique(dataset.regions)
        region = Region(int(regions[0])) if regions.size == 1 else None
    if np.any(val_dataset.regions != dataset.regions[0]) and region is not None:
        raise ValueError("validation set holds a different region")

    dims = (dataset.dim, *cfg.hidden, dataset.targets.shape[1])
    norm = NormStats.from_data(dataset.x)
    x = standardize(dataset.x, norm)
    t = dataset.targets
    xv = standardize(val_dataset.x, norm)
    tv = val_dataset.targets

    rng = np.random.default_rng(cfg.rng_seed)
    model = init_model(dims, rng, norm, region)
    n = len(x)

    state = None
    best_theta, best_val, stale = model.theta.copy(), np.inf, 0
    trace = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            obj = BatchObjective(dims, x[idx], t[idx], cfg.lam)
            try:
                if state is None:
                    state = scg_init(model.theta, obj, cfg.scg_sigma, cfg.scg_lambda)
                else:
                    state = scg_rebatch(state, obj)
                for _ in range(cfg.scg_iters_per_batch):
                    state = scg_step(state, obj)
            except NonFiniteLossError as exc:
                raise TrainingDivergedError(f"diverged in epoch {epoch}: {exc}", trace) from exc
        val = loss_theta(state.w, dims, xv, tv, cfg.lam)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss in epoch {epoch}", trace)
        trace.append({"epoch": epoch, "train_loss": state.f, "val_loss": val, "scg_lambda": state.lam})
        logger.debug("epoch %d val_loss %.6f", epoch, val)
        if val < best_val:
            best_theta, best_val, stale = state.w.copy(), val, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    out = model.with_theta(best_theta)
    out.history = trace
    return out


# -- model files -----------------------------------------------------------

MODEL_MAGIC = b"RSNM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIBI")
NO_REGION = 255


class ModelFormatError(ValueError):
    pass


def model_to_bytes(model: NetworkModel) -> bytes:
    n_layers = len(model.dims) - 1
    region = NO_REGION if model.region is None else int(model.region)
    parts = [
        _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, region, n_layers),
        np.asarray(model.dims, dtype="<u4").tobytes(),
        np.asarray(model.norm.mean, dtype="<f8").tobytes(),
        np.asarray(model.norm.std, dtype="<f8").tobytes(),
    ]
    for W, b in model.layers():
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.asarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(raw: bytes, source: str = "<bytes>") -> NetworkModel:
    if len(raw) < _MODEL_HEADER.size:
        raise ModelFormatError(f"{source}: truncated header")
    magic, version, region, n_layers = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{source}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{source}: unsupported model version {version}")
    pos = _MODEL_HEADER.size
    if len(raw) < pos + 4 * (n_layers + 1):
        raise ModelFormatError(f"{source}: truncated dims")
    dims = tuple(int(d) for d in np.frombuffer(raw, "<u4", n_layers + 1, pos))
    pos += 4 * (n_layers + 1)
    expected = pos + 8 * (2 * dims[0] + n_params(dims))
    if len(raw) != expected:
        raise ModelFormatError(f"{source}: expected {expected} bytes, got {len(raw)}")
    body = np.frombuffer(raw, "<f8", offset=pos).astype(np.float64)
    mean, std, theta = body[:dims[0]], body[dims[0]:2 * dims[0]], body[2 * dims[0]:]
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(mean)) and np.all(std > 0)):
        raise ModelFormatError(f"{source}: non-finite weights or invalid norm stats")
    return NetworkModel(
        dims,
        theta.copy(),
        NormStats(mean.copy(), std.copy()),
        None if region == NO_REGION else Region(region),
    )


def save_model(model: NetworkModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> NetworkModel:
    return model_from_bytes(Path(path).read_bytes(), str(path))
