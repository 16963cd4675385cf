"""Speed-weighted fusion of past far-region predictions into the near region.

At frame k the near network output is stacked with the far network outputs of
frames k-1 ... k-l_s. Each past slice is weighted by how far it now overlaps
the near region (l * T_s * V(k-l)), the current prediction by the near region
length beta1, and the weights are normalised to sum to one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pointcloud import overlap_length


@dataclass(frozen=True)
class FusionConfig:
    l_s: int = 5
    T_s: float = 0.1
    beta1: float = 12.0
    literal_normalizer: bool = False

    def __post_init__(self):
        if self.l_s < 1:
            raise ValueError("l_s must be >= 1")
        if self.T_s <= 0 or self.beta1 <= 0:
            raise ValueError("T_s and beta1 must be positive")


def omega_weights(speeds: Sequence[float], cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Weights [a_k, a_(k-1), ..., a_(k-l_s)] from speeds [V(k-1), ..., V(k-l_s)].

    With ``cfg.literal_normalizer`` the entries are left unclamped and divided
    by beta1 + sum over l >= 2 only, which does not sum to one in general.
    """
    v = np.asarray(speeds, dtype=np.float64)
    if v.shape != (cfg.l_s,):
        raise ValueError(f"expected {cfg.l_s} past speeds, got shape {v.shape}")
    if np.any(v < 0):
        raise ValueError("speeds must be non-negative")
    lags = np.arange(1, cfg.l_s + 1)
    if cfg.literal_normalizer:
        past = lags * cfg.T_s * v
        return np.concatenate([[cfg.beta1], past]) / (cfg.beta1 + past[1:].sum())
    past = np.array([overlap_length(int(l), float(s), cfg.T_s, cfg.beta1) for l, s in zip(lags, v)])
    raw = np.concatenate([[cfg.beta1], past])
    return raw / raw.sum()


def stack_probs(current: np.ndarray, past: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate the current vector and the past vectors (newest first)."""
    return np.concatenate([np.asarray(current, dtype=np.float64)] + [np.asarray(p, dtype=np.float64) for p in past])


def fuse(stacked: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """(Omega kron I) @ stacked."""
    alpha = np.asarray(alpha, dtype=np.float64)
    stacked = np.asarray(stacked, dtype=np.float64)
    n_c, rem = divmod(stacked.size, alpha.size)
    if rem or n_c == 0:
        raise ValueError(f"stack of length {stacked.size} does not split into {alpha.size} vectors")
    return np.kron(alpha[None, :], np.eye(n_c)) @ stacked


TIE_TOL = 1e-12


def classify(p: np.ndarray, tol: float = TIE_TOL) -> int:
    """Argmax, lowest index on ties.

    Entries within ``tol`` of the maximum count as tied, so a fused vector that
    is [0.5, 0.5] up to rounding still goes to class 0.
    """
    p = np.asarray(p, dtype=np.float64)
    return int(np.flatnonzero(p >= p.max() - tol)[0])


def classify_rows(P: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """:func:`classify` applied to each row of ``P``."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    return np.argmax(P >= P.max(axis=1, keepdims=True) - tol, axis=1)


@dataclass
class FusionState:
    """History of one near/far pair: far predictions and speeds, newest last."""

    cfg: FusionConfig = field(default_factory=FusionConfig)
    k: int = 0
    far_probs: deque = field(default=None)
    speeds: deque = field(default=None)

    def __post_init__(self):
        if self.far_probs is None:
            self.far_probs = deque(maxlen=self.cfg.l_s)
        if self.speeds is None:
            self.speeds = deque(maxlen=self.cfg.l_s)


@dataclass(frozen=True)
class FusionOutput:
    p_final: np.ndarray
    alpha: np.ndarray
    fused: bool


def step(state: FusionState, k: int, near_p: np.ndarray, far_p: np.ndarray, speed: float) -> FusionOutput:
    """Process frame ``k`` (1-based, consecutive) for one near/far pair.

    The first l_s frames return the near prediction unchanged; later frames
    fuse it with the buffered far predictions. ``state`` is updated in place.
    """
    if k != state.k + 1:
        raise ValueError(f"frame index {k} out of order (expected {state.k + 1})")
    if speed < 0:
        raise ValueError("negative speed")
    cfg = state.cfg
    near_p = np.asarray(near_p, dtype=np.float64)
    if k <= cfg.l_s:
        alpha = np.zeros(cfg.l_s + 1)
        alpha[0] = 1.0
        out = FusionOutput(near_p.copy(), alpha, False)
    else:
        past = list(state.far_probs)[::-1]
        alpha = omega_weights(list(state.speeds)[::-1], cfg)
        out = FusionOutput(fuse(stack_probs(near_p, past), alpha), alpha, True)
    state.far_probs.append(np.asarray(far_p, dtype=np.float64).copy())
    state.speeds.append(float(speed))
    state.k = k
    return out
