"""Scaled conjugate gradient (Moller, 1993).

The optimiser works on a flat parameter vector through an objective object
exposing ``value(w)`` and ``value_and_grad(w)``. One call to :func:`scg_step`
performs one SCG iteration: a finite-difference Hessian-vector product along
the current direction, the Levenberg-Marquardt style scaling of the curvature,
the comparison-parameter test and the conjugate direction update.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

LAMBDA_MIN = 1e-15
LAMBDA_MAX = 1e100


class Objective(Protocol):
    def value(self, w: np.ndarray) -> float: ...

    def value_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]: ...


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScgState:
    w: np.ndarray
    f: float
    r: np.ndarray  # negative gradient at w
    p: np.ndarray  # search direction
    lam: float
    lam_bar: float = 0.0
    delta: float = 0.0  # scaled curvature along p, reused after a rejected step
    success: bool = True
    since_restart: int = 0
    iteration: int = 0
    sigma: float = 1e-5
    last_accepted: bool | None = None
    last_comparison: float | None = None


def scg_init(w: np.ndarray, objective: Objective, sigma: float = 1e-5, lam: float = 1e-7) -> ScgState:
    w = np.array(w, dtype=np.float64)
    f, g = objective.value_and_grad(w)
    _check_finite(f, "initial loss")
    return ScgState(w=w, f=f, r=-g, p=-g.copy(), lam=lam, sigma=sigma)


def scg_rebatch(state: ScgState, objective: Objective) -> ScgState:
    """Move the state onto a new objective (next mini-batch) at the same point.

    The previous direction is kept while it is still a descent direction for
    the new objective, otherwise the method restarts from steepest descent.
    """
    f, g = objective.value_and_grad(state.w)
    _check_finite(f, "loss at batch switch")
    r = -g
    if float(state.p @ r) > 0.0:
        p, since = state.p, state.since_restart
    else:
        p, since = r.copy(), 0
    return replace(state, f=f, r=r, p=p, lam_bar=0.0, success=True, since_restart=since)


def scg_step(state: ScgState, objective: Objective) -> ScgState:
    r, p, w = state.r, state.p, state.w
    if not np.any(r):
        return replace(state, last_accepted=None, last_comparison=None)

    lam, lam_bar = state.lam, state.lam_bar
    mu = float(p @ r)
    if mu <= 0.0:
        # lost the descent property, fall back to steepest descent
        p = r.copy()
        mu = float(p @ r)
        state = replace(state, success=True, since_restart=0)
    p2 = float(p @ p)

    if state.success:
        sig = state.sigma / np.sqrt(p2)
        _, g_probe = objective.value_and_grad(w + sig * p)
        s = (g_probe + r) / sig
        delta = float(p @ s)
    else:
        delta = state.delta

    # scale the curvature, then force it positive
    delta = delta + (lam - lam_bar) * p2
    if delta <= 0.0:
        lam_bar = 2.0 * (lam - delta / p2)
        delta = -delta + lam * p2
        lam = lam_bar

    alpha = mu / delta
    w_try = w + alpha * p
    f_try = objective.value(w_try)
    if not np.isfinite(f_try):
        comparison = -np.inf
    else:
        comparison = 2.0 * delta * (state.f - f_try) / (mu * mu)

    if comparison >= 0.0:
        f_new, g_new = objective.value_and_grad(w_try)
        _check_finite(f_new, f"loss at iteration {state.iteration}")
        r_new = -g_new
        since = state.since_restart + 1
        if since >= w.size:
            p_new, since = r_new.copy(), 0
        else:
            beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
            p_new = r_new + beta * p
        if comparison >= 0.75:
            lam = 0.25 * lam
        new = replace(state, w=w_try, f=f_new, r=r_new, p=p_new, lam_bar=0.0, success=True, since_restart=since)
    else:
        new = replace(state, p=p, lam_bar=lam, success=False)

    if comparison < 0.25:
        lam = lam + delta * (1.0 - comparison) / p2 if np.isfinite(comparison) else 4.0 * max(lam, LAMBDA_MIN)
    lam = min(max(lam, LAMBDA_MIN), LAMBDA_MAX)
    return replace(
        new,
        lam=lam,
        delta=delta,
        iteration=state.iteration + 1,
        last_accepted=comparison >= 0.0,
        last_comparison=float(comparison),
    )


def minimize(objective: Objective, w0: np.ndarray, max_iter: int = 100, gtol: float = 0.0, **kwargs) -> ScgState:
    state = scg_init(w0, objective, **kwargs)
    for _ in range(max_iter):
        if np.linalg.norm(state.r) <= gtol:
            break
        state = scg_step(state, objective)
    return state


def _check_finite(f: float, what: str) -> None:
    if not np.isfinite(f):
        raise NonFiniteLossError(f"non-finite {what}: {f}")
