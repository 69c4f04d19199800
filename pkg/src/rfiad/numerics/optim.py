"""Adam (for prompt training) and L-BFGS (for prototype refinement)."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, DomainError, NonFiniteError, Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Sequence[np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``grads`` defaults to each parameter's ``.grad``. Moment buffers are
    created lazily on the first step.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("Adam state was built for a different parameter list")
    for p, g, m in zip(params, grads, state.m):
        if g is None or np.shape(g) != p.shape or m.shape != p.shape:
            raise ContractError(f"gradient/moment shape mismatch for {p!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


@dataclass(frozen=True)
class LbfgsConfig:
    history: int = 10
    max_iter: int = 100
    gtol: float = 1e-8
    c1: float = 1e-4
    shrink: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("L-BFGS history size must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not (self.gtol > 0 and self.c1 > 0 and 0 < self.shrink < 1):
            raise ValueError("L-BFGS tolerances must be positive")


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    n_iter: int
    status: str  # "converged" | "max_iter" | "line_search_failed"

    @property
    def ok(self) -> bool:
        return self.status != "line_search_failed"


Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def _two_loop(g: np.ndarray, pairs) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _evaluate(objective: Objective, x: np.ndarray):
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).reshape(x.shape)
    return f, g


def lbfgs_minimize(objective: Objective, x0, cfg: LbfgsConfig = LbfgsConfig()) -> LbfgsResult:
    """Minimize ``objective`` (returning value and gradient) from ``x0``.

    Limited-memory BFGS with the two-loop recursion and Armijo backtracking.
    Only strictly Armijo-accepted steps are taken, so the returned value never
    exceeds ``objective(x0)``.
    """
    x = np.array(x0, dtype=np.float64).reshape(-1)
    try:
        f, g = _evaluate(objective, x)
    except NonFiniteError as exc:
        raise DomainError(f"objective is not finite at x0: {exc}") from exc
    if not (np.isfinite(f) and np.isfinite(g).all()):
        raise DomainError("objective is not finite at x0")

    pairs: deque = deque(maxlen=cfg.history)
    status = "max_iter"
    it = 0
    for it in range(1, cfg.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.gtol:
            status = "converged"
            it -= 1
            break
        d = -_two_loop(g, list(pairs))
        slope = float(g @ d)
        if slope >= 0:
            pairs.clear()
            d = -g
            slope = -gnorm * gnorm
        step = 1.0 if pairs else min(1.0, 1.0 / gnorm)

        accepted = None
        for _ in range(cfg.max_halvings + 1):
            x_new = x + step * d
            try:
                f_new, g_new = _evaluate(objective, x_new)
            except (NonFiniteError, DomainError):
                f_new = np.inf
            if np.isfinite(f_new) and f_new <= f + cfg.c1 * step * slope and f_new <= f:
                accepted = (x_new, f_new, g_new)
                break
            step *= cfg.shrink

        if accepted is None:
            if pairs:
                # curvature memory may be stale; retry once from steepest descent
                pairs.clear()
                continue
            status = "line_search_failed"
            log.debug("L-BFGS line search failed at iteration %d (f=%.6g)", it, f)
            break

        x_new, f_new, g_new = accepted
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(y @ y) and sy > 0:
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new

    return LbfgsResult(x=x, fun=f, n_iter=it, status=status)
