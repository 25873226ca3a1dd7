"""Optimizers: SGD with momentum + cosine schedule for training, and an
LBFGS (two-loop recursion, Armijo backtracking) for image-space objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
MAX_SHRINKS = 20
FALLBACK_STEP = 1e-4
CURVATURE_MIN = 1e-10


class SgdState:
    def __init__(self, lr0: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: SgdState, step_lr: float) -> None:
    """In-place SGD update: v <- mu*v + g + wd*p; p <- p - lr*v."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ArithmeticError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v + g
        state.velocity[name] = v
        p -= (step_lr * v).astype(p.dtype)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at step == total."""
    if total < 1 or not (0 <= step <= total):
        raise ValueError(f"bad schedule position step={step} total={total}")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


@dataclass
class LbfgsState:
    lr: float = 1.0          # initial line-search step
    max_iter: int = 100
    history_size: int = 10
    grad_tol: float = 1e-10
    history: list = field(default_factory=list)  # (s, y, 1/s'y) triples


def _two_loop(g: np.ndarray, history) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if history:
        s, y, _ = history[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(f, x0: np.ndarray, state: LbfgsState | None = None,
                   project=None, callback=None):
    """Minimize f(x) -> (value, grad) from x0; returns (x_best, trace).

    Direction by two-loop recursion over the (s, y) history; Armijo
    backtracking line search (c=1e-4, shrink 0.5, initial step = lr).
    If the line search fails after 20 shrinks, falls back to a plain
    gradient step of 1e-4. `project` (if given) maps trial points back
    to the feasible set before evaluation, so accepted values stay
    non-increasing. Returns the best point seen and the loss trace of
    accepted iterates.
    """
    if state is None:
        state = LbfgsState()
    proj = project if project is not None else (lambda z: z)
    x = proj(np.asarray(x0, dtype=np.float64).copy())
    fx, g = f(x)
    fx = float(fx)
    best_x, best_f = x.copy(), fx
    trace = [fx]
    if callback:
        callback(0, x, fx)

    for it in range(1, state.max_iter + 1):
        gnorm = float(np.sqrt(g @ g))
        if gnorm <= state.grad_tol:
            break
        d = -_two_loop(g, state.history)
        gd = float(g @ d)
        if gd >= 0:  # history produced a non-descent direction
            d = -g
            gd = -gnorm * gnorm
        t = state.lr
        if not state.history:
            # no curvature info yet: keep the first trial step modest
            t = min(state.lr, state.lr / max(1.0, float(np.abs(g).sum())))
        accepted = False
        for _ in range(MAX_SHRINKS):
            x_new = proj(x + t * d)
            f_new, g_new = f(x_new)
            f_new = float(f_new)
            if f_new <= fx + ARMIJO_C * t * gd:
                accepted = True
                break
            t *= ARMIJO_SHRINK
        if not accepted:
            x_new = proj(x - FALLBACK_STEP * g)
            f_new, g_new = f(x_new)
            f_new = float(f_new)
            if f_new > fx:  # nothing decreases: converged (or at a kink)
                break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > CURVATURE_MIN:
            state.history.append((s, y, 1.0 / sy))
            if len(state.history) > state.history_size:
                state.history.pop(0)
        x, fx, g = x_new, f_new, g_new
        if fx < best_f:
            best_f, best_x = fx, x.copy()
        trace.append(fx)
        if callback:
            callback(it, x, fx)
    return best_x, trace
