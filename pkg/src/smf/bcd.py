"""Block coordinate descent on the four factor blocks, used as a baseline.

Sweep order is H, W, beta, gamma. A factor block that the classification
loss does not touch is solved exactly by least squares. A block that it
does touch takes one proximal gradient step: the loss is linearized, and
the quadratic reconstruction and ridge terms are kept exact, which turns
the step into a small linear solve. The step length is backtracked until
the usual sufficient-decrease test holds, so every block update is
non-increasing in the objective. beta and gamma take a few gradient steps
with Armijo backtracking starting from ``cfg.tau``.

Line searches evaluate only the terms that depend on the active block.
The per-sweep objective in the trace comes from lifting the factors and
calling :func:`smf.objective.objective_value`, so the baseline is scored
exactly like the lifted solver.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import replace
from typing import Optional

import numpy as np

from smf.lpgd import DivergenceError, IterTrace, LpgdResult
from smf.model import (
    Dataset,
    FactoredModel,
    LiftedState,
    SmfVariant,
    SolverConfig,
    default_init,
    lift,
)
from smf.objective import link_loss, loss_and_gradient

logger = logging.getLogger(__name__)

BETA_GAMMA_STEPS = 5
MAX_BACKTRACKS = 60


def _aux_term(model: FactoredModel, data: Dataset) -> np.ndarray:
    return data.x_aux.T @ model.gamma if data.q else np.zeros((data.n, data.kappa))


def _prox_update(block0, grad, t, smooth, solve):
    """One backtracked proximal gradient step; returns (new block, accepted t)."""
    f0 = smooth(block0)
    for _ in range(MAX_BACKTRACKS):
        cand = solve(t)
        diff = cand - block0
        if smooth(cand) <= f0 + np.sum(grad * diff) + np.sum(diff ** 2) / (2 * t) + 1e-12 * abs(f0):
            return cand, t
        t *= 0.5
    return block0, t


def _update_h(model: FactoredModel, data: Dataset, cfg: SolverConfig, t: float):
    w, beta, x = model.w, model.beta, data.x_data
    if cfg.variant is SmfVariant.FILTER:
        # the loss does not see H: exact least squares on the reconstruction term
        return replace(model, h=np.linalg.lstsq(w, x, rcond=None)[0]), t
    aux = _aux_term(model, data)

    def smooth(h):
        return link_loss(data.labels, h.T @ beta + aux, cfg.score)[0]

    _, hdot = link_loss(data.labels, model.h.T @ beta + aux, cfg.score)
    grad = beta @ hdot.T
    r = w.shape[1]
    gram = 2 * cfg.xi * w.T @ w + 2 * cfg.lam * beta @ beta.T
    rhs0 = 2 * cfg.xi * w.T @ x

    def solve(step):
        return np.linalg.solve(gram + np.eye(r) / step, rhs0 + model.h / step - grad)

    h, t = _prox_update(model.h, grad, t, smooth, solve)
    return replace(model, h=h), t


def _update_w(model: FactoredModel, data: Dataset, cfg: SolverConfig, t: float):
    h, beta, x = model.h, model.beta, data.x_data
    if cfg.variant is SmfVariant.FEATURE:
        return replace(model, w=np.linalg.lstsq(h.T, x.T, rcond=None)[0].T), t
    aux = _aux_term(model, data)

    def smooth(w):
        return link_loss(data.labels, x.T @ (w @ beta) + aux, cfg.score)[0]

    _, hdot = link_loss(data.labels, x.T @ (model.w @ beta) + aux, cfg.score)
    grad = (x @ hdot) @ beta.T
    r = h.shape[0]
    gram = 2 * cfg.xi * h @ h.T + 2 * cfg.lam * beta @ beta.T
    rhs0 = 2 * cfg.xi * x @ h.T

    def solve(step):
        return np.linalg.solve(gram + np.eye(r) / step, (rhs0 + model.w / step - grad).T).T

    w, t = _prox_update(model.w, grad, t, smooth, solve)
    return replace(model, w=w), t


class _ClassifierBlocks:
    """Objective restricted to (beta, gamma) with W and H frozen.

    Activations are ``Z beta + X_aux^T gamma`` and the ridge term is
    ``lambda (tr(beta^T G beta) + ||gamma||^2)``, where ``Z = H^T`` and
    ``G = H H^T`` for the feature variant and ``Z = X^T W``, ``G = W^T W``
    for the filter variant.
    """

    def __init__(self, model: FactoredModel, data: Dataset, cfg: SolverConfig):
        self.data, self.cfg = data, cfg
        if cfg.variant is SmfVariant.FEATURE:
            self.z, self.gram = model.h.T, model.h @ model.h.T
        else:
            self.z, self.gram = data.x_data.T @ model.w, model.w.T @ model.w

    def _acts(self, beta, gamma):
        acts = self.z @ beta
        if self.data.q:
            acts = acts + self.data.x_aux.T @ gamma
        return acts

    def value(self, beta, gamma) -> float:
        loss, _ = link_loss(self.data.labels, self._acts(beta, gamma), self.cfg.score)
        reg = np.sum(beta * (self.gram @ beta)) + np.sum(gamma ** 2)
        return loss + self.cfg.lam * float(reg)

    def grads(self, beta, gamma):
        _, hdot = link_loss(self.data.labels, self._acts(beta, gamma), self.cfg.score)
        g_beta = self.z.T @ hdot + 2 * self.cfg.lam * self.gram @ beta
        g_gamma = self.data.x_aux @ hdot + 2 * self.cfg.lam * gamma
        return g_beta, g_gamma


def _armijo_steps(blocks: _ClassifierBlocks, beta, gamma, which: str, tau: float, steps: int):
    for _ in range(steps):
        g = blocks.grads(beta, gamma)[0 if which == "beta" else 1]
        gsq = float(np.sum(g ** 2))
        if gsq == 0.0:
            break
        f0 = blocks.value(beta, gamma)
        s = tau
        for _ in range(MAX_BACKTRACKS):
            cand_b, cand_g = (beta - s * g, gamma) if which == "beta" else (beta, gamma - s * g)
            if blocks.value(cand_b, cand_g) <= f0 - 0.5 * s * gsq:
                beta, gamma = cand_b, cand_g
                break
            s *= 0.5
        else:
            break
    return beta, gamma


def bcd_train(data: Dataset, cfg: SolverConfig, init: Optional[FactoredModel] = None,
              ref: Optional[LiftedState] = None,
              inner_steps: int = BETA_GAMMA_STEPS) -> LpgdResult:
    """Run ``cfg.max_iters`` sweeps of block coordinate descent.

    The trace records the objective after each sweep (entry 0 is the
    initialization); ``grad_map_norm`` is the norm of the lifted gradient
    at the current factors. Stops early when a sweep lowers the objective by
    less than ``cfg.stop_tol``.
    """
    model = init if init is not None else default_init(
        data.p, data.n, data.q, data.kappa, cfg.rank, seed=cfg.seed)
    start = time.perf_counter()
    trace = []
    t_h = t_w = 1.0
    converged, reason = False, "max_iters"
    prev = None
    for sweep in range(cfg.max_iters + 1):
        if sweep > 0:
            model, t_h = _update_h(model, data, cfg, min(2 * t_h, 1e6))
            model, t_w = _update_w(model, data, cfg, min(2 * t_w, 1e6))
            blocks = _ClassifierBlocks(model, data, cfg)
            beta, gamma = _armijo_steps(blocks, model.beta, model.gamma, "beta", cfg.tau, inner_steps)
            if data.q:
                beta, gamma = _armijo_steps(blocks, beta, gamma, "gamma", cfg.tau, inner_steps)
            model = replace(model, beta=beta, gamma=gamma)
        state = lift(model, cfg.variant)
        value, grad = loss_and_gradient(state, data, cfg)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite objective at sweep {sweep}", sweep,
                                  trace[-1] if trace else None)
        trace.append(IterTrace(sweep, value, grad.norm(),
                               state.distance(ref) if ref is not None else None,
                               time.perf_counter() - start))
        if prev is not None and prev - value < cfg.stop_tol:
            converged, reason = True, "objective_decrease"
            break
        prev = value
    logger.info("bcd stopped after %d sweeps (%s), objective %.6g",
                trace[-1].iter, reason, trace[-1].objective)
    return LpgdResult(lift(model, cfg.variant), model, trace, converged, None, "bcd", reason)
