"""Lifted low-rank projected gradient descent and its convergence bookkeeping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from smf.linalg import rank_projection
from smf.model import (
    Dataset,
    FactoredModel,
    LiftedState,
    SolverConfig,
    Unconstrained,
    check_state_matches,
    default_init,
    lift,
    project_constraint,
    unlift,
)
from smf.objective import LossGradient, loss_and_gradient

logger = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """The objective or the iterate became non-finite."""

    def __init__(self, message: str, iteration: int, last_trace: Optional["IterTrace"]):
        super().__init__(message)
        self.iteration = iteration
        self.last_trace = last_trace


class InsufficientTraceError(ValueError):
    pass


@dataclass(frozen=True)
class IterTrace:
    iter: int
    objective: float
    grad_map_norm: float
    dist_to_ref: Optional[float]
    elapsed_seconds: float
    # ||Z_k - Z_{k-1}||_F / tau, the fixed-point residual of the projected step
    step_norm: Optional[float] = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LpgdResult:
    final_state: LiftedState
    final_model: FactoredModel
    trace: list
    converged: bool
    rho_estimate: Optional[float] = None
    optimizer: str = "lpgd"
    stop_reason: str = "max_iters"

    @property
    def final_objective(self) -> float:
        return self.trace[-1].objective

    @property
    def iterations(self) -> int:
        return self.trace[-1].iter


def step_size_window(mu: float, l: float) -> tuple[float, float, bool]:
    """Step sizes ``(1/(2 mu), 3/(2 L))`` for which the contraction guarantee holds.

    The window is nonempty exactly when ``L / mu < 3``.
    """
    if not (mu > 0 and l > 0):
        raise ValueError(f"mu and L must be positive, got mu={mu}, L={l}")
    return 1.0 / (2.0 * mu), 3.0 / (2.0 * l), l / mu < 3.0


def _projected_pair(state: LiftedState, grad: LossGradient, tau: float, cfg: SolverConfig) -> LiftedState:
    moved = state.with_arrays(state.theta - tau * grad.d_theta, state.gamma - tau * grad.d_gamma)
    return project_constraint(moved, cfg.constraint)


def gradient_mapping(state: LiftedState, data: Dataset, cfg: SolverConfig,
                     grad: Optional[LossGradient] = None) -> tuple[LossGradient, float]:
    """``G(Z, tau) = (Z - Proj(Z - tau grad F(Z))) / tau`` and its Frobenius norm.

    Without constraints this is the gradient itself, returned unchanged.
    """
    if grad is None:
        grad = loss_and_gradient(state, data, cfg)[1]
    if isinstance(cfg.constraint, Unconstrained):
        return grad, grad.norm()
    proj = _projected_pair(state, grad, cfg.tau, cfg)
    g = LossGradient((state.theta - proj.theta) / cfg.tau, (state.gamma - proj.gamma) / cfg.tau)
    return g, g.norm()


def fit_contraction_rate(trace, fraction: float = 0.5, floor: float = 1e-14) -> float:
    """``exp`` of the least-squares slope of ``log dist_to_ref`` against ``iter``.

    Points with ``dist_to_ref <= floor`` are dropped, then the fit uses the
    final ``fraction`` of the remaining points.
    """
    pts = [(t.iter, t.dist_to_ref) for t in trace
           if t.dist_to_ref is not None and t.dist_to_ref > floor]
    if len(pts) < 10:
        raise InsufficientTraceError(f"need >= 10 trace points above {floor:g}, got {len(pts)}")
    start = len(pts) - max(int(math.ceil(fraction * len(pts))), 2)
    it, dist = np.array(pts[start:], dtype=np.float64).T
    slope = np.polyfit(it, np.log(dist), 1)[0]
    return float(math.exp(slope))


def lpgd_train(data: Dataset, cfg: SolverConfig, init: Optional[FactoredModel] = None,
               ref: Optional[LiftedState] = None, svd_method: str = "auto") -> LpgdResult:
    """Run lifted projected gradient descent for ``cfg.max_iters`` iterations.

    Each iteration takes a gradient step on ``(theta, gamma)`` with step
    ``cfg.tau``, projects the pair onto the constraint set, then projects
    ``theta`` onto rank ``cfg.rank``. The run stops early once the
    gradient-mapping norm or the fixed-point residual drops below
    ``cfg.stop_tol``. The trace holds iterations ``0..N`` where entry ``k``
    describes the iterate after ``k`` steps.
    """
    if init is None:
        init = default_init(data.p, data.n, data.q, data.kappa, cfg.rank, seed=cfg.seed)
    state = lift(init, cfg.variant)
    check_state_matches(state, data)
    if ref is not None:
        check_state_matches(ref, data)

    trace: list[IterTrace] = []
    start = time.perf_counter()
    step_norm: Optional[float] = None
    converged, reason = False, "max_iters"
    for k in range(cfg.max_iters + 1):
        value, grad = loss_and_gradient(state, data, cfg)
        if not (math.isfinite(value) and np.all(np.isfinite(grad.d_theta))
                and np.all(np.isfinite(grad.d_gamma))):
            raise DivergenceError(f"non-finite objective at iteration {k}", k,
                                  trace[-1] if trace else None)
        _, gnorm = gradient_mapping(state, data, cfg, grad)
        rec = IterTrace(k, value, gnorm, state.distance(ref) if ref is not None else None,
                        time.perf_counter() - start, step_norm)
        trace.append(rec)
        if gnorm < cfg.stop_tol:
            converged, reason = True, "grad_map_norm"
            break
        if step_norm is not None and step_norm < cfg.stop_tol:
            converged, reason = True, "step_norm"
            break
        if k == cfg.max_iters:
            break
        moved = _projected_pair(state, grad, cfg.tau, cfg)
        nxt = moved.with_arrays(rank_projection(moved.theta, cfg.rank, method=svd_method), moved.gamma)
        step_norm = nxt.distance(state) / cfg.tau
        state = nxt

    logger.info("lpgd stopped after %d iterations (%s), objective %.6g",
                trace[-1].iter, reason, trace[-1].objective)
    rho = None
    if ref is not None and converged:
        try:
            rho = fit_contraction_rate(trace)
        except InsufficientTraceError:
            rho = None
    return LpgdResult(state, unlift(state, cfg.rank), trace, converged, rho, "lpgd", reason)


def write_trace_jsonl(path, trace) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.to_json()))
            fh.write("\n")


def read_trace_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(IterTrace(**json.loads(line)))
    return out
