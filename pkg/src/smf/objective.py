"""The lifted SMF objective, its gradient and the multinomial-link derivative kit.

Activations are returned as an ``(n, kappa)`` array whose row ``s`` is the
activation vector of sample ``s``. Labels take values in ``0..kappa`` with
class 0 as the base class whose score is fixed to 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from smf.model import (
    ConfigError,
    Dataset,
    LiftedState,
    ScoreFunction,
    SmfVariant,
    SolverConfig,
    check_state_matches,
)

HESSIAN_MAX_P_KAPPA = 200


class ScoreDomainError(ValueError):
    """The score function returned a non-positive value."""


@dataclass(frozen=True)
class LossGradient:
    d_theta: np.ndarray
    d_gamma: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.d_theta ** 2) + np.sum(self.d_gamma ** 2)))


@dataclass(frozen=True)
class MnlConstants:
    gamma_max: float
    alpha_minus: float
    alpha_plus: float
    m_bound: float


# ----------------------------------------------------------------------------
# link function
# ----------------------------------------------------------------------------

def _padded_logits(a: np.ndarray) -> np.ndarray:
    zeros = np.zeros(a.shape[:-1] + (1,))
    return np.concatenate([zeros, a], axis=-1)


def _score_values(a: np.ndarray, score: ScoreFunction):
    hv = np.asarray(score.h(a), dtype=np.float64)
    if np.any(hv <= 0):
        raise ScoreDomainError(f"score {score.name!r} is non-positive at some activation")
    return hv, np.asarray(score.dh(a), dtype=np.float64), np.asarray(score.d2h(a), dtype=np.float64)


def predictive_probs(a, score: ScoreFunction | None = None) -> np.ndarray:
    """Class probabilities ``[1, h(a_1), ..., h(a_k)] / (1 + sum h)``.

    ``a`` may be one activation vector or an ``(n, kappa)`` stack. The
    exponential score goes through a shifted log-sum-exp so that large
    activations do not overflow.
    """
    score = score or ScoreFunction.exp()
    a = np.asarray(a, dtype=np.float64)
    if score.is_exp:
        return softmax(_padded_logits(a), axis=-1)
    hv = np.asarray(score.h(a), dtype=np.float64)
    if np.any(hv < 0):
        raise ScoreDomainError(f"score {score.name!r} is negative at some activation")
    padded = np.concatenate([np.ones(a.shape[:-1] + (1,)), hv], axis=-1)
    return padded / padded.sum(axis=-1, keepdims=True)


def nll(y, a, score: ScoreFunction | None = None):
    """Negative log-likelihood ``log(1 + sum h(a_c)) - 1{y>=1} log h(a_y)``.

    Vectorized over a leading sample axis when ``y`` is an array.
    """
    score = score or ScoreFunction.exp()
    a = np.asarray(a, dtype=np.float64)
    y_arr = np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr > a.shape[-1]):
        raise ValueError(f"label out of range 0..{a.shape[-1]}")
    if score.is_exp:
        z = _padded_logits(a)
        out = logsumexp(z, axis=-1) - np.take_along_axis(
            z, y_arr[..., None].astype(np.int64), axis=-1)[..., 0]
    else:
        hv = np.asarray(score.h(a), dtype=np.float64)
        padded = np.concatenate([np.ones(a.shape[:-1] + (1,)), hv], axis=-1)
        hy = np.take_along_axis(padded, y_arr[..., None].astype(np.int64), axis=-1)[..., 0]
        if np.any(hy <= 0):
            raise ScoreDomainError("h(a_y) must be positive")
        out = np.log(padded.sum(axis=-1)) - np.log(hy)
    return float(out) if np.ndim(out) == 0 else out


def _hdot_hddot_batch(labels: np.ndarray, acts: np.ndarray, score: ScoreFunction,
                      want_hessian: bool):
    """Per-sample score derivatives: ``hdot`` (n, k) and optionally ``Hddot`` (n, k, k)."""
    n, k = acts.shape
    onehot = np.zeros((n, k))
    pos = labels >= 1
    onehot[np.nonzero(pos)[0], labels[pos] - 1] = 1.0
    if score.is_exp:
        g = softmax(_padded_logits(acts), axis=-1)[:, 1:]
        hdot = g - onehot
        if not want_hessian:
            return hdot, None
        hddot = np.einsum("si,ij->sij", g, np.eye(k)) - g[:, :, None] * g[:, None, :]
        return hdot, hddot
    hv, d1, d2 = _score_values(acts, score)
    denom = 1.0 + hv.sum(axis=1, keepdims=True)
    hdot = d1 / denom - onehot * d1 / hv
    if not want_hessian:
        return hdot, None
    hddot = (np.einsum("si,ij->sij", d2 / denom, np.eye(k))
             - d1[:, :, None] * d1[:, None, :] / denom[:, :, None] ** 2)
    corr = onehot * (d2 / hv - (d1 / hv) ** 2)
    hddot -= np.einsum("si,ij->sij", corr, np.eye(k))
    return hdot, hddot


def link_loss(labels: np.ndarray, acts: np.ndarray, score: ScoreFunction):
    """Summed negative log-likelihood over samples and its ``(n, kappa)`` gradient in ``acts``."""
    value = float(np.sum(nll(labels, acts, score)))
    hdot, _ = _hdot_hddot_batch(labels, acts, score, want_hessian=False)
    return value, hdot


def score_derivatives(y: int, a, score: ScoreFunction | None = None):
    """First and second derivatives of ``nll(y, .)`` at ``a``: ``(hdot, Hddot)``."""
    score = score or ScoreFunction.exp()
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    if not 0 <= int(y) <= a.shape[1]:
        raise ValueError(f"label {y} out of range 0..{a.shape[1]}")
    hdot, hddot = _hdot_hddot_batch(np.array([int(y)]), a, score, want_hessian=True)
    return hdot[0], hddot[0]


# ----------------------------------------------------------------------------
# objective and gradient
# ----------------------------------------------------------------------------

def activations(state: LiftedState, data: Dataset) -> np.ndarray:
    """``(n, kappa)`` activations: ``A[:, s] + gamma.T x'_s`` (feature) or ``A.T x_s + gamma.T x'_s`` (filter)."""
    check_state_matches(state, data)
    a_blk, _ = state.split()
    if state.variant is SmfVariant.FEATURE:
        acts = a_blk.T.copy()
    else:
        acts = data.x_data.T @ a_blk
    if data.q:
        acts += data.x_aux.T @ state.gamma
    return acts


def max_activation_norm(state: LiftedState, data: Dataset) -> float:
    """Largest Euclidean norm over the per-sample activation vectors."""
    return float(np.max(np.linalg.norm(activations(state, data), axis=1)))


def _penalties(state: LiftedState, data: Dataset, cfg: SolverConfig) -> float:
    a_blk, b_blk = state.split()
    recon = float(np.sum((data.x_data - b_blk) ** 2))
    reg = float(np.sum(a_blk ** 2) + np.sum(state.gamma ** 2))
    return cfg.xi * recon + cfg.lam * reg


def classification_loss(state: LiftedState, data: Dataset, score: ScoreFunction) -> float:
    acts = activations(state, data)
    return float(np.sum(nll(data.labels, acts, score)))


def objective_value(state: LiftedState, data: Dataset, cfg: SolverConfig) -> float:
    """``sum_s nll(y_s, a_s) + xi ||X - B||^2 + lambda (||A||^2 + ||gamma||^2)``."""
    if state.variant is not cfg.variant:
        raise ConfigError(f"state is {state.variant.value} but config is {cfg.variant.value}")
    return classification_loss(state, data, cfg.score) + _penalties(state, data, cfg)


def loss_and_gradient(state: LiftedState, data: Dataset, cfg: SolverConfig):
    """Objective value and gradient from one activation pass."""
    if state.variant is not cfg.variant:
        raise ConfigError(f"state is {state.variant.value} but config is {cfg.variant.value}")
    acts = activations(state, data)
    value = float(np.sum(nll(data.labels, acts, cfg.score))) + _penalties(state, data, cfg)
    hdot, _ = _hdot_hddot_batch(data.labels, acts, cfg.score, want_hessian=False)
    a_blk, b_blk = state.split()
    d_b = 2.0 * cfg.xi * (b_blk - data.x_data)
    if state.variant is SmfVariant.FEATURE:
        d_a = hdot.T + 2.0 * cfg.lam * a_blk
        d_theta = np.vstack([d_a, d_b])
    else:
        d_a = data.x_data @ hdot + 2.0 * cfg.lam * a_blk
        d_theta = np.hstack([d_a, d_b])
    d_gamma = data.x_aux @ hdot + 2.0 * cfg.lam * state.gamma
    return value, LossGradient(d_theta, d_gamma)


def gradient(state: LiftedState, data: Dataset, cfg: SolverConfig) -> LossGradient:
    return loss_and_gradient(state, data, cfg)[1]


# ----------------------------------------------------------------------------
# curvature constants and explicit Hessians
# ----------------------------------------------------------------------------

def mnl_constants(m_bound: float, kappa: int) -> MnlConstants:
    """Curvature constants of the multinomial logistic link for activations bounded by ``M``.

    ``alpha_minus`` and ``alpha_plus`` lower- and upper-bound the eigenvalues
    of the per-sample link Hessian; ``gamma_max`` bounds the link gradient.
    """
    if m_bound < 0 or kappa < 1:
        raise ValueError("m_bound must be >= 0 and kappa >= 1")
    em, eneg = math.exp(m_bound), math.exp(-m_bound)
    gamma_max = 1.0 + em / (1.0 + em + (kappa - 1) * eneg)
    alpha_minus = eneg / (1.0 + eneg + (kappa - 1) * em)
    alpha_plus = em * (1.0 + 2.0 * (kappa - 1) * em) / (1.0 + em + (kappa - 1) * eneg) ** 2
    return MnlConstants(gamma_max, alpha_minus, alpha_plus, float(m_bound))


def link_hessian_bounds(a) -> tuple[float, float]:
    """Diagonal-dominance lower bound and Gershgorin upper bound on the eigenvalues of
    the exponential-score link Hessian at activation ``a``."""
    probs = predictive_probs(np.asarray(a, dtype=np.float64).ravel())
    p0, pk = probs[0], probs[1:]
    return float(np.min(pk * p0)), float(np.max(pk * (2.0 - p0 - 2.0 * pk)))


def _activation_jacobian(state: LiftedState, data: Dataset) -> np.ndarray:
    """Matrix ``J`` with ``vec(acts) = J @ z``, ``z = [theta.ravel(), gamma.ravel()]``.

    Rows are ordered sample-major (row ``s*kappa + j`` is activation ``j`` of sample ``s``).
    """
    n, k, q = data.n, data.kappa, data.q
    rows_t, cols_t = state.theta.shape
    dim = rows_t * cols_t + q * k
    jac = np.zeros((n * k, dim))
    for s in range(n):
        for j in range(k):
            row = s * k + j
            if state.variant is SmfVariant.FEATURE:
                jac[row, j * cols_t + s] = 1.0  # theta[j, s]
            else:
                jac[row, np.arange(data.p) * cols_t + j] = data.x_data[:, s]  # theta[:, j]
            if q:
                jac[row, rows_t * cols_t + np.arange(q) * k + j] = data.x_aux[:, s]
    return jac


def lifted_hessian(state: LiftedState, data: Dataset, cfg: SolverConfig) -> np.ndarray:
    """Dense Hessian of the lifted objective in ``z = [theta.ravel(), gamma.ravel()]``.

    Intended for small instances only.
    """
    check_state_matches(state, data)
    if data.p * data.kappa > HESSIAN_MAX_P_KAPPA:
        raise ValueError(f"instance too large for an explicit Hessian: p*kappa = "
                         f"{data.p * data.kappa} > {HESSIAN_MAX_P_KAPPA}")
    acts = activations(state, data)
    _, hddot = _hdot_hddot_batch(data.labels, acts, cfg.score, want_hessian=True)
    jac = _activation_jacobian(state, data)
    n, k = acts.shape
    blk = np.zeros((n * k, n * k))
    for s in range(n):
        blk[s * k:(s + 1) * k, s * k:(s + 1) * k] = hddot[s]
    hess = jac.T @ blk @ jac
    # quadratic penalties: 2 lambda on A and gamma, 2 xi on B
    mask = np.zeros(state.theta.shape)
    if state.variant is SmfVariant.FEATURE:
        mask[:k] = 1.0
    else:
        mask[:, :k] = 1.0
    diag = np.concatenate([np.where(mask.ravel() == 1.0, 2 * cfg.lam, 2 * cfg.xi),
                           np.full(state.gamma.size, 2 * cfg.lam)])
    hess[np.diag_indices_from(hess)] += diag
    return hess


def rayleigh_quotients(hess: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """``d^T H d / d^T d`` for each row ``d`` of ``directions``."""
    d = np.atleast_2d(directions)
    return np.einsum("ij,jk,ik->i", d, hess, d) / np.einsum("ij,ij->i", d, d)


@dataclass(frozen=True)
class HessianBoundsReport:
    trials: int
    curvature_lower_slack: float  # min over samples of lambda_min(Hddot) - lower bound
    curvature_upper_slack: float  # min over samples of upper bound - lambda_max(Hddot)
    sandwich_lower_slack: float
    sandwich_upper_slack: float
    max_activation_norm: float

    @property
    def ok(self) -> bool:
        tol = -1e-10
        return min(self.curvature_lower_slack, self.curvature_upper_slack,
                   self.sandwich_lower_slack, self.sandwich_upper_slack) >= tol


def _regressor_matrix(state: LiftedState, data: Dataset) -> np.ndarray:
    """Regressors ``phi_s`` (columns) through which the loss sees ``[A, gamma]``."""
    if state.variant is SmfVariant.FEATURE:
        base = np.eye(data.n)
    else:
        base = data.x_data
    return np.vstack([base, data.x_aux]) if data.q else base


def hessian_eig_bounds_check(data: Dataset, cfg: SolverConfig, trials: int = 5,
                             seed: int = 0, scale: float = 1.0) -> HessianBoundsReport:
    """Check per-sample eigenvalue bounds and the Kronecker sandwich at random states.

    Random lifted states have i.i.d. ``N(0, scale^2)`` entries, rescaled so
    activations stay within a few units. Exponential score only.
    """
    if not cfg.score.is_exp:
        raise ValueError("eigenvalue bounds are stated for the exponential score")
    if data.p * data.kappa > HESSIAN_MAX_P_KAPPA:
        raise ValueError(f"instance too large: p*kappa = {data.p * data.kappa} > {HESSIAN_MAX_P_KAPPA}")
    from smf.model import theta_shape  # local import keeps the public surface small

    rng = np.random.default_rng(seed)
    k = data.kappa
    worst = [np.inf] * 4
    m_seen = 0.0
    for _ in range(trials):
        theta = rng.standard_normal(theta_shape(cfg.variant, data.p, data.n, k)) * scale
        gamma = rng.standard_normal((data.q, k)) * scale
        state = LiftedState(theta, gamma, cfg.variant)
        acts = activations(state, data)
        m_seen = max(m_seen, float(np.max(np.linalg.norm(acts, axis=1))))
        _, hddot = _hdot_hddot_batch(data.labels, acts, cfg.score, want_hessian=True)
        eig = np.linalg.eigvalsh(hddot)  # (n, k) ascending
        lo_hi = np.array([link_hessian_bounds(a) for a in acts])
        worst[0] = min(worst[0], float(np.min(eig[:, 0] - lo_hi[:, 0])))
        worst[1] = min(worst[1], float(np.min(lo_hi[:, 1] - eig[:, -1])))
        phi = _regressor_matrix(state, data)
        loss_hess = sum(np.kron(hddot[s], np.outer(phi[:, s], phi[:, s])) for s in range(data.n))
        ev = np.linalg.eigvalsh(loss_hess)
        gram = np.linalg.eigvalsh(phi @ phi.T)
        lam_minus, lam_plus = float(eig[:, 0].min()), float(eig[:, -1].max())
        worst[2] = min(worst[2], float(ev[0] - lam_minus * gram[0]))
        worst[3] = min(worst[3], float(lam_plus * gram[-1] - ev[-1]))
    return HessianBoundsReport(trials, *worst, m_seen)
