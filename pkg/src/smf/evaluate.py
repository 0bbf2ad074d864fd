"""Test-time prediction, the MF-LR baseline, cross-validation and factor reports.

Prediction functions accept a single sample (1-D ``x``) or a batch with
samples as columns. For a single sample they return a label and a
probability vector; for a batch, a label vector and an ``(m, kappa+1)``
probability array.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from smf.datagen import global_smoothness
from smf.linalg import LinalgError, least_squares, truncated_svd
from smf.model import ConfigError, Dataset, FactoredModel, ScoreFunction, SmfVariant, SolverConfig
from smf.objective import link_loss, nll, predictive_probs, score_derivatives

logger = logging.getLogger(__name__)


class InnerSolverError(ArithmeticError):
    """Supervised sparse coding did not reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _as_batch(x, rows: int, name: str):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise ConfigError(f"{name} must have {rows} rows, got shape {np.shape(x)}")
    return arr, single


def _aux_batch(x_aux, q: int, m: int) -> np.ndarray:
    if q == 0:
        return np.zeros((0, m))
    arr, _ = _as_batch(x_aux, q, "x_aux")
    if arr.shape[1] != m:
        raise ConfigError(f"x_aux has {arr.shape[1]} samples, expected {m}")
    return arr


def _classify(acts: np.ndarray, score: ScoreFunction, single: bool):
    probs = predictive_probs(acts, score)
    labels = np.argmax(probs, axis=1)  # first maximum wins ties
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


def predict_filter(model: FactoredModel, x, x_aux=None, score: Optional[ScoreFunction] = None):
    """Classify from filtered features: ``a = beta^T W^T x + gamma^T x_aux``."""
    score = score or ScoreFunction.exp()
    xb, single = _as_batch(x, model.w.shape[0], "x")
    aux = _aux_batch(x_aux, model.gamma.shape[0], xb.shape[1])
    acts = (xb.T @ model.w) @ model.beta + aux.T @ model.gamma
    return _classify(acts, score, single)


def heuristic_codes(model: FactoredModel, x) -> np.ndarray:
    """Least-squares codes ``argmin_h ||x - W h||``; raises if ``W`` is rank deficient."""
    xb, _ = _as_batch(x, model.w.shape[0], "x")
    return least_squares(model.w, xb)


def predict_feature_heuristic(model: FactoredModel, x, x_aux=None,
                              score: Optional[ScoreFunction] = None):
    """Classify from least-squares codes: ``a = beta^T h + gamma^T x_aux``."""
    score = score or ScoreFunction.exp()
    xb, single = _as_batch(x, model.w.shape[0], "x")
    aux = _aux_batch(x_aux, model.gamma.shape[0], xb.shape[1])
    codes = heuristic_codes(model, xb)
    acts = codes.T @ model.beta + aux.T @ model.gamma
    return _classify(acts, score, single)


def _sparse_code(model: FactoredModel, x: np.ndarray, aux_act: np.ndarray, y: int,
                 score: ScoreFunction, xi: float, h0: np.ndarray, tol: float, max_steps: int):
    """Minimize ``nll(y, beta^T h + aux_act) + xi ||x - W h||^2`` over ``h``.

    Damped Newton with Armijo backtracking. The code has only ``r``
    entries, so each Newton system is tiny, and the stopping test on the
    Newton decrement does not depend on how large ``xi`` is.
    """
    w, beta = model.w, model.beta
    gram = 2 * xi * (w.T @ w)

    def value(h):
        res = w @ h - x
        return nll(y, h @ beta + aux_act, score) + xi * float(res @ res)

    h = h0.copy()
    f = value(h)
    dec2 = math.inf
    for _ in range(max_steps):
        hdot, hddot = score_derivatives(y, h @ beta + aux_act, score)
        g = beta @ hdot + 2 * xi * (w.T @ (w @ h - x))
        hess = beta @ hddot @ beta.T + gram
        try:
            step = np.linalg.solve(hess + 1e-14 * np.trace(hess) * np.eye(h.size), g)
        except np.linalg.LinAlgError:
            raise InnerSolverError("singular inner Hessian", float(np.linalg.norm(g))) from None
        dec2 = float(g @ step)
        if dec2 <= tol:
            return h, f
        t = 1.0
        for _ in range(60):
            cand = h - t * step
            fc = value(cand)
            if fc <= f - 0.25 * t * dec2:
                break
            t *= 0.5
        else:
            # no representable decrease left: accept if the decrement is already tiny
            if dec2 <= math.sqrt(tol):
                return h, f
            raise InnerSolverError(f"line search stalled with Newton decrement {dec2:.3e}", dec2)
        h, f = cand, fc
    if dec2 <= math.sqrt(tol):
        return h, f
    raise InnerSolverError(f"no convergence in {max_steps} steps, Newton decrement {dec2:.3e}", dec2)


def predict_feature_full(model: FactoredModel, x, x_aux=None, score: Optional[ScoreFunction] = None,
                         xi: float = 1.0, tol: float = 1e-8, max_steps: int = 500):
    """Supervised sparse coding: pick the label whose best code gives the lowest objective.

    For each candidate label ``y`` the code solves
    ``min_h nll(y, beta^T h + gamma^T x_aux) + xi ||x - W h||^2`` by damped
    Newton steps, started from the least-squares code. The
    returned probabilities are a softmin over the per-label optima and are
    only a heuristic confidence score.

    Returns ``(label, probs, codes)`` where ``codes`` is ``r x (kappa+1)``;
    for a batch, the codes have shape ``(m, r, kappa+1)``.
    """
    score = score or ScoreFunction.exp()
    xb, single = _as_batch(x, model.w.shape[0], "x")
    m = xb.shape[1]
    aux = _aux_batch(x_aux, model.gamma.shape[0], m)
    aux_acts = aux.T @ model.gamma
    try:
        starts = least_squares(model.w, xb)
    except LinalgError:
        starts = np.zeros((model.rank, m))
    k1 = model.kappa + 1
    labels = np.zeros(m, dtype=np.int64)
    probs = np.zeros((m, k1))
    codes = np.zeros((m, model.rank, k1))
    for s in range(m):
        objs = np.zeros(k1)
        for y in range(k1):
            h, f = _sparse_code(model, xb[:, s], aux_acts[s], y, score, xi, starts[:, s], tol, max_steps)
            codes[s, :, y], objs[y] = h, f
        labels[s] = int(np.argmin(objs))
        z = -(objs - objs.min())
        probs[s] = np.exp(z) / np.exp(z).sum()
    if single:
        return int(labels[0]), probs[0], codes[0]
    return labels, probs, codes


def predict_labels(model: FactoredModel, variant, x, x_aux=None, score=None, method="heuristic",
                   xi: float = 1.0) -> np.ndarray:
    """Batch labels using the variant's natural predictor."""
    variant = SmfVariant.parse(variant)
    if variant is SmfVariant.FILTER:
        return predict_filter(model, x, x_aux, score)[0]
    if method == "full":
        return predict_feature_full(model, x, x_aux, score, xi=xi)[0]
    return predict_feature_heuristic(model, x, x_aux, score)[0]


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred))


# ----------------------------------------------------------------------------
# MF-LR baseline
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticModel:
    """Multinomial logistic regression with an unpenalized intercept.

    Inputs are standardized with the training mean and scale before the
    linear map, which changes nothing but the conditioning.
    """

    coef: np.ndarray  # d x kappa
    intercept: np.ndarray  # kappa
    mean: np.ndarray
    scale: np.ndarray

    def activations(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.mean[:, None]) / self.scale[:, None]
        return z.T @ self.coef + self.intercept

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(predictive_probs(self.activations(feats)), axis=1)


def fit_logistic(feats: np.ndarray, labels: np.ndarray, kappa: int, ridge: float = 1e-4,
                 tol: float = 1e-8, max_iter: int = 5000) -> LogisticModel:
    """Fit by L-BFGS on the ridge-penalized multinomial negative log-likelihood."""
    d, n = feats.shape
    mean = feats.mean(axis=1)
    scale = feats.std(axis=1)
    scale[scale == 0] = 1.0
    z = (feats - mean[:, None]) / scale[:, None]

    def fun(v):
        coef = v[: d * kappa].reshape(d, kappa)
        icpt = v[d * kappa:]
        val, hdot = link_loss(labels, z.T @ coef + icpt, ScoreFunction.exp())
        val = val / n + ridge * float(np.sum(coef ** 2))
        g_coef = z @ hdot / n + 2 * ridge * coef
        return val, np.concatenate([g_coef.ravel(), hdot.sum(axis=0) / n])

    res = minimize(fun, np.zeros(d * kappa + kappa), jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "maxiter": max_iter})
    v = res.x
    return LogisticModel(v[: d * kappa].reshape(d, kappa), v[d * kappa:], mean, scale)


def mf_lr_baseline(train: Dataset, test: Dataset, r: int, ridge: float = 1e-4) -> float:
    """Rank-``r`` SVD factorization of the training features followed by logistic regression.

    ``X_train ~ U S V^T`` gives ``W = U S``; the classifier sees ``W^T x``
    (plus auxiliary features) for both training and test samples.
    """
    if train.p != test.p or train.q != test.q:
        raise ConfigError("train and test feature dimensions differ")
    if not np.any(train.x_data):
        raise ConfigError("training matrix is identically zero")
    svd = truncated_svd(train.x_data, min(r, min(train.x_data.shape)))
    w = svd.u * svd.s

    def feats(d: Dataset):
        f = w.T @ d.x_data
        return np.vstack([f, d.x_aux]) if d.q else f

    clf = fit_logistic(feats(train), train.labels, train.kappa, ridge=ridge)
    return accuracy(test.labels, clf.predict(feats(test)))


# ----------------------------------------------------------------------------
# cross-validation
# ----------------------------------------------------------------------------

def stratified_folds(labels, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample: seeded shuffle, then round-robin within each class."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    if folds < 2 or n < folds:
        raise ConfigError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    assign = np.empty(n, dtype=np.int64)
    counter = 0
    for cls in np.unique(labels):
        members = order[labels[order] == cls]
        assign[members] = (counter + np.arange(members.size)) % folds
        counter += members.size
    return assign


@dataclass
class CvResult:
    configs: list
    accuracies: np.ndarray  # (n_configs, folds)

    @property
    def mean(self) -> np.ndarray:
        return self.accuracies.mean(axis=1)

    @property
    def std(self) -> np.ndarray:
        return self.accuracies.std(axis=1)

    def best(self) -> int:
        return int(np.argmax(self.mean))

    def rows(self):
        for i in range(self.accuracies.shape[0]):
            for f in range(self.accuracies.shape[1]):
                yield i, f, float(self.accuracies[i, f])

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("config,fold,accuracy\n")
            for i, f, acc in self.rows():
                fh.write(f"{i},{f},{acc!r}\n")


def fit_and_score(train: Dataset, test: Dataset, cfg: SolverConfig, optimizer: str = "lpgd",
                  auto_tau: bool = False, method: str = "heuristic") -> float:
    """Train on ``train`` and return test accuracy."""
    from smf.bcd import bcd_train
    from smf.lpgd import lpgd_train

    if auto_tau:
        cfg = cfg.updated(tau=1.0 / global_smoothness(train, cfg))
    trainer = {"lpgd": lpgd_train, "bcd": bcd_train}[optimizer]
    res = trainer(train, cfg)
    pred = predict_labels(res.final_model, cfg.variant, test.x_data, test.x_aux, cfg.score,
                          method=method, xi=cfg.xi)
    return accuracy(test.labels, pred)


def cross_validate(data: Dataset, configs: Sequence[SolverConfig], folds: int = 5, seed: int = 0,
                   optimizer: str = "lpgd", auto_tau: bool = False) -> CvResult:
    """Stratified k-fold accuracy for every configuration in ``configs``.

    With ``auto_tau`` each fold uses ``tau = 1 / L`` for a smoothness constant
    ``L`` valid at every state, so that large ``xi`` does not diverge.
    """
    assign = stratified_folds(data.labels, folds, seed)
    classes = np.arange(data.kappa + 1)
    present = set(np.unique(data.labels))
    acc = np.zeros((len(configs), folds))
    for f in range(folds):
        train = data.subset(np.nonzero(assign != f)[0])
        test = data.subset(np.nonzero(assign == f)[0])
        missing = [int(c) for c in classes if c in present and c not in set(train.labels)]
        if missing:
            warnings.warn(f"fold {f}: classes {missing} absent from the training split",
                          RuntimeWarning, stacklevel=2)
        for i, cfg in enumerate(configs):
            acc[i, f] = fit_and_score(train, test, cfg, optimizer, auto_tau)
            logger.debug("config %d fold %d accuracy %.4f", i, f, acc[i, f])
    return CvResult(list(configs), acc)


def config_grid(base: SolverConfig, xis=(0.1, 1.0, 10.0), lams=(0.1, 1.0, 10.0)) -> list:
    return [base.updated(xi=float(x), lam=float(l)) for x in xis for l in lams]


# ----------------------------------------------------------------------------
# reports and preprocessing
# ----------------------------------------------------------------------------

def supervised_factor_report(model: FactoredModel, feature_names: Optional[Sequence[str]] = None,
                             top_k: int = 5) -> dict:
    """Per latent factor: its column ``w_j``, coefficients ``beta_j`` and the
    ``top_k`` features by absolute loading (zero loadings are never listed)."""
    if feature_names is not None and len(feature_names) != model.w.shape[0]:
        raise ConfigError(f"{len(feature_names)} feature names for {model.w.shape[0]} features")
    factors = []
    for j in range(model.rank):
        col = model.w[:, j]
        mag = np.abs(col)
        order = [int(i) for i in np.argsort(-mag, kind="stable")[:top_k] if mag[i] > 0]
        top = [feature_names[i] for i in order] if feature_names is not None else order
        factors.append({
            "factor": j,
            "beta": model.beta[j].tolist(),
            "w": col.tolist(),
            "top_features": top,
            "top_loadings": [float(col[i]) for i in order],
            "degenerate": not bool(np.any(mag > 0)),
        })
    return {"rank": model.rank, "kappa": model.kappa, "top_k": top_k, "factors": factors}


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Standardize each row (feature) to mean 0 and unit variance; constant rows are only centered."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    std[std == 0] = 1.0
    return (x - mean) / std
