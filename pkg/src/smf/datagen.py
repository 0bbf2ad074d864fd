"""Synthetic datasets with known low-rank ground truth, plus conditioning diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from smf.model import (
    ConfigError,
    Dataset,
    LiftedState,
    SmfVariant,
    SolverConfig,
    default_init,
    lift,
    theta_shape,
)
from smf.objective import MnlConstants, max_activation_norm, mnl_constants, predictive_probs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerativeSpec:
    """Parameters of the generative model.

    ``scale`` multiplies the rank-``r`` product that forms ``theta*``;
    ``None`` means ``1/sqrt(r)`` so entries have unit variance.
    ``activation_scale`` additionally rescales the classifier block ``A*``
    (columns for the filter variant, rows for the feature variant) and
    keeps the rank intact; ``None`` means 1 for the feature variant and
    ``1/sqrt(p)`` for the filter variant, where activations sum over ``p``
    features. ``aux_scale`` sets the magnitude of the auxiliary means
    ``C*`` and of ``gamma*``.
    """

    p: int
    q: int
    n: int
    r: int
    kappa: int
    sigma: float = 0.1
    sigma_aux: float = 0.1
    variant: SmfVariant = SmfVariant.FILTER
    seed: int = 0
    scale: Optional[float] = None
    activation_scale: Optional[float] = None
    aux_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", SmfVariant.parse(self.variant))
        for name in ("p", "n", "r", "kappa"):
            val = getattr(self, name)
            if not (isinstance(val, (int, np.integer)) and val >= 1):
                raise ConfigError(f"{name}: expected an integer >= 1, got {val!r}")
        if not (isinstance(self.q, (int, np.integer)) and self.q >= 0):
            raise ConfigError(f"q: expected an integer >= 0, got {self.q!r}")
        rows, cols = theta_shape(self.variant, self.p, self.n, self.kappa)
        if self.r > min(self.p, self.n, rows, cols):
            raise ConfigError(f"r: rank {self.r} exceeds min(p, n) = {min(self.p, self.n)}")
        if self.sigma < 0:
            raise ConfigError("sigma: must be >= 0")
        if self.sigma_aux < 0:
            raise ConfigError("sigma_aux: must be >= 0")
        for name in ("scale", "activation_scale"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ConfigError(f"{name}: must be > 0")
        if not self.aux_scale >= 0:
            raise ConfigError("aux_scale: must be >= 0")

    @property
    def effective_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(self.r)

    @property
    def effective_activation_scale(self) -> float:
        if self.activation_scale is not None:
            return self.activation_scale
        return 1.0 if self.variant is SmfVariant.FEATURE else 1.0 / math.sqrt(self.p)

    def to_json(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "GenerativeSpec":
        if not isinstance(obj, dict):
            raise ConfigError("generative spec must be a JSON object")
        allowed = set(cls.__dataclass_fields__)
        extra = sorted(set(obj) - allowed)
        if extra:
            raise ConfigError(f"generative spec: unknown keys {extra}")
        missing = [k for k in ("p", "q", "n", "r", "kappa") if k not in obj]
        if missing:
            raise ConfigError(f"generative spec: missing keys {missing}")
        return cls(**obj)


@dataclass(frozen=True)
class GroundTruth:
    a_star: np.ndarray
    b_star: np.ndarray
    c_star: np.ndarray
    gamma_star: np.ndarray
    z_star: LiftedState


def generate(spec: GenerativeSpec) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset from the generative SMF model with a rank-``r`` ground truth."""
    rng = np.random.default_rng(spec.seed)
    rows, cols = theta_shape(spec.variant, spec.p, spec.n, spec.kappa)
    left = rng.standard_normal((rows, spec.r))
    right = rng.standard_normal((spec.r, cols))
    k = spec.kappa
    if spec.variant is SmfVariant.FEATURE:
        left[:k] *= spec.effective_activation_scale
    else:
        right[:, :k] *= spec.effective_activation_scale
    theta = spec.effective_scale * (left @ right)
    gamma = spec.aux_scale * rng.standard_normal((spec.q, k)) / math.sqrt(max(spec.q, 1))
    c_star = spec.aux_scale * rng.standard_normal((spec.q, spec.n))
    z_star = LiftedState(theta, gamma, spec.variant)
    a_star, b_star = z_star.split()

    x = b_star + spec.sigma * rng.standard_normal((spec.p, spec.n))
    x_aux = c_star + spec.sigma_aux * rng.standard_normal((spec.q, spec.n))
    if spec.variant is SmfVariant.FEATURE:
        acts = a_star.T.copy()
    else:
        acts = x.T @ a_star
    if spec.q:
        acts += x_aux.T @ gamma
    probs = predictive_probs(acts)
    # inverse-CDF sampling keeps one uniform draw per sample
    u = rng.uniform(size=(spec.n, 1))
    labels = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), k)
    data = Dataset(x, x_aux, labels, k)
    truth = GroundTruth(a_star.copy(), b_star.copy(), c_star, gamma, z_star)
    return data, truth


# ----------------------------------------------------------------------------
# semi-synthetic image data
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiSyntheticTruth:
    w_x: np.ndarray  # p x r, feature dictionary
    h_true: np.ndarray  # r x n
    w_y: np.ndarray  # p x r, label dictionary
    beta_y: np.ndarray  # r


def surrogate_digit_images(seed: int, groups: int = 4, per_group: int = 10, side: int = 28) -> list:
    """Smooth nonnegative stand-ins for handwritten digit images, scaled to [0, 1].

    Each group has its own stroke template; members are jittered copies.
    Returns a list of ``side*side x per_group`` matrices.
    """
    if side < 4:
        raise ConfigError(f"surrogate images need side >= 4, got {side}")
    margin = min(6, side // 4)  # strokes stay away from the border
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(groups):
        template = np.zeros((side, side))
        for _ in range(6):
            r0, c0 = rng.integers(margin, side - margin, size=2)
            r1, c1 = rng.integers(margin, side - margin, size=2)
            for t in np.linspace(0.0, 1.0, 40):
                template[int(round(r0 + t * (r1 - r0))), int(round(c0 + t * (c1 - c0)))] = 1.0
        cols = []
        for _ in range(per_group):
            shift = rng.integers(-2, 3, size=2)
            img = np.roll(template, tuple(shift), axis=(0, 1))
            img = gaussian_filter(img * rng.uniform(0.7, 1.0), sigma=1.0)
            img /= img.max()
            cols.append(img.ravel())
        out.append(np.column_stack(cols))
    return out


def semi_synthetic_mnist_like(seed: int = 0, p: int = 784, n: int = 500, r: int = 2,
                              sigma: float = 0.5,
                              sources: Optional[Sequence[np.ndarray]] = None):
    """Image-based binary dataset with a two-atom dictionary.

    ``sources`` holds ``2*r`` matrices of vectorized images (``p`` rows each),
    one per digit: the first ``r`` feed the feature dictionary and the last
    ``r`` the label dictionary. From each, 10 images are drawn at random and
    averaged into one dictionary column. A built-in surrogate is used when
    ``sources`` is omitted.
    """
    rng = np.random.default_rng(seed)
    if sources is None:
        side = int(round(math.sqrt(p)))
        if side * side != p:
            raise ConfigError(f"surrogate images need a square p, got {p}")
        sources = surrogate_digit_images(seed + 10_000, groups=2 * r, side=side)
    if len(sources) != 2 * r:
        raise ConfigError(f"need {2 * r} source matrices, got {len(sources)}")
    atoms = []
    for i, src in enumerate(sources):
        src = np.asarray(src, dtype=np.float64)
        if src.ndim != 2 or src.shape[0] != p or src.shape[1] < 10:
            raise ConfigError(f"source {i} must be {p} x m with m >= 10, got {src.shape}")
        pick = rng.choice(src.shape[1], size=10, replace=False)
        atoms.append(src[:, pick].mean(axis=1))
    w_x = np.column_stack(atoms[:r])
    w_y = np.column_stack(atoms[r:])
    h_true = rng.uniform(0.0, 1.0, size=(r, n))
    x = w_x @ h_true + sigma * rng.standard_normal((p, n))
    beta_y = np.array([1.0 if j % 2 == 0 else -1.0 for j in range(r)])
    prob = expit(beta_y @ (w_y.T @ x))
    labels = (rng.uniform(size=n) < prob).astype(np.int64)
    frac = labels.mean()
    if min(frac, 1 - frac) < 0.05:
        logger.warning("semi-synthetic labels are unbalanced: class-1 fraction %.3f", frac)
    data = Dataset(x, np.zeros((0, n)), labels, 1)
    return data, SemiSyntheticTruth(w_x, h_true, w_y, beta_y)


# ----------------------------------------------------------------------------
# conditioning
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionDiagnostics:
    mu: float
    l: float
    ok: bool
    rho_for_tau: float
    delta_minus: float
    delta_plus: float
    m_bound: float
    constants: MnlConstants
    tau_lo: float
    tau_hi: float
    # smoothness constant valid for every activation, usable as 1/L step size
    l_global: float

    def to_json(self) -> dict:
        out = asdict(self)
        out["constants"] = asdict(self.constants)
        return out


def covariance_extremes(data: Dataset) -> tuple[float, float]:
    """Extreme eigenvalues of ``n^-1 Phi Phi^T`` with ``Phi = [X_data ; X_aux]``."""
    phi = np.vstack([data.x_data, data.x_aux]) if data.q else data.x_data
    ev = np.linalg.eigvalsh(phi @ phi.T / data.n)
    return float(max(ev[0], 0.0)), float(ev[-1])


def global_link_curvature(kappa: int) -> float:
    """Supremum over activations of the largest link-Hessian eigenvalue bound."""
    return 0.25 if kappa == 1 else 0.5


def global_smoothness(data: Dataset, cfg: SolverConfig) -> float:
    """Lipschitz constant of the lifted gradient that holds at every state."""
    alpha = global_link_curvature(data.kappa)
    if cfg.variant is SmfVariant.FILTER:
        phi = np.vstack([data.x_data, data.x_aux]) if data.q else data.x_data
        curv = float(np.linalg.norm(phi, 2) ** 2)
    else:
        curv = 1.0 + (float(np.linalg.norm(data.x_aux, 2) ** 2) if data.q else 0.0)
    return max(2.0 * cfg.xi, 2.0 * cfg.lam + alpha * curv)


def condition_diagnostics(data: Dataset, cfg: SolverConfig, m_bound: Optional[float] = None,
                          state: Optional[LiftedState] = None) -> ConditionDiagnostics:
    """Strong-convexity and smoothness constants ``mu``, ``L`` of the lifted problem.

    ``m_bound`` defaults to the largest activation norm at ``state``, or at
    the default initialization when no state is given.
    """
    if m_bound is None:
        if state is None:
            state = lift(default_init(data.p, data.n, data.q, data.kappa, cfg.rank, cfg.seed),
                         cfg.variant)
        m_bound = max_activation_norm(state, data)
    consts = mnl_constants(m_bound, data.kappa)
    d_minus, d_plus = covariance_extremes(data)
    xi2, lam2 = 2.0 * cfg.xi, 2.0 * cfg.lam
    if cfg.variant is SmfVariant.FILTER:
        mu = min(xi2, lam2 + data.n * d_minus * consts.alpha_minus)
        l = max(xi2, lam2 + data.n * d_plus * consts.alpha_plus)
        if d_minus <= 0:
            logger.warning("feature covariance is singular; the filter variant is not well conditioned")
    else:
        mu = min(xi2, lam2)
        l = max(xi2, lam2 + consts.alpha_plus)
    ok = mu > 0 and l / mu < 3.0
    tau_lo = 1.0 / (2.0 * mu) if mu > 0 else math.inf
    return ConditionDiagnostics(
        mu=mu, l=l, ok=ok, rho_for_tau=2.0 * (1.0 - cfg.tau * mu),
        delta_minus=d_minus, delta_plus=d_plus, m_bound=float(m_bound), constants=consts,
        tau_lo=tau_lo, tau_hi=3.0 / (2.0 * l), l_global=global_smoothness(data, cfg))


def filter_unregularized_window(mu_star: float, l_star: float, xi: float, n: int) -> bool:
    """Well-conditioning of the unregularized filter variant written in terms of
    the classification condition numbers ``mu* = delta- alpha-`` and ``L* = delta+ alpha+``."""
    return 0 < l_star / mu_star < 3 and l_star / 6 < xi / n < 1.5 * mu_star
