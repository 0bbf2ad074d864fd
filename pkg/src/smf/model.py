"""Datasets, parameter containers, solver configuration and the lift/unlift maps.

Two lifted layouts are supported:

* feature-based (SMF-H): ``theta = [beta.T @ H ; W @ H]`` of shape ``(kappa+p, n)``
* filter-based (SMF-W): ``theta = [W @ beta, W @ H]`` of shape ``(p, kappa+n)``

In both cases the first block is called ``A`` and the second ``B``.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from smf.linalg import as_matrix, check_finite, numerical_rank_ratio, truncated_svd


class ConfigError(ValueError):
    """Invalid solver configuration or dataset shape."""


class SmfVariant(str, enum.Enum):
    FEATURE = "feature"  # SMF-H
    FILTER = "filter"  # SMF-W

    @classmethod
    def parse(cls, value) -> "SmfVariant":
        if isinstance(value, cls):
            return value
        aliases = {"feature": cls.FEATURE, "smf-h": cls.FEATURE, "h": cls.FEATURE,
                   "filter": cls.FILTER, "smf-w": cls.FILTER, "w": cls.FILTER}
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise ConfigError(f"unknown variant {value!r}; expected 'feature' or 'filter'") from None


@dataclass(frozen=True)
class ScoreFunction:
    """Score function ``h`` with its first two derivatives.

    ``h`` must be positive, strictly increasing and satisfy ``h(0) = 1``.
    The exponential score gets numerically stable closed forms elsewhere.
    """

    name: str
    h: Callable[[np.ndarray], np.ndarray]
    dh: Callable[[np.ndarray], np.ndarray]
    d2h: Callable[[np.ndarray], np.ndarray]

    @property
    def is_exp(self) -> bool:
        return self.name == "exp"

    @classmethod
    def exp(cls) -> "ScoreFunction":
        return cls("exp", np.exp, np.exp, np.exp)

    @classmethod
    def custom(cls, h, dh, d2h, name: str = "custom", check: bool = True) -> "ScoreFunction":
        score = cls(name, h, dh, d2h)
        if check:
            score.validate()
        return score

    @classmethod
    def parse(cls, value) -> "ScoreFunction":
        if isinstance(value, cls):
            return value
        if str(value).lower() in ("exp", "logistic", "softmax"):
            return cls.exp()
        raise ConfigError(f"unknown score function {value!r}; only 'exp' is serializable")

    def validate(self, grid: Optional[np.ndarray] = None) -> None:
        if abs(float(self.h(np.array(0.0))) - 1.0) > 1e-12:
            raise ConfigError(f"score {self.name!r}: h(0) must equal 1")
        grid = np.linspace(-5.0, 5.0, 101) if grid is None else grid
        if not np.all(np.asarray(self.dh(grid)) > 0):
            raise ConfigError(f"score {self.name!r}: h' must be positive")


@dataclass(frozen=True)
class Unconstrained:
    def to_json(self) -> dict:
        return {"type": "unconstrained"}


@dataclass(frozen=True)
class FrobeniusBall:
    radius_theta: float
    radius_gamma: float

    def __post_init__(self):
        if not (self.radius_theta > 0 and self.radius_gamma > 0):
            raise ConfigError("Frobenius ball radii must be positive")

    def to_json(self) -> dict:
        return {"type": "frobenius_ball", "radius_theta": self.radius_theta,
                "radius_gamma": self.radius_gamma}


ConstraintSet = Union[Unconstrained, FrobeniusBall]


def parse_constraint(value) -> ConstraintSet:
    if isinstance(value, (Unconstrained, FrobeniusBall)):
        return value
    if value is None or value == "unconstrained":
        return Unconstrained()
    if not isinstance(value, dict):
        raise ConfigError(f"constraint must be an object, got {value!r}")
    kind = value.get("type")
    if kind == "unconstrained":
        _reject_unknown(value, {"type"}, "constraint")
        return Unconstrained()
    if kind == "frobenius_ball":
        _reject_unknown(value, {"type", "radius_theta", "radius_gamma"}, "constraint")
        try:
            return FrobeniusBall(float(value["radius_theta"]), float(value["radius_gamma"]))
        except KeyError as exc:
            raise ConfigError(f"constraint: missing field {exc.args[0]!r}") from None
    raise ConfigError(f"constraint.type: unknown constraint {kind!r}")


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")


@dataclass(frozen=True)
class Dataset:
    """Observed features ``x_data`` (p x n), auxiliary ``x_aux`` (q x n), labels in 0..kappa."""

    x_data: np.ndarray
    x_aux: np.ndarray
    labels: np.ndarray
    kappa: int

    def __post_init__(self):
        x = check_finite(as_matrix(self.x_data, "x_data"), "x_data")
        n = x.shape[1]
        aux = np.zeros((0, n)) if self.x_aux is None else np.asarray(self.x_aux, dtype=np.float64)
        if aux.size == 0:
            aux = np.zeros((0, n))
        aux = check_finite(as_matrix(aux, "x_aux"), "x_aux")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ConfigError("labels must be a 1-D integer vector")
        labels = labels.astype(np.int64)
        if n < 1:
            raise ConfigError("dataset needs at least one sample")
        if aux.shape[1] != n or labels.shape[0] != n:
            raise ConfigError(
                f"sample count mismatch: x_data has {n}, x_aux {aux.shape[1]}, labels {labels.shape[0]}")
        if self.kappa < 1:
            raise ConfigError("kappa must be >= 1")
        if labels.min() < 0 or labels.max() > self.kappa:
            raise ConfigError(f"labels must lie in 0..{self.kappa}")
        object.__setattr__(self, "x_data", x)
        object.__setattr__(self, "x_aux", aux)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "kappa", int(self.kappa))

    @property
    def p(self) -> int:
        return self.x_data.shape[0]

    @property
    def q(self) -> int:
        return self.x_aux.shape[0]

    @property
    def n(self) -> int:
        return self.x_data.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x_data[:, idx], self.x_aux[:, idx], self.labels[idx], self.kappa)


@dataclass(frozen=True)
class FactoredModel:
    w: np.ndarray  # p x r
    h: np.ndarray  # r x n
    beta: np.ndarray  # r x kappa
    gamma: np.ndarray  # q x kappa

    def __post_init__(self):
        w, h, beta = as_matrix(self.w, "w"), as_matrix(self.h, "h"), as_matrix(self.beta, "beta")
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if gamma.size == 0:
            gamma = np.zeros((0, beta.shape[1]))
        gamma = as_matrix(gamma, "gamma")
        r = w.shape[1]
        if h.shape[0] != r or beta.shape[0] != r:
            raise ConfigError(f"inconsistent rank: w {w.shape}, h {h.shape}, beta {beta.shape}")
        if gamma.shape[1] != beta.shape[1]:
            raise ConfigError(f"gamma {gamma.shape} does not match kappa={beta.shape[1]}")
        for name, val in (("w", w), ("h", h), ("beta", beta), ("gamma", gamma)):
            object.__setattr__(self, name, val)

    @property
    def rank(self) -> int:
        return self.w.shape[1]

    @property
    def kappa(self) -> int:
        return self.beta.shape[1]


@dataclass(frozen=True)
class LiftedState:
    theta: np.ndarray
    gamma: np.ndarray
    variant: SmfVariant

    def __post_init__(self):
        object.__setattr__(self, "theta", as_matrix(self.theta, "theta"))
        object.__setattr__(self, "gamma", as_matrix(np.asarray(self.gamma, dtype=np.float64), "gamma"))
        object.__setattr__(self, "variant", SmfVariant.parse(self.variant))

    @property
    def kappa(self) -> int:
        return self.gamma.shape[1]

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Return views ``(A, B)`` of theta."""
        k = self.kappa
        if self.variant is SmfVariant.FEATURE:
            return self.theta[:k], self.theta[k:]
        return self.theta[:, :k], self.theta[:, k:]

    def with_arrays(self, theta: np.ndarray, gamma: np.ndarray) -> "LiftedState":
        return LiftedState(theta, gamma, self.variant)

    def distance(self, other: "LiftedState") -> float:
        """Frobenius distance over the pair ``[theta, gamma]``."""
        return float(np.sqrt(np.sum((self.theta - other.theta) ** 2)
                             + np.sum((self.gamma - other.gamma) ** 2)))

    def rank_ratio(self, r: int) -> float:
        return numerical_rank_ratio(self.theta, r)


def theta_shape(variant: SmfVariant, p: int, n: int, kappa: int) -> tuple[int, int]:
    return (kappa + p, n) if SmfVariant.parse(variant) is SmfVariant.FEATURE else (p, kappa + n)


def check_state_matches(state: LiftedState, data: Dataset) -> None:
    expected = theta_shape(state.variant, data.p, data.n, data.kappa)
    if state.theta.shape != expected:
        raise ConfigError(f"theta has shape {state.theta.shape}, expected {expected} "
                          f"for {state.variant.value} variant")
    if state.gamma.shape != (data.q, data.kappa):
        raise ConfigError(f"gamma has shape {state.gamma.shape}, expected {(data.q, data.kappa)}")


@dataclass(frozen=True)
class SolverConfig:
    variant: SmfVariant
    score: ScoreFunction = field(default_factory=ScoreFunction.exp)
    xi: float = 1.0
    lam: float = 0.0
    tau: float = 0.01
    rank: int = 2
    max_iters: int = 500
    constraint: ConstraintSet = field(default_factory=Unconstrained)
    stop_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", SmfVariant.parse(self.variant))
        object.__setattr__(self, "score", ScoreFunction.parse(self.score))
        object.__setattr__(self, "constraint", parse_constraint(self.constraint))
        if not (isinstance(self.rank, (int, np.integer)) and self.rank >= 1):
            raise ConfigError(f"rank must be an integer >= 1, got {self.rank!r}")
        if not (isinstance(self.max_iters, (int, np.integer)) and self.max_iters >= 1):
            raise ConfigError(f"max_iters must be an integer >= 1, got {self.max_iters!r}")
        for name in ("xi", "tau"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be > 0, got {val!r}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError(f"lambda must be >= 0, got {self.lam!r}")
        if not self.stop_tol >= 0:
            raise ConfigError(f"stop_tol must be >= 0, got {self.stop_tol!r}")

    def updated(self, **changes) -> "SolverConfig":
        if "lambda" in changes:
            changes["lam"] = changes.pop("lambda")
        return replace(self, **changes)

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "score": self.score.name,
            "xi": self.xi,
            "lambda": self.lam,
            "tau": self.tau,
            "rank": int(self.rank),
            "max_iters": int(self.max_iters),
            "constraint": self.constraint.to_json(),
            "stop_tol": self.stop_tol,
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SolverConfig":
        if not isinstance(obj, dict):
            raise ConfigError("solver config must be a JSON object")
        allowed = {"variant", "score", "xi", "lambda", "tau", "rank", "max_iters",
                   "constraint", "stop_tol", "seed"}
        _reject_unknown(obj, allowed, "solver config")
        if "variant" not in obj:
            raise ConfigError("solver config: missing required key 'variant'")
        kwargs = {k: v for k, v in obj.items() if k not in ("lambda",)}
        if "lambda" in obj:
            kwargs["lam"] = obj["lambda"]
        for key in ("xi", "lam", "tau", "stop_tol"):
            if key in kwargs:
                try:
                    kwargs[key] = float(kwargs[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"{'lambda' if key == 'lam' else key}: expected a number") from None
        for key in ("rank", "max_iters", "seed"):
            if key in kwargs and not isinstance(kwargs[key], int):
                raise ConfigError(f"{key}: expected an integer, got {kwargs[key]!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SolverConfig":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj)


def lift(model: FactoredModel, variant) -> LiftedState:
    variant = SmfVariant.parse(variant)
    w, h, beta = model.w, model.h, model.beta
    if variant is SmfVariant.FEATURE:
        theta = np.vstack([beta.T @ h, w @ h])
    else:
        theta = np.hstack([w @ beta, w @ h])
    return LiftedState(theta, model.gamma.copy(), variant)


def unlift(state: LiftedState, rank: int) -> FactoredModel:
    """Recover factors from a lifted state through a rank-``rank`` SVD.

    SMF-H: ``[beta.T ; W] = U S^1/2`` and ``H = S^1/2 V^T``.
    SMF-W: ``W = U`` and ``[beta, H] = S V^T``.
    """
    theta = state.theta
    k = state.kappa
    r_eff = min(rank, *theta.shape)
    ratio = numerical_rank_ratio(theta, rank)
    if ratio > 1e-8:
        warnings.warn(f"theta has rank > {rank} (sigma_(r+1)/sigma_1 = {ratio:.2e}); "
                      "excess spectrum is truncated", RuntimeWarning, stacklevel=2)
    svd = truncated_svd(theta, r_eff, method="exact")
    u, s, vt = svd.u, svd.s, svd.vt
    if r_eff < rank:
        # pad with zero factors so the model keeps the requested rank
        pad = rank - r_eff
        u = np.hstack([u, np.zeros((u.shape[0], pad))])
        s = np.concatenate([s, np.zeros(pad)])
        vt = np.vstack([vt, np.zeros((pad, vt.shape[1]))])
    if state.variant is SmfVariant.FEATURE:
        root = np.sqrt(s)
        left = u * root
        h = root[:, None] * vt
        beta, w = left[:k].T, left[k:]
    else:
        w = u
        right = s[:, None] * vt
        beta, h = right[:, :k], right[:, k:]
    return FactoredModel(w, h, beta, state.gamma.copy())


def project_constraint(state: LiftedState, c: ConstraintSet) -> LiftedState:
    """Euclidean projection of ``(theta, gamma)`` onto the constraint set."""
    if isinstance(c, Unconstrained):
        return state
    theta, gamma = state.theta, state.gamma
    nt = np.linalg.norm(theta)
    ng = np.linalg.norm(gamma)
    if nt > c.radius_theta:
        theta = theta * (c.radius_theta / nt)
    if ng > c.radius_gamma:
        gamma = gamma * (c.radius_gamma / ng)
    return state.with_arrays(theta, gamma)


def default_init(p: int, n: int, q: int, kappa: int, rank: int, seed: int = 0,
                 high: float = 0.1) -> FactoredModel:
    """Factors with i.i.d. U[0, high] entries from a seeded generator."""
    rng = np.random.default_rng(seed)
    return FactoredModel(
        w=rng.uniform(0.0, high, (p, rank)),
        h=rng.uniform(0.0, high, (rank, n)),
        beta=rng.uniform(0.0, high, (rank, kappa)),
        gamma=rng.uniform(0.0, high, (q, kappa)),
    )
