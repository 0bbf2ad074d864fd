"""Convergence benchmark on the semi-synthetic image data.

For each ``xi`` and each seeded repeat, both optimizers train on a freshly
drawn dataset. Per-run traces go to JSONL files; ``aggregate.csv`` holds the
mean and standard deviation of the training loss per iteration, ready to
plot. Traces that stop early are padded with their final value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from smf.bcd import bcd_train
from smf.datagen import semi_synthetic_mnist_like
from smf.lpgd import lpgd_train, write_trace_jsonl
from smf.model import ConfigError, SmfVariant, SolverConfig

logger = logging.getLogger(__name__)

OPTIMIZERS = {"lpgd": lpgd_train, "bcd": bcd_train}


@dataclass(frozen=True)
class BenchmarkProtocol:
    xis: tuple = (0.1, 1.0, 5.0, 10.0, 20.0)
    repeats: int = 10
    optimizers: tuple = ("lpgd", "bcd")
    max_iters: int = 300
    lam: float = 2.0
    tau: float = 0.01
    rank: int = 2
    variant: str = "feature"
    p: int = 784
    n: int = 500
    sigma: float = 0.5
    seed: int = 0
    decay_window: int = 50

    def __post_init__(self):
        object.__setattr__(self, "xis", tuple(float(x) for x in self.xis))
        object.__setattr__(self, "optimizers", tuple(self.optimizers))
        unknown = [o for o in self.optimizers if o not in OPTIMIZERS]
        if unknown:
            raise ConfigError(f"optimizers: unknown {unknown}; choose from {sorted(OPTIMIZERS)}")
        if not self.xis or any(x <= 0 for x in self.xis):
            raise ConfigError("xis: need at least one positive value")
        for name in ("repeats", "max_iters", "rank", "p", "n", "decay_window"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        SmfVariant.parse(self.variant)

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkProtocol":
        if not isinstance(obj, dict):
            raise ConfigError("benchmark protocol must be a JSON object")
        extra = sorted(set(obj) - set(cls.__dataclass_fields__))
        if extra:
            raise ConfigError(f"benchmark protocol: unknown keys {extra}")
        return cls(**obj)

    def to_json(self) -> dict:
        out = asdict(self)
        out["xis"], out["optimizers"] = list(self.xis), list(self.optimizers)
        return out

    def config(self, xi: float, seed: int) -> SolverConfig:
        return SolverConfig(variant=self.variant, xi=xi, lam=self.lam, tau=self.tau, rank=self.rank,
                            max_iters=self.max_iters, stop_tol=0.0, seed=seed)


def fit_decay_rate(objectives, window: int = 50, f_ref: Optional[float] = None,
                   rel_floor: float = 1e-9) -> float:
    """Per-iteration geometric decay of the loss gap ``F_t - F_ref``.

    Fits ``log(F_t - F_ref)`` linearly over ``t <= window`` and returns
    ``exp(slope)``; smaller means faster decay. ``F_ref`` defaults to the
    smallest recorded value, and gaps below ``rel_floor * |F_ref|`` are
    dropped. Returns ``nan`` with fewer than two usable points.
    """
    f = np.asarray(objectives, dtype=np.float64)
    f_ref = float(np.min(f)) if f_ref is None else f_ref
    t = np.arange(min(window + 1, f.size))
    gap = f[t] - f_ref
    keep = gap > rel_floor * max(abs(f_ref), 1.0)
    if keep.sum() < 2:
        return math.nan
    slope = np.polyfit(t[keep], np.log(gap[keep]), 1)[0]
    return float(math.exp(slope))


def iterations_to_reach(objectives, target: float, rel: float = 0.01) -> Optional[int]:
    """First iteration whose objective is within ``rel`` (relative) of ``target``."""
    f = np.asarray(objectives)
    hits = np.nonzero(f <= target + rel * abs(target))[0]
    return int(hits[0]) if hits.size else None


def _padded(values, length: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size >= length:
        return v[:length]
    return np.concatenate([v, np.full(length - v.size, v[-1])])


@dataclass
class BenchmarkSummary:
    protocol: dict
    runs: int = 0
    decay_rates: dict = field(default_factory=dict)  # optimizer -> xi -> mean rate
    final_loss: dict = field(default_factory=dict)  # optimizer -> xi -> mean final loss
    lpgd_monotone_fraction: dict = field(default_factory=dict)  # xi -> fraction of monotone runs

    def to_json(self) -> dict:
        def keyed(d):
            return {opt: {repr(k): v for k, v in inner.items()} for opt, inner in d.items()}

        return {"protocol": self.protocol, "runs": self.runs,
                "decay_rates": keyed(self.decay_rates), "final_loss": keyed(self.final_loss),
                "lpgd_monotone_fraction": {repr(k): v for k, v in self.lpgd_monotone_fraction.items()}}


def run_benchmark(proto: BenchmarkProtocol, out_dir=None) -> BenchmarkSummary:
    """Run every (xi, repeat, optimizer) combination and optionally write results."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    length = proto.max_iters
    curves = {(opt, xi): [] for opt in proto.optimizers for xi in proto.xis}
    rates = {(opt, xi): [] for opt in proto.optimizers for xi in proto.xis}
    monotone = {xi: [] for xi in proto.xis}
    summary = BenchmarkSummary(proto.to_json())
    for rep in range(proto.repeats):
        seed = proto.seed + rep
        data, _ = semi_synthetic_mnist_like(seed=seed, p=proto.p, n=proto.n, r=proto.rank,
                                            sigma=proto.sigma)
        for xi in proto.xis:
            cfg = proto.config(xi, seed)
            for opt in proto.optimizers:
                res = OPTIMIZERS[opt](data, cfg)
                summary.runs += 1
                obj = [t.objective for t in res.trace]
                curves[(opt, xi)].append(_padded(obj[1:] or obj, length))
                rates[(opt, xi)].append(fit_decay_rate(obj, proto.decay_window))
                if opt == "lpgd":
                    ok = bool(np.all(np.diff(obj) <= 1e-9 * max(1.0, abs(obj[0]))))
                    monotone[xi].append(ok)
                    if not ok:
                        logger.warning("lpgd objective not monotone (xi=%g, seed=%d)", xi, seed)
                if out is not None:
                    write_trace_jsonl(out / "traces" / f"{opt}_xi{xi:g}_rep{rep}.jsonl", res.trace)
    for opt in proto.optimizers:
        summary.decay_rates[opt] = {xi: float(np.nanmean(rates[(opt, xi)])) for xi in proto.xis}
        summary.final_loss[opt] = {xi: float(np.mean([c[-1] for c in curves[(opt, xi)]]))
                                   for xi in proto.xis}
    summary.lpgd_monotone_fraction = {xi: float(np.mean(v)) if v else math.nan
                                      for xi, v in monotone.items()}
    if out is not None:
        with (out / "aggregate.csv").open("w") as fh:
            fh.write("xi,optimizer,iter,mean_loss,std_loss\n")
            for xi in proto.xis:
                for opt in proto.optimizers:
                    arr = np.vstack(curves[(opt, xi)])
                    mean, std = arr.mean(axis=0), arr.std(axis=0)
                    for i in range(length):
                        fh.write(f"{xi!r},{opt},{i + 1},{mean[i]!r},{std[i]!r}\n")
    return summary
