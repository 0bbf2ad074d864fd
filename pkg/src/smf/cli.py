"""Batch command-line interface.

Subcommands: ``synth``, ``train``, ``predict``, ``diagnose``, ``cv`` and
``benchmark``. Exit codes: 0 success, 2 invalid configuration, 3 I/O
failure, 4 numerical failure. Output directories are assembled in a
temporary sibling and moved into place only when the command succeeds.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from smf.bcd import bcd_train
from smf.benchmark import BenchmarkProtocol, run_benchmark
from smf.datagen import GenerativeSpec, condition_diagnostics, generate, semi_synthetic_mnist_like
from smf.evaluate import (
    InnerSolverError,
    accuracy,
    config_grid,
    cross_validate,
    normalize_rows,
    predict_feature_full,
    predict_feature_heuristic,
    predict_filter,
    supervised_factor_report,
)
from smf.io import (
    DataIOError,
    atomic_output_dir,
    read_dataset,
    read_json,
    read_matrix,
    read_model,
    read_reference,
    write_dataset,
    write_json,
    write_model,
    write_truth,
)
from smf.linalg import LinalgError, write_csv_matrix
from smf.lpgd import DivergenceError, lpgd_train, write_trace_jsonl
from smf.model import ConfigError, Dataset, SmfVariant, SolverConfig
from smf.objective import ScoreDomainError

logger = logging.getLogger("smf")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 2, 3, 4


def _load_config(path, seed=None) -> SolverConfig:
    cfg = SolverConfig.from_json(read_json(path))
    return cfg.updated(seed=seed) if seed is not None else cfg


def _maybe_normalize(data: Dataset, flag: bool) -> Dataset:
    if not flag:
        return data
    return Dataset(normalize_rows(data.x_data), data.x_aux, data.labels, data.kappa)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    obj = read_json(args.config)
    if args.seed is not None:
        obj = {**obj, "seed": args.seed}
    kind = obj.pop("kind", "generative")
    with atomic_output_dir(args.out) as tmp:
        if kind == "generative":
            spec = GenerativeSpec.from_json(obj)
            data, truth = generate(spec)
            write_dataset(tmp, data)
            write_truth(tmp / "truth", truth, spec.to_json())
        elif kind == "semi_synthetic":
            allowed = {"seed", "p", "n", "r", "sigma"}
            extra = sorted(set(obj) - allowed)
            if extra:
                raise ConfigError(f"semi-synthetic spec: unknown keys {extra}")
            data, truth = semi_synthetic_mnist_like(**obj)
            write_dataset(tmp, data)
            (tmp / "truth").mkdir()
            write_csv_matrix(tmp / "truth" / "w_x.csv", truth.w_x)
            write_csv_matrix(tmp / "truth" / "w_y.csv", truth.w_y)
            write_csv_matrix(tmp / "truth" / "h_true.csv", truth.h_true)
            write_json(tmp / "truth" / "manifest.json", {"kind": kind, "spec": obj,
                                                        "beta_y": truth.beta_y.tolist()})
        else:
            raise ConfigError(f"kind: unknown dataset kind {kind!r}")
    logger.info("wrote dataset to %s", args.out)
    return 0


def cmd_train(args) -> int:
    data = _maybe_normalize(read_dataset(args.data), args.normalize_rows)
    cfg = _load_config(args.config, args.seed)
    ref = read_reference(args.ref) if args.ref else None
    if ref is not None and ref.variant is not cfg.variant:
        raise ConfigError(f"reference is {ref.variant.value} but config is {cfg.variant.value}")
    trainer = {"lpgd": lpgd_train, "bcd": bcd_train}[args.optimizer]
    res = trainer(data, cfg, ref=ref)
    diag = condition_diagnostics(data, cfg, state=ref if ref is not None else None)
    summary = {
        "optimizer": args.optimizer,
        "final_objective": res.final_objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "stop_reason": res.stop_reason,
        "rho_estimate": res.rho_estimate,
        "final_grad_map_norm": res.trace[-1].grad_map_norm,
        "final_dist_to_ref": res.trace[-1].dist_to_ref,
        "elapsed_seconds": res.trace[-1].elapsed_seconds,
        "diagnostics": diag.to_json(),
    }
    with atomic_output_dir(args.out) as tmp:
        write_model(tmp, res.final_model)
        write_json(tmp / "config.json", cfg.to_json())
        write_trace_jsonl(tmp / "trace.jsonl", res.trace)
        write_json(tmp / "summary.json", summary)
        write_json(tmp / "factors.json", supervised_factor_report(res.final_model))
    logger.info("final objective %.6g after %d iterations", res.final_objective, res.iterations)
    return 0


def _read_features(data_dir: Path, normalize: bool):
    x = read_matrix(data_dir / "x_data.csv")
    if normalize:
        x = normalize_rows(x)
    aux_path = data_dir / "x_aux.csv"
    aux = read_matrix(aux_path) if aux_path.exists() else np.zeros((0, x.shape[1]))
    labels_path = data_dir / "labels.csv"
    labels = read_matrix(labels_path).ravel().astype(np.int64) if labels_path.exists() else None
    return x, aux, labels


def cmd_predict(args) -> int:
    model_dir = Path(args.model)
    cfg = SolverConfig.from_json(read_json(model_dir / "config.json"))
    model = read_model(model_dir)
    x, aux, labels = _read_features(Path(args.data), args.normalize_rows)
    if aux.shape[0] != model.gamma.shape[0]:
        raise ConfigError(f"model expects {model.gamma.shape[0]} auxiliary features, data has {aux.shape[0]}")
    if cfg.variant is SmfVariant.FILTER:
        pred, probs = predict_filter(model, x, aux, cfg.score)
    elif args.method == "full":
        pred, probs, _ = predict_feature_full(model, x, aux, cfg.score, xi=cfg.xi)
    else:
        pred, probs = predict_feature_heuristic(model, x, aux, cfg.score)
    with atomic_output_dir(args.out) as tmp:
        with (tmp / "predictions.csv").open("w") as fh:
            fh.write("sample,label," + ",".join(f"p{c}" for c in range(probs.shape[1])) + "\n")
            for s in range(pred.shape[0]):
                fh.write(f"{s},{int(pred[s])}," + ",".join(repr(float(v)) for v in probs[s]) + "\n")
        metrics = {"n": int(pred.shape[0]), "method": args.method if cfg.variant is SmfVariant.FEATURE
                   else "filter"}
        if labels is not None:
            metrics["accuracy"] = accuracy(labels, pred)
        write_json(tmp / "metrics.json", metrics)
    return 0


def cmd_diagnose(args) -> int:
    data = _maybe_normalize(read_dataset(args.data), args.normalize_rows)
    cfg = _load_config(args.config, args.seed)
    ref = read_reference(args.ref) if args.ref else None
    diag = condition_diagnostics(data, cfg, m_bound=args.m_bound, state=ref)
    report = diag.to_json()
    sv = np.linalg.svd(data.x_data, compute_uv=False)
    if args.out:
        with atomic_output_dir(args.out) as tmp:
            write_json(tmp / "diagnostics.json", report)
            write_csv_matrix(tmp / "singular_values.csv", sv.reshape(-1, 1))
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return 0


def cmd_cv(args) -> int:
    data = _maybe_normalize(read_dataset(args.data), args.normalize_rows)
    base = _load_config(args.config, args.seed)
    grid = config_grid(base, args.xis, args.lams)
    res = cross_validate(data, grid, folds=args.folds, seed=base.seed, optimizer=args.optimizer,
                         auto_tau=args.auto_tau)
    with atomic_output_dir(args.out) as tmp:
        res.write_csv(tmp / "cv.csv")
        rows = [{"config": i, "xi": c.xi, "lambda": c.lam, "mean_accuracy": float(res.mean[i]),
                 "std_accuracy": float(res.std[i])} for i, c in enumerate(grid)]
        write_json(tmp / "cv_summary.json", {"folds": args.folds, "configs": rows,
                                             "best": res.best()})
    return 0


def cmd_benchmark(args) -> int:
    proto = BenchmarkProtocol.from_json(read_json(args.config)) if args.config else BenchmarkProtocol()
    if args.seed is not None:
        proto = BenchmarkProtocol.from_json({**proto.to_json(), "seed": args.seed})
    with atomic_output_dir(args.out) as tmp:
        summary = run_benchmark(proto, tmp)
        write_json(tmp / "summary.json", summary.to_json())
    return 0


# ----------------------------------------------------------------------------
# wiring
# ----------------------------------------------------------------------------

def _floats(text: str):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/LAPACK threads (default: library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True, out=True):
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if config:
            p.add_argument("--config", required=True, help="JSON configuration file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")

    p = sub.add_parser("synth", help="draw a synthetic dataset with ground truth")
    common(p, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--optimizer", choices=("lpgd", "bcd"), default="lpgd")
    p.add_argument("--ref", default=None, help="ground-truth manifest for distance tracking")
    p.add_argument("--normalize-rows", action="store_true", help="standardize each feature row")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict labels with a trained model")
    p.add_argument("--model", required=True, help="model directory written by 'train'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("heuristic", "full"), default="heuristic",
                   help="test-time coding for the feature variant")
    p.add_argument("--normalize-rows", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diagnose", help="conditioning constants and singular values")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ref", default=None)
    p.add_argument("--m-bound", type=float, default=None, help="activation bound M")
    p.add_argument("--normalize-rows", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("cv", help="cross-validate over a (xi, lambda) grid")
    common(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--xis", type=_floats, default=(0.1, 1.0, 10.0))
    p.add_argument("--lams", type=_floats, default=(0.1, 1.0, 10.0))
    p.add_argument("--optimizer", choices=("lpgd", "bcd"), default="lpgd")
    p.add_argument("--auto-tau", action="store_true", help="use tau = 1/L per configuration")
    p.add_argument("--normalize-rows", action="store_true")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("benchmark", help="optimizer comparison on semi-synthetic data")
    p.add_argument("--config", default=None, help="benchmark protocol JSON (default protocol if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = contextlib.nullcontext()
    try:
        with limiter:
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, LinalgError, InnerSolverError, ScoreDomainError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
