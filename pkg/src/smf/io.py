"""On-disk formats: dataset directories, ground-truth manifests and trained models.

A dataset directory holds ``x_data.csv`` (p x n), ``labels.csv`` (one
label per line), ``dataset.json`` with ``kappa`` and optionally
``x_aux.csv`` (q x n). A model directory holds ``w.csv``, ``h.csv``,
``beta.csv``, ``gamma.csv`` and a JSON config.
"""

from __future__ import annotations

import contextlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from smf.linalg import LinalgError, read_csv_matrix, write_csv_matrix
from smf.model import ConfigError, Dataset, FactoredModel, LiftedState, SmfVariant


class DataIOError(OSError):
    """Missing or malformed input files."""


def read_matrix(path) -> np.ndarray:
    """Read a CSV matrix, reporting missing or malformed files as :class:`DataIOError`."""
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"missing file: {path}")
    try:
        return read_csv_matrix(path)
    except LinalgError as exc:
        raise DataIOError(str(exc)) from None


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"missing file: {path}")
    with path.open() as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def write_dataset(out_dir, data: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv_matrix(out / "x_data.csv", data.x_data)
    if data.q:
        write_csv_matrix(out / "x_aux.csv", data.x_aux)
    with (out / "labels.csv").open("w") as fh:
        fh.writelines(f"{int(v)}\n" for v in data.labels)
    write_json(out / "dataset.json", {"kappa": data.kappa, "p": data.p, "q": data.q, "n": data.n})


def read_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataIOError(f"data directory not found: {d}")
    x = read_matrix(d / "x_data.csv")
    labels = read_matrix(d / "labels.csv").ravel()
    aux = read_matrix(d / "x_aux.csv") if (d / "x_aux.csv").exists() else np.zeros((0, x.shape[1]))
    meta = read_json(d / "dataset.json") if (d / "dataset.json").exists() else {}
    kappa = int(meta.get("kappa", int(labels.max()) if labels.size else 1))
    return Dataset(x, aux, labels, max(kappa, 1))


def write_truth(out_dir, truth, spec_json: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"theta": "theta_star.csv", "gamma": "gamma_star.csv", "a": "a_star.csv",
             "b": "b_star.csv", "c": "c_star.csv"}
    write_csv_matrix(out / files["theta"], truth.z_star.theta)
    write_csv_matrix(out / files["gamma"], truth.z_star.gamma)
    write_csv_matrix(out / files["a"], truth.a_star)
    write_csv_matrix(out / files["b"], truth.b_star)
    write_csv_matrix(out / files["c"], truth.c_star)
    write_json(out / "manifest.json", {
        "variant": truth.z_star.variant.value,
        "kappa": truth.z_star.kappa,
        "files": files,
        "spec": spec_json,
    })


def read_reference(manifest_path) -> LiftedState:
    """Lifted reference point from a ground-truth manifest or a trained model directory."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    man = read_json(path)
    base = path.parent
    try:
        files = man["files"]
        theta = read_matrix(base / files["theta"])
        gamma = read_matrix(base / files["gamma"])
        variant = SmfVariant.parse(man["variant"])
    except KeyError as exc:
        raise ConfigError(f"{path}: manifest missing key {exc.args[0]!r}") from None
    if gamma.size == 0:
        gamma = np.zeros((0, int(man.get("kappa", 1))))
    return LiftedState(theta, gamma, variant)


def write_model(out_dir, model: FactoredModel) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("w", "h", "beta", "gamma"):
        write_csv_matrix(out / f"{name}.csv", getattr(model, name))


def read_model(model_dir, kappa: int | None = None) -> FactoredModel:
    d = Path(model_dir)
    w, h, beta = read_matrix(d / "w.csv"), read_matrix(d / "h.csv"), read_matrix(d / "beta.csv")
    gamma = read_matrix(d / "gamma.csv")
    if gamma.size == 0:
        gamma = np.zeros((0, beta.shape[1] if kappa is None else kappa))
    return FactoredModel(w, h, beta, gamma)


@contextlib.contextmanager
def atomic_output_dir(out_dir):
    """Yield a temporary sibling directory that replaces ``out_dir`` only on success."""
    final = Path(out_dir).resolve()
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        backup = Path(tempfile.mkdtemp(prefix=f".{final.name}.old.", dir=final.parent))
        os.replace(final, backup / "old")
        os.replace(tmp, final)
        shutil.rmtree(backup, ignore_errors=True)
    else:
        os.replace(tmp, final)
