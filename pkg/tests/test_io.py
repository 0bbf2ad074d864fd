import numpy as np
import pytest

from conftest import random_dataset, random_model
from smf.datagen import GenerativeSpec, generate
from smf.io import (
    DataIOError,
    atomic_output_dir,
    read_dataset,
    read_json,
    read_matrix,
    read_model,
    read_reference,
    write_dataset,
    write_model,
    write_truth,
)
from smf.model import ConfigError


def test_dataset_roundtrip(tmp_path):
    data = random_dataset(q=2)
    write_dataset(tmp_path / "d", data)
    again = read_dataset(tmp_path / "d")
    np.testing.assert_array_equal(again.x_data, data.x_data)
    np.testing.assert_array_equal(again.x_aux, data.x_aux)
    np.testing.assert_array_equal(again.labels, data.labels)
    assert again.kappa == data.kappa


def test_dataset_without_aux(tmp_path):
    data = random_dataset(q=0)
    write_dataset(tmp_path / "d", data)
    assert not (tmp_path / "d" / "x_aux.csv").exists()
    assert read_dataset(tmp_path / "d").q == 0


def test_missing_inputs(tmp_path):
    with pytest.raises(DataIOError):
        read_dataset(tmp_path / "nope")
    with pytest.raises(DataIOError):
        read_matrix(tmp_path / "nope.csv")
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    with pytest.raises(DataIOError):
        read_matrix(tmp_path / "bad.csv")


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        read_json(tmp_path / "c.json")


def test_truth_manifest_roundtrip(tmp_path, variant):
    spec = GenerativeSpec(p=5, q=2, n=6, r=2, kappa=2, variant=variant)
    _, truth = generate(spec)
    write_truth(tmp_path / "t", truth, spec.to_json())
    ref = read_reference(tmp_path / "t" / "manifest.json")
    np.testing.assert_array_equal(ref.theta, truth.z_star.theta)
    np.testing.assert_array_equal(ref.gamma, truth.z_star.gamma)
    assert ref.variant is truth.z_star.variant
    assert read_reference(tmp_path / "t").theta.shape == ref.theta.shape


def test_truth_without_aux(tmp_path):
    spec = GenerativeSpec(p=5, q=0, n=6, r=2, kappa=3, variant="feature")
    _, truth = generate(spec)
    write_truth(tmp_path / "t", truth, spec.to_json())
    assert read_reference(tmp_path / "t").gamma.shape == (0, 3)


def test_model_roundtrip(tmp_path):
    m = random_model(5, 4, 0, 2, 3)
    write_model(tmp_path / "m", m)
    again = read_model(tmp_path / "m")
    np.testing.assert_array_equal(again.w, m.w)
    np.testing.assert_array_equal(again.beta, m.beta)
    assert again.gamma.shape == (0, 2)


class TestAtomicOutput:
    def test_success_moves_into_place(self, tmp_path):
        with atomic_output_dir(tmp_path / "out") as tmp:
            (tmp / "a.txt").write_text("x")
            assert not (tmp_path / "out").exists()
        assert (tmp_path / "out" / "a.txt").read_text() == "x"

    def test_failure_leaves_nothing(self, tmp_path):
        with pytest.raises(RuntimeError):
            with atomic_output_dir(tmp_path / "out") as tmp:
                (tmp / "a.txt").write_text("x")
                raise RuntimeError("boom")
        assert list(tmp_path.iterdir()) == []

    def test_replaces_existing(self, tmp_path):
        (tmp_path / "out").mkdir()
        (tmp_path / "out" / "old.txt").write_text("old")
        with atomic_output_dir(tmp_path / "out") as tmp:
            (tmp / "new.txt").write_text("new")
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["new.txt"]
        assert [p.name for p in tmp_path.iterdir()] == ["out"]
