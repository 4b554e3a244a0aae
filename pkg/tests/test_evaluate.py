import csv
import hashlib
import json
from fractions import Fraction

import numpy as np
import pytest

from mug.config import config_to_dict
from mug.errors import ContractError
from mug.evaluate import (
    ProbeParams,
    classify,
    evaluate_variants,
    fit_linear_probe,
    knn_baseline,
    knn_predict,
    run_experiment,
)
from mug.fusion import MUGModel
from mug.tsdata import Dataset, TimeSeries, make_synthetic, save_dataset


def blobs(n=40, seed=0):
    g = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    centers = np.array([[-3.0, -3.0], [3.0, 3.0]])
    # radius-1 disks around centres 6*sqrt(2) apart cannot overlap
    r = np.sqrt(g.uniform(0, 1, n))[:, None]
    ang = g.uniform(0, 2 * np.pi, n)
    return centers[labels] + r * np.stack([np.cos(ang), np.sin(ang)], axis=1), labels


class TestProbe:
    def test_separable_blobs(self):
        x, y = blobs()
        probe = fit_linear_probe(x, y, 2, seed=0)
        assert np.mean(classify(probe, x).argmax(axis=1) == y) == 1.0

    def test_seeded(self):
        x, y = blobs()
        a, b = fit_linear_probe(x, y, 2, seed=3), fit_linear_probe(x, y, 2, seed=3)
        assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()

    def test_zero_dim(self):
        with pytest.raises(ContractError):
            fit_linear_probe(np.zeros((4, 0)), np.array([0, 1, 0, 1]), 2)

    def test_absent_class(self):
        with pytest.raises(ContractError, match="do not occur"):
            fit_linear_probe(np.ones((4, 2)), np.array([0, 0, 2, 2]), 3)

    def test_too_few_examples(self):
        with pytest.raises(ContractError):
            fit_linear_probe(np.ones((2, 2)), np.array([0, 1]), 3)

    def test_agrees_with_nearest_neighbour_on_blobs(self):
        x, y = blobs(seed=1)
        probe = fit_linear_probe(x, y, 2, seed=0)
        xt, _ = blobs(n=30, seed=2)
        nn = y[np.argmin(((xt[:, None] - x[None]) ** 2).sum(-1), axis=1)]
        np.testing.assert_array_equal(classify(probe, xt).argmax(axis=1), nn)


class TestClassify:
    def test_zero_probe_is_uniform(self):
        probe = ProbeParams(np.zeros((3, 4)), np.zeros(4))
        np.testing.assert_allclose(classify(probe, np.ones(3)), np.full(4, 0.25), atol=1e-15)

    def test_sums_to_one(self, rng):
        probe = ProbeParams(rng.normal(size=(5, 3)) * 10, rng.normal(size=3))
        np.testing.assert_allclose(classify(probe, rng.normal(size=(20, 5))).sum(axis=1), 1.0, atol=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            classify(ProbeParams(np.zeros((3, 2)), np.zeros(2)), np.ones(4))


def two_class_synth(n, seed):
    return make_synthetic(["sine", "square"], n=n, length=32, seed=seed)


class TestKnn:
    def test_self_is_nearest(self):
        ds = two_class_synth(12, 0)
        assert knn_baseline(ds, ds) == 1.0

    def test_single_train_example(self):
        train = Dataset([TimeSeries(np.arange(5.0), 1)], ["a", "b"])
        test = two_class_synth(6, 1)
        test = Dataset([TimeSeries(s.values[:5], s.label) for s in test], ["a", "b"])
        assert knn_predict(train, test).tolist() == [1] * 6

    def test_brute_force_oracle(self):
        train, test = two_class_synth(20, 2), two_class_synth(20, 3)

        def z(v):
            v = v[:, 0]
            return (v - v.mean()) / v.std()

        preds = []
        for s in test:
            best, best_d = None, None
            for k, t in enumerate(train):
                d = sum((a - b) ** 2 for a, b in zip(z(s.values), z(t.values)))
                if best_d is None or d < best_d:
                    best, best_d = k, d
            preds.append(train.series[best].label)
        assert knn_predict(train, test).tolist() == preds

    def test_tie_goes_to_lowest_index(self):
        v = np.array([0.0, 1.0, 0.0, -1.0])
        train = Dataset([TimeSeries(v, 1), TimeSeries(v, 0)], ["a", "b"])
        assert knn_predict(train, Dataset([TimeSeries(v, 0)], ["a", "b"])).tolist() == [1]

    def test_length_mismatch(self):
        a = Dataset([TimeSeries(np.arange(4.0), 0)], ["a"])
        b = Dataset([TimeSeries(np.arange(5.0), 0)], ["a"])
        with pytest.raises(ContractError):
            knn_predict(a, b)


TINY = {
    "fine": {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 12, "dropout": 0.0},
    "sax": {"alphabet_size": 4, "word_length": 3, "embed_dim": 6},
    "fusion": {"d_ff": 10},
    "segments": 2,
    "train": {"batch_size": 8, "epochs": 1, "lr": 1e-3},
}


def tiny_spec(variants=("multi",), **extra):
    return {
        "name": "tiny",
        "seed": 1,
        "variants": list(variants),
        "config": TINY,
        "datasets": [{"name": "synthetic", "synthetic": {"n_train": 12, "n_test": 9, "length": 24}, **extra}],
    }


class TestExperiment:
    def test_one_entry_per_dataset(self):
        report = run_experiment(tiny_spec())
        assert len(report.datasets) == 1
        assert list(report.datasets[0].accuracy) == ["multi"]

    def test_deterministic_modulo_wall_clock(self):
        spec = tiny_spec(("multi", "fine", "coarse", "knn"), corrupt={"seed": 2})
        a, b = run_experiment(spec).to_dict(), run_experiment(spec).to_dict()
        for d in a["datasets"] + b["datasets"]:
            d.pop("wall_clock_s")
        assert a == b

    def test_accuracy_is_exact_fraction(self):
        report = run_experiment(tiny_spec(("multi", "coarse", "knn")))
        for v in report.datasets[0].variants.values():
            assert v.total == 9
            assert v.accuracy == float(Fraction(v.correct, v.total))
            assert 0.0 <= v.accuracy <= 1.0

    def test_csv_and_json_agree(self, tmp_path):
        run_experiment(tiny_spec(("multi", "fine", "knn")), out_dir=tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        by_variant = data["datasets"][0]["accuracy"]
        assert {r["variant"] for r in rows} == set(by_variant)
        for r in rows:
            j = by_variant[r["variant"]]
            assert float(r["accuracy"]) == j["accuracy"]
            assert int(r["correct"]) == j["correct"] and int(r["total"]) == j["total"]
            assert r["config_digest"] == data["datasets"][0]["config_digest"]

    def test_missing_file_named(self, tmp_path):
        spec = {"name": "x", "datasets": [{"name": "gone", "train": str(tmp_path / "nope.csv"), "test": "t.csv"}]}
        with pytest.raises(FileNotFoundError, match="nope.csv"):
            run_experiment(spec)

    def test_file_datasets(self, tmp_path):
        save_dataset(make_synthetic(n=12, length=24, seed=1), tmp_path / "tr.csv")
        save_dataset(make_synthetic(n=9, length=24, seed=2), tmp_path / "te.csv")
        spec = dict(tiny_spec(("knn",)), datasets=[{"name": "f", "train": "tr.csv", "test": "te.csv"}])
        (tmp_path / "spec.json").write_text(json.dumps(spec))
        report = run_experiment(tmp_path / "spec.json")
        assert report.datasets[0].variants["knn"].total == 9


def digest(model):
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def test_probe_leaves_model_frozen(tiny_config):
    model = MUGModel(tiny_config, seed=0)
    before = digest(model)
    train, test = make_synthetic(n=12, length=24, seed=1), make_synthetic(n=9, length=24, seed=2)
    evaluate_variants(model, train, test, ("multi", "fine", "coarse"))
    assert digest(model) == before
    assert all(t.grad is None for _, t in model.named_parameters())
    assert config_to_dict(model.config)["segments"] == 2
