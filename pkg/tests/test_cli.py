"""Command-line surface and file formats."""

import csv
import hashlib
import json
import os

import numpy as np
import pytest

from hegp import Dataset, FitConfig, FittedModel, fit
from hegp.cli import main
from hegp.io import load_model, save_model


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_config(path, **kw):
    cfg = FitConfig(**kw)
    cfg.to_json(path)
    return path


class TestDatasetCsv:
    def test_round_trip_with_missing_cells(self, tmp_path):
        x = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
        y = np.array([[1.5, 2.5], [0.0, 3.5], [4.5, 0.0]])
        mask = np.array([[True, True], [False, True], [True, False]])
        ds = Dataset(x, y, mask)
        path = tmp_path / "d.csv"
        ds.to_csv(path)
        back = Dataset.from_csv(path)
        np.testing.assert_array_equal(back.x, x)
        np.testing.assert_array_equal(back.mask, mask)
        np.testing.assert_array_equal(back.y[mask], y[mask])

    def test_header_required(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        from hegp import ParameterError

        with pytest.raises(ParameterError):
            Dataset.from_csv(p)


class TestSimulateCommand:
    def test_writes_outputs_and_is_deterministic(self, tmp_path, capsys):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        for out in (out1, out2):
            code = main([
                "simulate", "--scenario", "hetero-outliers", "--seed", "7",
                "--n", "40", "-o", str(out),
            ])
            assert code == 0
        assert sha(out1 / "data.csv") == sha(out2 / "data.csv")
        assert sha(out1 / "truth.json") == sha(out2 / "truth.json")

    def test_unknown_scenario_exits_one(self, capsys):
        code = main(["simulate", "--scenario", "waves", "-o", "/tmp/x"])
        assert code == 1
        assert "unknown scenario" in capsys.readouterr().err


class TestFitPredictEvaluate:
    @pytest.fixture()
    def sim_dir(self, tmp_path):
        out = tmp_path / "sim"
        assert main([
            "simulate", "--scenario", "hetero-outliers", "--seed", "3",
            "--n", "40", "-o", str(out),
        ]) == 0
        return out

    def test_fit_writes_model_and_summary(self, sim_dir, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        write_config(
            cfg_path, model_family="gaussian", d=4, r_grid=[30.0, 60.0],
            outer_iters=2, estep_iters=10, seed=0,
        )
        model_path = tmp_path / "model.json"
        code = main([
            "fit", "--data", str(sim_dir / "data.csv"),
            "--config", str(cfg_path), "-o", str(model_path),
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert "r_hat" in summary and "final_elbo" in summary
        assert model_path.exists()

    def test_invalid_config_exits_one(self, sim_dir, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text('{"model_family": "wavelet"}\n')
        code = main([
            "fit", "--data", str(sim_dir / "data.csv"),
            "--config", str(cfg_path),
        ])
        assert code == 1

    def test_missing_value_csv_fits(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        x = np.sort(rng.uniform(-2, 2, 20)).reshape(-1, 1)
        y = np.column_stack([np.sin(x.ravel()), np.cos(x.ravel())])
        y += 0.1 * rng.standard_normal(y.shape)
        mask = np.ones_like(y, dtype=bool)
        mask[::4, 0] = False
        ds = Dataset(x, y, mask)
        data_path = tmp_path / "m.csv"
        ds.to_csv(data_path)
        cfg_path = write_config(
            tmp_path / "cfg.json", model_family="gaussian", d=3,
            r_grid=[50.0], outer_iters=2, estep_iters=5,
        )
        code = main(["fit", "--data", str(data_path), "--config", str(cfg_path)])
        assert code == 0

    def test_predict_grid_and_roundtrip_bitexact(self, sim_dir, tmp_path, capsys):
        cfg_path = write_config(
            tmp_path / "cfg.json", model_family="gaussian", d=4,
            r_grid=[40.0], outer_iters=2, estep_iters=10, seed=0,
        )
        model_path = tmp_path / "model.json"
        assert main([
            "fit", "--data", str(sim_dir / "data.csv"),
            "--config", str(cfg_path), "-o", str(model_path),
        ]) == 0
        capsys.readouterr()
        out_a = tmp_path / "pred_a.csv"
        assert main([
            "predict", "--model", str(model_path), "--grid=-5:5:21",
            "-o", str(out_a),
        ]) == 0
        # reload -> save -> predict again must be bit-identical
        ds, state = load_model(model_path)
        model2 = tmp_path / "model2.json"
        save_model(model2, ds, state)
        with open(model_path) as fh:
            doc1 = json.load(fh)
        with open(model2) as fh:
            doc2 = json.load(fh)
        doc1.pop("scalers", None)
        assert doc1 == doc2
        out_b = tmp_path / "pred_b.csv"
        assert main([
            "predict", "--model", str(model2), "--grid=-5:5:21",
            "-o", str(out_b),
        ]) == 0
        assert sha(out_a) == sha(out_b)

    def test_predict_dimension_mismatch_exits_one(self, sim_dir, tmp_path, capsys):
        cfg_path = write_config(
            tmp_path / "cfg.json", model_family="gaussian", d=3,
            r_grid=[40.0], outer_iters=1, estep_iters=5,
        )
        model_path = tmp_path / "model.json"
        assert main([
            "fit", "--data", str(sim_dir / "data.csv"),
            "--config", str(cfg_path), "-o", str(model_path),
        ]) == 0
        query = tmp_path / "q.csv"
        query.write_text("x_1,x_2\n0.0,1.0\n")
        code = main([
            "predict", "--model", str(model_path), "--query", str(query)
        ])
        assert code == 1

    def test_evaluate_with_and_without_truth(self, sim_dir, tmp_path, capsys):
        cfg_path = write_config(
            tmp_path / "cfg.json", model_family="gaussian", d=4,
            r_grid=[40.0], outer_iters=2, estep_iters=10,
        )
        model_path = tmp_path / "model.json"
        assert main([
            "fit", "--data", str(sim_dir / "data.csv"),
            "--config", str(cfg_path), "-o", str(model_path),
        ]) == 0
        capsys.readouterr()
        assert main(["evaluate", "--model", str(model_path)]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["mean_kl"] is None
        assert rep["coverage_percent"] is not None
        assert main([
            "evaluate", "--model", str(model_path),
            "--truth", str(sim_dir / "truth.json"),
        ]) == 0
        rep2 = json.loads(capsys.readouterr().out)
        assert rep2["mean_kl"] is not None

    def test_evaluate_malformed_truth_exits_one(self, sim_dir, tmp_path, capsys):
        cfg_path = write_config(
            tmp_path / "cfg.json", model_family="gaussian", d=3,
            r_grid=[40.0], outer_iters=1, estep_iters=5,
        )
        model_path = tmp_path / "model.json"
        assert main([
            "fit", "--data", str(sim_dir / "data.csv"),
            "--config", str(cfg_path), "-o", str(model_path),
        ]) == 0
        bad = tmp_path / "bad_truth.json"
        bad.write_text('{"scenario": "x"}\n')
        assert main([
            "evaluate", "--model", str(model_path), "--truth", str(bad)
        ]) == 1


class TestPreprocessing:
    def test_logit_zscore_round_trip(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        n = 30
        x = np.sort(rng.uniform(0, 30, n)).reshape(-1, 1)
        p = 1 / (1 + np.exp(-(x.ravel() - 15) / 5))
        y = np.clip(p + 0.02 * rng.standard_normal(n), 1e-4, 1 - 1e-4)
        ds = Dataset(x, y.reshape(-1, 1))
        data_path = tmp_path / "prox.csv"
        ds.to_csv(data_path)
        cfg_path = write_config(
            tmp_path / "cfg.json", model_family="gaussian", d=4,
            r_grid=[40.0], outer_iters=2, estep_iters=10,
            preprocess_y="logit+zscore", preprocess_x="zscore",
        )
        model_path = tmp_path / "model.json"
        assert main([
            "fit", "--data", str(data_path), "--config", str(cfg_path),
            "-o", str(model_path),
        ]) == 0
        capsys.readouterr()
        out = tmp_path / "pred.csv"
        assert main([
            "predict", "--model", str(model_path), "--grid", "0:30:11",
            "-o", str(out),
        ]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            lo = float(row["lower95_orig_1"])
            mid = float(row["mu_orig_1"])
            hi = float(row["upper95_orig_1"])
            assert 0.0 <= lo <= mid <= hi <= 1.0


class TestModelFile:
    def test_in_memory_reload_predictions_bit_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        n = 20
        x = np.sort(rng.uniform(-2, 2, n)).reshape(-1, 1)
        y = (np.sin(x.ravel()) + 0.2 * rng.standard_normal(n)).reshape(-1, 1)
        ds = Dataset(x, y)
        cfg = FitConfig(
            model_family="outlier", sigma0=0.1, d=3, r_grid=[40.0],
            outer_iters=2, estep_iters=10, seed=0,
        )
        state = fit(ds, cfg)
        path = tmp_path / "m.json"
        save_model(path, ds, state)
        ds2, state2 = load_model(path)
        xq = np.linspace(-2, 2, 9).reshape(-1, 1)
        m1, c1 = FittedModel(ds, state).predict_target(xq, rescale=True)
        m2, c2 = FittedModel(ds2, state2).predict_target(xq, rescale=True)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(c1, c2)
