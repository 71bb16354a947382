import json

import numpy as np
import pytest

import tsrm

TINY = {
    "num_layers": 1,
    "heads": 2,
    "d_model": 8,
    "lookback": 24,
    "horizon": 12,
    "features": 2,
    "conv_specs": [{"kernel_size": 3}, {"kernel_size": 4, "dilation": 2}],
}


def test_forward_shapes():
    m = tsrm.model(TINY, seed=1)
    x = np.random.default_rng(0).normal(size=(3, 24, 2))
    assert m.forward(x).shape == (3, 12, 2)
    assert m.forward(x[0]).shape == (12, 2)
    with pytest.raises(tsrm.DimensionError):
        m.forward(np.zeros((24, 3)))


def test_config_errors_and_counts():
    cfg = dict(TINY, num_layers=13)
    with pytest.raises(tsrm.ConfigError, match=r"\[0, 12\]"):
        tsrm.model(cfg)
    assert tsrm.model(cfg, force_ranges=True).count_parameters() > 0
    m = tsrm.model(TINY)
    assert m.count_parameters() == sum(v.size for v in m.parameters().values())
    assert tsrm.model_config(m)["d_model"] == 8


def test_losses_and_masks():
    assert tsrm.forecast_loss(np.array([[1.0], [2.0]]), np.zeros((2, 1))) == pytest.approx(4.0)
    loss = tsrm.imputation_loss(np.array([[1.0], [0.5]]), np.zeros((2, 1)), np.array([[1.0], [0.0]]), 0.5)
    assert loss == pytest.approx(4.75)
    mask = tsrm.generate_mask(4, 2, 0.25, seed=3)
    assert mask.shape == (4, 2) and mask.sum() == 2
    assert np.array_equal(mask, tsrm.generate_mask(4, 2, 0.25, seed=3))
    p = tsrm.entmax15([1.0, 0.9, -10.0])
    assert p[2] == 0.0 and sum(p) == pytest.approx(1.0)
    assert tsrm.conv1d_out_len(96, 8, 4) == 9


def test_train_evaluate_explain_roundtrip(tmp_path):
    ds = tsrm.synthetic_sine(length=400, channels=2, seed=1)
    tsrm.split_and_standardize(ds)
    assert ds.values.shape == (400, 2)
    m = tsrm.model(TINY, seed=2)
    out = tsrm.train(m, ds, "forecast", max_epochs=2, batch_size=16, max_train_windows=32, max_eval_windows=16)
    assert len(out["history"]) >= 1
    rec = tsrm.evaluate(m, ds, "val", "forecast", max_windows=16)
    assert rec["mse"] == pytest.approx(out["best_val_mse"], abs=1e-9)

    x = ds.values[ds.val_end:ds.val_end + 24]
    report = tsrm.explain(m, x)
    assert report["threshold"] == 0.85
    assert len(report["features"]) == 2
    combined = np.array(report["features"][0]["combined"])
    assert combined.min() == 0.0 and combined.max() == 1.0

    path = tmp_path / "m.tsrm"
    m.save(path)
    again = tsrm.Model.load(path)
    np.testing.assert_array_equal(again.forward(x), m.forward(x))


def test_cli_entry_point(tmp_path):
    cfg = {
        "task": "forecast",
        "model": {k: v for k, v in TINY.items() if k != "features"},
        "train": {"max_epochs": 1, "max_train_windows": 16, "max_eval_windows": 8},
        "data": {"synthetic": {"length": 400, "channels": 2}},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert tsrm.run_cli(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "checkpoint.tsrm").exists()
    assert tsrm.run_cli(["count-params", "--config", str(tmp_path / "missing.json")]) == 1
