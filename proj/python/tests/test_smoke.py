import math

import numpy as np
import pytest

import elnet


def test_metrics_match_numpy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.random((9, 7)) < 0.4
        b = rng.random((9, 7)) < 0.4
        inter = np.logical_and(a, b).sum()
        union = np.logical_or(a, b).sum()
        assert elnet.iou(a, b) == pytest.approx(inter / union if union else 1.0)
        assert elnet.accuracy(a, b) == pytest.approx((a == b).mean())
        bg = np.logical_and(~a, ~b).sum() / max(np.logical_or(~a, ~b).sum(), 1)
        assert elnet.miou(a, b) == pytest.approx((elnet.iou(a, b) + bg) / 2)


def test_lqe_hand_case():
    one, zero = np.ones((1, 1), np.uint8), np.zeros((1, 1), np.uint8)
    assert elnet.pixel_rmse(one, zero, zero) == pytest.approx(math.sqrt(2) / 3, abs=1e-12)
    rep = elnet.evaluate_ensemble(one, one, one)
    assert rep["q"] == pytest.approx(1.0)
    assert rep["verdict"] == "retain"
    strict = elnet.evaluate_ensemble(one, zero, zero, {"tau_q": 0.9})
    assert strict["verdict"] == "flag"


def test_perturbation_inverse():
    _, gt = elnet.gen_scene(seed=3, size=32)
    for spec in elnet.ensemble_specs(5):
        assert np.array_equal(elnet.align_prediction(elnet.apply_mask(gt, spec), spec), gt)


def test_config_errors():
    assert elnet.load_config()["train"]["batch_size"] == 12
    with pytest.raises(elnet.ConfigError):
        elnet.load_config(overrides=["loss.alpha=[0.5, 0.6, 0.1]"])
    with pytest.raises(elnet.Error):
        elnet.load_config(overrides=["train.nope=1"])


def test_pipeline_runs(tmp_path):
    manifest = elnet.gen_dataset(8, seed=1, out_dir=str(tmp_path / "data"), size=32, test_fraction=0.25)
    stats = elnet.run_pipeline(
        manifest,
        overrides=[
            "model.stage_channels=[8,16,16,16]",
            "model.adapter_bottleneck=4",
            "model.rfb_branch_channels=8",
            "model.decoder_channels=8",
            "train.epochs=3",
            "train.batch_size=4",
            "pipeline.refine_epochs=3",
            "pipeline.pretrain_epochs=1",
            "pipeline.loop_count=1",
            "pipeline.seed=4",
        ],
    )
    assert len(stats) == 2
    assert stats[1]["cumulative_retained"] >= stats[0]["cumulative_retained"]
