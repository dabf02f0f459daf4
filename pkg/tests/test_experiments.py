import json

import pytest

from posefree3d.experiments import angle_l1, flip_consistency, self_inversion, supervised_pose_head, train_run
from test_acceptance import js_trend

import torch


def test_angle_l1():
    assert angle_l1(torch.tensor([[0.1, 0.2]]), torch.tensor([[0.0, 0.0]])) == pytest.approx(0.15)


def test_js_trend_counts_late_rises():
    evals = [{"step": s, "js_divergence": v} for s, v in
             zip(range(100, 1100, 100), [0.9, 0.2, 0.8, 0.7, 0.72, 0.6, 0.5, 0.45, 0.4, 0.3])]
    # the early dip at step 200 is inside the first 20% and ignored
    assert js_trend(evals, 1000) == (1, 0.3)


def test_supervised_pose_head_runs(small_dataset):
    r = supervised_pose_head(small_dataset, n_train=16, n_test=8, steps=3, batch_size=4, resolution=16,
                             base_channels=8, pose_hidden=16)
    assert r["steps"] == 3 and r["n_train"] == 16
    assert 0 <= r["test_l1"] < 2


def test_supervised_pose_head_needs_enough_records(small_dataset):
    with pytest.raises(ValueError):
        supervised_pose_head(small_dataset, n_train=5000, steps=1)


def test_train_run_summary_and_follow_ups(small_dataset, small_config, tmp_path):
    cfg = small_config.replace(total_images=80, eval_every=10, checkpoint_every=10)
    summary = train_run(cfg, small_dataset, tmp_path / "run")
    assert summary["steps"] == 20 and summary["images_shown"] == 80
    assert summary["losses_finite"] and not summary["aborted"]
    assert [e["step"] for e in summary["eval"]] == [10, 20]
    json.dumps(summary)
    flip = flip_consistency(summary["checkpoint"], small_dataset, n=8)
    assert flip["flip_azimuth_sum"] >= 0
    inv = self_inversion(summary["checkpoint"], n=2, stage1_steps=2, stage2_steps=1)
    assert len(inv["samples"]) == 2 and inv["pose_l1"] >= 0


def test_rescore_updates_final_metrics(small_dataset, small_config, tmp_path):
    from posefree3d.experiments import _write, rescore

    cfg = small_config.replace(total_images=40, checkpoint_every=10)
    summary = train_run(cfg, small_dataset, tmp_path / "run", evaluate=False)
    _write(tmp_path / "run.json", summary)
    out = rescore(tmp_path, small_dataset, "run", n_depth=2)
    assert out["final"]["n_depth"] == 2
    assert json.loads((tmp_path / "run.json").read_text())["final"] == json.loads(json.dumps(out["final"]))
