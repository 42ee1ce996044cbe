import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtbev.ablation import SUITES, AblationSettings, AblationTable, delta_mtl, run_ablation
from mtbev.cli import main
from mtbev.config import ConfigError, RunConfig, SceneSpec, dump_config, load_config
from mtbev.metrics import IoUAccumulator, MetricsRecord, average_precision, detection_map, greedy_match
from mtbev.scene_synth import build_dataset
from mtbev.train import (batch_order, evaluate, load_checkpoint, read_log, save_checkpoint, score_predictions,
                         train)

SMALL = SceneSpec(extent_m=4.0, grid_h=16, grid_w=16, grid_z=4, out_h=32, out_w=32, out_z=16, channels=16)


def small_cfg(tmp_path, variant="transformer", steps=4, **train_kw) -> RunConfig:
    cfg = RunConfig(scene=SMALL)
    cfg.decoder.variant = variant
    cfg.model.n_det_queries = 8
    kw = dict(steps=steps, n_scenes=2, batch_size=2, eval_every=2, ckpt_every=2, log_every=1,
              out_dir=str(tmp_path))
    cfg.train = dataclasses.replace(cfg.train, **{**kw, **train_kw})
    cfg.validate()
    return cfg


# config ------------------------------------------------------------------------

def test_default_config_values():
    cfg = RunConfig()
    assert cfg.optim.lr == 8e-4 and cfg.optim.weight_decay == 0.01
    assert cfg.model.n_det_queries == 32 and cfg.model.seg_blocks == 4
    assert cfg.decoder.variant == "transformer"


@pytest.mark.parametrize("override", ["model.tasks=[]", "decoder.variant=rnn", "train.batch_size=0",
                                      "model.seg_blocks=100", "optim.lr=0", "nosuch.key=1", "model.nosuch=1",
                                      "model"])
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_config_file_round_trip(tmp_path):
    cfg = load_config(None, ["decoder.variant=mamba", "model.tasks=[det, occ]", "train.seed=3"])
    assert cfg.decoder.variant == "mamba" and cfg.model.tasks == ("det", "occ") and cfg.train.seed == 3
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    assert load_config(path) == cfg
    assert load_config(path, ["train.seed=9"]).train.seed == 9


# metrics -----------------------------------------------------------------------

def _perfect_det(gts):
    return [{"xy": g[:, :2], "scores": np.ones(len(g)), "labels": g[:, 6].astype(int)} for g in gts]


def test_map_perfect_and_empty():
    gts = [np.array([[1.0, 1.0, 2, 1, 0, 1, 0], [-3.0, 2.0, 2, 1, 0, 1, 2]]), np.array([[0.0, 0.0, 2, 1, 0, 1, 2]])]
    assert detection_map(_perfect_det(gts), gts, 4)["mAP"] == 1.0
    empty = [{"xy": np.zeros((0, 2)), "scores": np.zeros(0), "labels": np.zeros(0, int)}] * 2
    assert detection_map(empty, gts, 4)["mAP"] == 0.0


def test_map_offset_example():
    gts = [np.array([[1.0, 1.0, 2, 1, 0, 1, 0]])]
    preds = [{"xy": np.array([[1.7, 1.0]]), "scores": np.array([0.9]), "labels": np.array([0])}]
    res = detection_map(preds, gts, 1)
    assert res["AP/0"] == pytest.approx(2 / 3) and res["mAP"] == pytest.approx(2 / 3)


def test_greedy_match_and_ap():
    tp = greedy_match(np.array([[0, 0], [0.1, 0], [5, 5]]), np.array([0.5, 0.9, 0.8]), np.array([[0.0, 0.0]]), 1.0)
    # highest score claims the box; the duplicate becomes a false positive
    assert tp.tolist() == [True, False, False]
    assert average_precision(np.array([True, False, True]), 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision(np.zeros(0, bool), 3) == 0.0


def test_random_predictions_have_low_map():
    items = build_dataset(SceneSpec(), 4, seed=3)
    rng = np.random.default_rng(0)
    preds = [{"xy": rng.uniform(-8, 8, (32, 2)), "scores": rng.random(32), "labels": rng.integers(0, 4, 32)}
             for _ in items]
    assert detection_map(preds, [t.boxes for _, _, t in items], 4)["mAP"] < 0.2


def test_iou_perfect_and_absent_class():
    acc = IoUAccumulator(3)
    labels = np.array([[0, 1], [3, 3]])
    acc.add_labels(labels, labels)
    iou = acc.per_class()
    assert iou[0] == iou[1] == 1.0 and math.isnan(iou[2]) and acc.mean() == 1.0
    seg = IoUAccumulator(2)
    m = np.zeros((4, 4, 2), bool)
    m[:2, :, 0] = True
    seg.add_binary(m, m)
    p = m.copy()
    p[0, 0, 0] = False
    seg.add_binary(p, m)
    assert seg.per_class()[0] == pytest.approx(15 / 16)


def test_score_predictions_on_ground_truth_is_perfect():
    items = build_dataset(SMALL, 2, seed=1)
    preds = [{"det": {"xy": t.boxes[:, :2], "scores": np.ones(len(t.boxes)), "labels": t.boxes[:, 6].astype(int)},
              "seg": t.seg_grid, "occ": t.occ_labels} for _, _, t in items]
    m = score_predictions(preds, items, SMALL)
    assert m["det/mAP"] == 1.0 and m["seg/mIoU"] == 1.0 and m["occ/mIoU"] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_bounded(seed):
    rng = np.random.default_rng(seed)
    gts = [np.column_stack([rng.uniform(-8, 8, (3, 2)), np.ones((3, 4)), rng.integers(0, 4, 3)])]
    preds = [{"xy": rng.uniform(-8, 8, (6, 2)), "scores": rng.random(6), "labels": rng.integers(0, 4, 6)}]
    for v in detection_map(preds, gts, 4).values():
        assert 0.0 <= v <= 1.0
    acc = IoUAccumulator(4)
    acc.add_labels(rng.integers(0, 5, 50), rng.integers(0, 5, 50))
    assert 0.0 <= acc.mean() <= 1.0


def test_metrics_record_validation():
    rec = MetricsRecord(3, {"total": 1.5}, {"det/mAP": 0.5})
    assert MetricsRecord.from_json(rec.to_json()) == rec
    with pytest.raises(FloatingPointError):
        MetricsRecord(0, {"total": float("nan")}, {})
    with pytest.raises(ValueError):
        MetricsRecord(0, {}, {"seg/mIoU": 1.5})


# training ----------------------------------------------------------------------

def test_batch_order_is_fixed():
    assert batch_order(5, 2, 6, 1) == batch_order(5, 2, 6, 1)
    flat = sum(batch_order(4, 2, 4, 0), [])
    assert sorted(flat[:4]) == [0, 1, 2, 3] and sorted(flat[4:]) == [0, 1, 2, 3]


def test_zero_steps_emits_initial_checkpoint_only(tmp_path):
    res = train(small_cfg(tmp_path, steps=0))
    assert sorted(p.name for p in tmp_path.glob("*.pt")) == ["ckpt_000000.pt", "last.pt"]
    assert load_checkpoint(res["checkpoint"])[1] == 0
    recs = read_log(res["log"])
    assert len(recs) == 1 and recs[0].step == 0 and recs[0].losses == {}


@pytest.mark.parametrize("variant", ["transformer", "mamba"])
def test_identical_runs_are_bitwise_identical(tmp_path, variant):
    a = train(small_cfg(tmp_path / "a", variant))
    b = train(small_cfg(tmp_path / "b", variant))
    assert a["log"].read_bytes() == b["log"].read_bytes()
    sa, sb = torch.load(a["checkpoint"])["state_dict"], torch.load(b["checkpoint"])["state_dict"]
    assert sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def test_log_is_self_describing(tmp_path):
    res = train(small_cfg(tmp_path))
    lines = res["log"].read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3, 4]
    recs = read_log(res["log"])
    assert recs[1].metrics and not recs[0].metrics and "total" in recs[0].losses
    assert {"ckpt_000000.pt", "ckpt_000002.pt", "ckpt_000004.pt", "last.pt"} == {p.name for p in tmp_path.glob("*.pt")}


def test_checkpoint_round_trip_reproduces_metrics(tmp_path):
    res = train(small_cfg(tmp_path))
    items = build_dataset(SMALL, 2, seed=5)
    direct = evaluate(res["model"], items).metrics
    via_file = evaluate(res["checkpoint"], items, spec=SMALL).metrics
    assert direct == via_file
    model, step = load_checkpoint(res["checkpoint"])
    save_checkpoint(tmp_path / "again.pt", model, step)
    assert evaluate(tmp_path / "again.pt", items).metrics == direct


def test_evaluate_rejects_incompatible_spec(tmp_path):
    res = train(small_cfg(tmp_path, steps=0))
    with pytest.raises(ConfigError):
        evaluate(res["checkpoint"], build_dataset(SceneSpec(), 1), spec=SceneSpec())


def test_non_finite_loss_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    from mtbev import model as model_mod
    cfg = small_cfg(tmp_path, steps=4)
    real = model_mod.MultiTaskNet.compute_losses
    calls = {"n": 0}

    def poisoned(self, out, batch):
        parts = real(self, out, batch)
        calls["n"] += 1
        if calls["n"] == 3:
            parts["total"] = parts["total"] * float("nan")
        return parts

    monkeypatch.setattr(model_mod.MultiTaskNet, "compute_losses", poisoned)
    with pytest.raises(FloatingPointError):
        train(cfg)
    assert load_checkpoint(tmp_path / "last.pt")[1] == 2


def test_staged_mode_trains_without_occupancy_first(tmp_path):
    res = train(small_cfg(tmp_path, staged_fraction=0.5))
    recs = read_log(res["log"])
    assert recs[0].losses["occ"] == 0.0 and recs[-1].losses["occ"] > 0.0


@pytest.mark.slow
def test_single_sample_overfit(tmp_path):
    """One scene, 500 steps: total loss drops by >= 90% from step 10 to the end."""
    cfg = small_cfg(tmp_path, steps=500, n_scenes=1)
    cfg.train.batch_size = 1
    cfg.train.eval_every = cfg.train.ckpt_every = 500
    cfg.train.log_every = 50
    hist = train(cfg)["loss_history"]
    assert hist[-1] <= 0.1 * hist[9], (hist[9], hist[-1])


# ablation ----------------------------------------------------------------------

def test_unknown_suite():
    with pytest.raises(ConfigError):
        run_ablation("nope")


def test_variant_params_suite():
    table = run_ablation("variant_params")
    counts = {r["variant"]: r["decoder_params"] for r in table.rows}
    assert counts["mamba"] < counts["transformer"] and table.summary["mamba < transformer"]
    assert "| variant |" in table.to_markdown()


def test_delta_mtl_and_table():
    assert delta_mtl({"det": 50.0, "seg": 40.0}, {"det": 48.0, "seg": 45.0}) == -3.0
    t = AblationTable("x", [{"a": 1.0}], {"ok": True})
    assert json.loads(t.to_json())["summary"]["ok"] is True


def test_seg_layout_suite_runs(tmp_path):
    st_ = AblationSettings(seeds=(0,), steps=2, n_train=2, n_eval=2, seg_layouts=(1, 4, 8), out_dir=str(tmp_path),
                           scene=SMALL)
    table = run_ablation("seg_layout", RunConfig(scene=SMALL), st_)
    assert [r["S"] for r in table.rows] == [1, 4, 8] and [r["n_s"] for r in table.rows] == [3, 12, 24]
    assert all(0 <= r["seg"] <= 100 for r in table.rows)
    assert set(SUITES) == {"mtl_vs_single", "mafi", "tcs", "seg_layout", "variant_params"}


# cli ---------------------------------------------------------------------------

def test_cli_synth_train_eval(tmp_path, capsys):
    cfg = small_cfg(tmp_path / "run", steps=2)
    cfg_path = tmp_path / "cfg.yaml"
    dump_config(cfg, cfg_path)
    assert main(["synth", "--spec", str(cfg_path), "--n", "2", "--out", str(tmp_path / "data"), "--seed", "4"]) == 0
    assert len(list((tmp_path / "data").glob("*.npz"))) == 2
    assert main(["train", "--config", str(cfg_path), "--seed", "1", "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", "--ckpt", str(tmp_path / "run" / "last.pt"), "--data", str(tmp_path / "data")]) == 0
    out = capsys.readouterr().out
    rec = MetricsRecord.from_json(out.strip().splitlines()[-1])
    assert rec.step == 2 and "det/mAP" in rec.metrics


def test_cli_config_error_exit_code(capsys):
    assert main(["train", "--set", "decoder.variant=rnn"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_cli_verify_module(capsys):
    assert main(["verify", "--module", "fusion_mafi"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_cli_ablate_variant_params(capsys, tmp_path):
    assert main(["ablate", "--suite", "variant_params", "--json", str(tmp_path / "t.json")]) == 0
    assert json.loads((tmp_path / "t.json").read_text())["suite"] == "variant_params"
