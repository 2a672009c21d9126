import csv
import json
import math

import numpy as np
import pytest

from qzo.config import RunSpec
from qzo.optim import TrainConfig
from qzo.quant import load_layer
from qzo.train import (
    RUNLOG_COLUMNS,
    build_task,
    estimate_clip_percentile,
    parse_clip_tokens,
    run_ablation,
    run_train,
)


def _spec(**kw):
    train_kw = dict(
        learning_rate=0.2, steps=40, batch_size=16, epsilon=1e-3,
        clip_threshold=100.0, master_seed=2,
    )
    train_kw.update({k: kw.pop(k) for k in list(kw) if k in train_kw})
    defaults = dict(bits=4, group_size=1, model="logistic", dataset="two-gaussians")
    defaults.update(kw)
    return RunSpec(train=TrainConfig(**train_kw), **defaults)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_train_writes_all_artifacts(tmp_path):
    result = run_train(_spec(), tmp_path / "run")
    out = result.out_dir
    for name in ("header.json", "runlog.csv", "eval.csv", "summary.json", "layer_0.qzol"):
        assert (out / name).exists()
    header = json.loads((out / "header.json").read_text())
    assert header["schema"]["runlog"] == 1
    assert header["rng_algorithm"]
    assert header["config"]["model"] == "logistic"
    assert not result.collapsed
    load_layer(out / "layer_0.qzol")  # parses back


def test_runlog_rows_and_clip_soundness(tmp_path):
    result = run_train(_spec(steps=25), tmp_path)
    rows = _read_csv(result.out_dir / "runlog.csv")
    assert rows[0] == list(RUNLOG_COLUMNS)
    body = rows[1:]
    assert len(body) == 25
    assert [int(r[0]) for r in body] == list(range(1, 26))
    for r in body:
        d, d_clipped = float(r[2]), float(r[3])
        assert d_clipped == max(-100.0, min(100.0, d))
        assert abs(d_clipped) <= 100.0


def test_full_run_reproducibility_modulo_wall_clock(tmp_path):
    a = run_train(_spec(), tmp_path / "a")
    b = run_train(_spec(), tmp_path / "b")
    rows_a = _read_csv(a.out_dir / "runlog.csv")
    rows_b = _read_csv(b.out_dir / "runlog.csv")
    # wall_ms is measured time, the single non-deterministic column
    strip = lambda rows: [r[:5] for r in rows]
    assert strip(rows_a) == strip(rows_b)
    assert (a.out_dir / "eval.csv").read_bytes() == (b.out_dir / "eval.csv").read_bytes()
    assert (a.out_dir / "header.json").read_bytes() == (b.out_dir / "header.json").read_bytes()
    assert (a.out_dir / "layer_0.qzol").read_bytes() == (b.out_dir / "layer_0.qzol").read_bytes()


def test_zero_threshold_leaves_parameters_at_initialization(tmp_path):
    spec = _spec(clip_threshold=0.0, steps=30)
    fresh = build_task(spec)
    init_scales = fresh.layers[0].scales.copy()
    init_bias = fresh.layers[0].bias.copy()

    result = run_train(spec, tmp_path)
    saved = load_layer(result.out_dir / "layer_0.qzol")
    assert np.array_equal(saved.scales, init_scales)
    assert np.array_equal(saved.bias, init_bias)
    assert result.final == result.zero_shot


def test_eval_log_has_zero_shot_and_final(tmp_path):
    result = run_train(_spec(steps=20), tmp_path)
    rows = _read_csv(result.out_dir / "eval.csv")
    assert rows[0] == ["step", "split", "metric", "value"]
    assert rows[1][0] == "0"
    assert float(rows[1][3]) == result.zero_shot
    assert int(rows[-1][0]) == 20


def test_stress_unclipped_collapses_and_is_logged(tmp_path):
    spec = RunSpec(
        train=TrainConfig(learning_rate=1e-5, steps=400, batch_size=16,
                          epsilon=0.02, clip_threshold=math.inf, master_seed=1),
        bits=4, group_size=2, model="stress", dataset="stress",
    )
    result = run_train(spec, tmp_path)
    assert result.collapsed
    assert result.collapse_step is not None and result.collapse_step <= 400
    rows = _read_csv(result.out_dir / "runlog.csv")[1:]
    assert len(rows) == result.collapse_step
    last = rows[-1]
    assert math.isnan(float(last[1])) and math.isnan(float(last[2]))
    for r in rows[:-1]:  # every completed step has a finite, sound record
        assert math.isfinite(float(r[1])) and float(r[3]) == float(r[2])
    summary = json.loads((result.out_dir / "summary.json").read_text())
    assert summary["collapsed"] is True


def test_stress_clipped_survives(tmp_path):
    c90 = estimate_clip_percentile(
        RunSpec(
            train=TrainConfig(learning_rate=1e-5, steps=400, batch_size=16,
                              epsilon=0.02, clip_threshold=math.inf, master_seed=1),
            bits=4, group_size=2, model="stress", dataset="stress",
        )
    )
    assert c90 > 0
    spec = RunSpec(
        train=TrainConfig(learning_rate=1e-5, steps=400, batch_size=16,
                          epsilon=0.02, clip_threshold=c90, master_seed=1),
        bits=4, group_size=2, model="stress", dataset="stress",
    )
    result = run_train(spec, tmp_path)
    assert not result.collapsed


def test_stress_model_requires_stress_dataset():
    spec = _spec(model="stress", dataset="two-gaussians", group_size=2)
    with pytest.raises(Exception, match="stress"):
        build_task(spec)


def test_parse_clip_tokens_dedup_and_specials():
    spec = _spec()
    values, warnings = parse_clip_tokens(["0", "100", "inf", "100"], spec)
    assert values[:2] == [0.0, 100.0] and math.isinf(values[2])
    assert len(warnings) == 1 and "duplicate" in warnings[0]
    with pytest.raises(ValueError):
        parse_clip_tokens(["-3"], spec)
    with pytest.raises(ValueError):
        parse_clip_tokens([], spec)


def test_ablation_zero_threshold_equals_zero_shot(tmp_path):
    spec = _spec(steps=25)
    result = run_ablation(spec, [0.0], repeats=2, out_dir=tmp_path)
    arm = result.arms[0]
    assert arm.collapses == 0
    for rep in range(2):
        summary = json.loads((tmp_path / f"c0_rep{rep}" / "summary.json").read_text())
        assert summary["final"] == summary["zero_shot"]
    assert (tmp_path / "ablate.csv").exists()
    assert result.stability is None  # no unclipped arm


def test_ablation_pairs_seeds_across_arms(tmp_path):
    spec = _spec(steps=10)
    run_ablation(spec, [0.0, 100.0], repeats=1, out_dir=tmp_path)
    h0 = json.loads((tmp_path / "c0_rep0" / "header.json").read_text())
    h1 = json.loads((tmp_path / "c100_rep0" / "header.json").read_text())
    assert h0["config"]["master_seed"] == h1["config"]["master_seed"]
    assert h0["config"]["clip_threshold"] != h1["config"]["clip_threshold"]


@pytest.mark.parametrize(
    "kw",
    [
        dict(model="mlp-8", dataset="two-moons", bits=4),
        dict(model="seqmix", dataset="two-gaussians", bits=4),
        dict(model="mlp-8", dataset="two-moons", bits=2, quantizer="codebook"),
    ],
)
def test_model_zoo_trains_without_collapse(tmp_path, kw):
    spec = _spec(steps=20, learning_rate=0.05, master_seed=3, **kw)
    result = run_train(spec, tmp_path)
    assert not result.collapsed
    assert result.metric_name == "accuracy"
    assert math.isfinite(result.final)


def test_regression_task_descends(tmp_path):
    spec = _spec(
        steps=500, learning_rate=1e-6, master_seed=3,
        model="linear", dataset="linear-regression", bits=8,
    )
    result = run_train(spec, tmp_path)
    assert result.metric_name == "loss"
    assert result.final < result.zero_shot
