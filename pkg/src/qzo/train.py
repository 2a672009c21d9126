"""End-to-end training loop and the clipping-threshold sweep.

Each step follows the same choreography: sample a batch and a derived
per-step seed, run the paired-perturbation estimate, clip the directional
derivative, and apply the ZO-SGD update replaying the same seed. Every step
appends one row to runlog.csv (schema v1: step, loss, d, d_clipped, lr,
wall_ms); periodic evaluations go to eval.csv. A non-finite loss marks the
run collapsed: the step is logged, training stops, and the caller maps the
state to exit code 3.

All run-local seeds derive from the master seed, so a run is reproducible
from one integer (the wall_ms column is measured time and is the one
non-deterministic field).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunSpec, config_echo
from .data import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    DataError,
    Dataset,
    batch_stream,
    load_csv,
    make_synthetic,
)
from .models import (
    accuracy,
    build_model,
    loss as model_loss,
    stress_batch_pool,
    stress_layer,
    stress_loss,
)
from .optim import schedule_lr, zo_sgd_step
from .quant import save_layer
from .rng import ALGORITHM_ID, derive_seed
from .tensor import DenseMatrix
from .zo import DivergenceError, PerturbSpec, ScaleSpace, clip_directional, qspsa_estimate

RUNLOG_COLUMNS = ("step", "loss", "d", "d_clipped", "lr", "wall_ms")
RUNLOG_SCHEMA_VERSION = 1
EVAL_SCHEMA_VERSION = 1

SYNTHETIC_N = 400
SYNTHETIC_NOISE = 1.0

_STEP_TAG = 0x5A53
_BATCH_TAG = 0x4241
_PROBE_TAG = 0x5052
_REPEAT_TAG = 0x5250


@dataclass
class Task:
    """A loss over tunable scales plus the data plumbing to drive it."""

    space: ScaleSpace
    layers: list
    loss_on: object  # callable(batch) -> float
    batches: object  # iterator of batches
    evaluate: object  # callable() -> (metric_name, value) on the test split
    n_params: int


@dataclass
class RunResult:
    out_dir: Path
    collapsed: bool
    collapse_step: int | None
    steps_run: int
    metric_name: str
    zero_shot: float
    final: float


def load_dataset_for(name: str, seed: int) -> Dataset:
    """Dataset by config string: a synthetic kind or a CSV path."""
    if name.endswith(".csv"):
        return load_csv(name, seed=seed)
    return make_synthetic(name, SYNTHETIC_N, SYNTHETIC_NOISE, seed)


def _stress_task(spec: RunSpec) -> Task:
    layer = stress_layer()
    pool = stress_batch_pool(spec.train.master_seed, n=64)
    features = DenseMatrix(pool)
    split = np.full(64, SPLIT_TEST, dtype=np.uint8)
    split[:48] = SPLIT_TRAIN
    dataset = Dataset(features, np.zeros(64), split, "regression")
    space = ScaleSpace([layer], include_bias=False)
    batches = batch_stream(
        dataset, SPLIT_TRAIN, spec.train.batch_size, derive_seed(spec.train.master_seed, _BATCH_TAG)
    )

    def loss_on(batch):
        return stress_loss(layer, pool[batch])

    def evaluate():
        try:
            return "loss", stress_loss(layer, pool[48:])
        except DivergenceError:
            return "loss", math.nan

    return Task(space, [layer], loss_on, batches, evaluate, space.size)


def build_task(spec: RunSpec) -> Task:
    """Wire dataset, model, scale space, batches and evaluation for one run."""
    if spec.model == "stress":
        if spec.dataset != "stress":
            raise DataError("the stress model pairs with dataset=stress")
        return _stress_task(spec)

    master = spec.train.master_seed
    dataset = load_dataset_for(spec.dataset, master)
    if dataset.task == "classification":
        out_dim, head = dataset.n_classes, "ce"
    else:
        out_dim, head = 1, "mse"
    model = build_model(
        spec.model,
        dataset.n_features,
        out_dim,
        head,
        bits=spec.bits,
        group_size=spec.group_size,
        quantizer=spec.quantizer,
        seed=master,
    )
    space = ScaleSpace(model.layers, include_bias=True)
    batches = batch_stream(
        dataset, SPLIT_TRAIN, spec.train.batch_size, derive_seed(master, _BATCH_TAG)
    )
    feats = dataset.features.a
    labels = dataset.labels

    def loss_on(batch):
        return model_loss(model, (feats[batch], labels[batch]))

    test_idx = dataset.indices(SPLIT_TEST)

    def evaluate():
        if dataset.task == "classification":
            return "accuracy", accuracy(model, feats[test_idx], labels[test_idx])
        try:
            return "loss", model_loss(model, (feats[test_idx], labels[test_idx]))
        except DivergenceError:
            return "loss", math.nan

    return Task(space, model.layers, loss_on, batches, evaluate, space.size)


def _fmt(x: float) -> str:
    return repr(float(x))


def run_train(spec: RunSpec, out_dir) -> RunResult:
    """Train for spec.train.steps steps, writing logs and final layer files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(spec)
    cfg = spec.train

    header = {
        "schema": {"runlog": RUNLOG_SCHEMA_VERSION, "eval": EVAL_SCHEMA_VERSION},
        "config": config_echo(spec),
        "package_version": __version__,
        "rng_algorithm": ALGORITHM_ID,
        "tunable_params": task.n_params,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2) + "\n")

    eval_every = max(1, cfg.steps // 10)
    collapsed = False
    collapse_step = None
    steps_run = 0

    metric_name, zero_shot = task.evaluate()

    with open(out / "runlog.csv", "w", encoding="utf-8") as runlog, open(
        out / "eval.csv", "w", encoding="utf-8"
    ) as evallog:
        runlog.write(",".join(RUNLOG_COLUMNS) + "\n")
        evallog.write("step,split,metric,value\n")
        evallog.write(f"0,test,{metric_name},{_fmt(zero_shot)}\n")

        # With threshold 0 every clipped derivative is 0 and no step can move
        # the parameters, so the paired probes are skipped: the parameters
        # stay bit-identical to initialization (the zero-shot arm) instead of
        # drifting by the probes' telescoping ulps.
        zero_update = cfg.clip_threshold == 0.0

        for t in range(1, cfg.steps + 1):
            spec_t = PerturbSpec(
                seed=derive_seed(cfg.master_seed, _STEP_TAG, t), epsilon=cfg.epsilon
            )
            batch = next(task.batches)
            lr_t = schedule_lr(cfg, t)
            start = time.perf_counter()
            try:
                if zero_update:
                    loss_t, d_value, d_clipped = task.loss_on(batch), 0.0, 0.0
                    if not math.isfinite(loss_t):
                        raise DivergenceError(f"non-finite loss {loss_t}")
                else:
                    est = qspsa_estimate(task.loss_on, task.space, spec_t, batch)
                    loss_t, d_value = est.loss_plus, est.value
                    d_clipped = clip_directional(d_value, cfg.clip_threshold)
            except DivergenceError:
                wall_ms = (time.perf_counter() - start) * 1e3
                runlog.write(
                    f"{t},{_fmt(math.nan)},{_fmt(math.nan)},{_fmt(math.nan)},"
                    f"{_fmt(lr_t)},{wall_ms:.3f}\n"
                )
                collapsed = True
                collapse_step = t
                steps_run = t
                break
            if not zero_update:
                vec = task.space.gather()
                zo_sgd_step(vec, d_clipped, spec_t, lr_t, task.space.nonneg_mask)
                task.space.scatter(vec)
            wall_ms = (time.perf_counter() - start) * 1e3
            runlog.write(
                f"{t},{_fmt(loss_t)},{_fmt(d_value)},{_fmt(d_clipped)},"
                f"{_fmt(lr_t)},{wall_ms:.3f}\n"
            )
            steps_run = t
            if t % eval_every == 0 or t == cfg.steps:
                name, value = task.evaluate()
                evallog.write(f"{t},test,{name},{_fmt(value)}\n")

        if collapsed:
            name, value = task.evaluate()
            evallog.write(f"{steps_run},test,{name},{_fmt(value)}\n")

    final = task.evaluate()[1]
    for i, layer in enumerate(task.layers):
        save_layer(layer, out / f"layer_{i}.qzol")

    summary = {
        "collapsed": collapsed,
        "collapse_step": collapse_step,
        "steps_run": steps_run,
        "metric": metric_name,
        "zero_shot": zero_shot,
        "final": None if math.isnan(final) else final,
        "tunable_params": task.n_params,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    return RunResult(
        out_dir=out,
        collapsed=collapsed,
        collapse_step=collapse_step,
        steps_run=steps_run,
        metric_name=metric_name,
        zero_shot=zero_shot,
        final=final,
    )


def estimate_clip_percentile(
    spec: RunSpec, probes: int = 200, percentile: float = 90.0
) -> float:
    """Empirical percentile of |d| at initialization, used as a clip level.

    Probe estimates restore the scales, so the model is left untouched.
    """
    task = build_task(spec)
    magnitudes = np.empty(probes)
    for k in range(probes):
        spec_k = PerturbSpec(
            seed=derive_seed(spec.train.master_seed, _PROBE_TAG, k),
            epsilon=spec.train.epsilon,
        )
        est = qspsa_estimate(task.loss_on, task.space, spec_k, next(task.batches))
        magnitudes[k] = abs(est.value)
    return float(np.percentile(magnitudes, percentile))


@dataclass
class AblationArm:
    clip_threshold: float
    repeats: int
    collapses: int
    mean_final_metric: float  # over completed runs; nan if all collapsed
    finals: list


@dataclass
class AblationResult:
    arms: list
    metric_name: str
    stability: str | None  # "exercised" | "not-exercised" when inf is an arm
    warnings: list


def parse_clip_tokens(tokens: list[str], spec: RunSpec) -> tuple[list[float], list[str]]:
    """Clip levels from CLI tokens; dedups with a warning, resolves p90."""
    values: list[float] = []
    warnings: list[str] = []
    for tok in tokens:
        t = tok.strip().lower()
        if t in ("inf", "infinity"):
            v = math.inf
        elif t == "p90":
            v = estimate_clip_percentile(spec)
        else:
            v = float(tok)
        if v < 0 or math.isnan(v):
            raise ValueError(f"clip threshold must be non-negative: {tok!r}")
        if any(v == seen for seen in values):
            warnings.append(f"duplicate clip threshold {tok!r} ignored")
            continue
        values.append(v)
    if not values:
        raise ValueError("need at least one clip threshold")
    return values, warnings


def _clip_label(c: float) -> str:
    if math.isinf(c):
        return "inf"
    return f"{c:g}".replace(".", "p").replace("-", "m")


def run_ablation(
    spec: RunSpec, clip_values: list[float], repeats: int, out_dir
) -> AblationResult:
    """One training run per (clip level, repeat) with repeat-derived seeds.

    Seeds are shared across clip levels within a repeat, so arms are paired.
    Collapses count as data, not failures.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric_name = ""
    arms = []
    for c in clip_values:
        finals = []
        collapses = 0
        for rep in range(repeats):
            rep_seed = derive_seed(spec.train.master_seed, _REPEAT_TAG, rep)
            run_spec = spec.with_overrides(master_seed=rep_seed, clip_threshold=c)
            result = run_train(run_spec, out / f"c{_clip_label(c)}_rep{rep}")
            metric_name = result.metric_name
            if result.collapsed:
                collapses += 1
            finals.append(result.final)
        completed = [f for f in finals if not math.isnan(f)]
        arms.append(
            AblationArm(
                clip_threshold=c,
                repeats=repeats,
                collapses=collapses,
                mean_final_metric=float(np.mean(completed)) if completed else math.nan,
                finals=finals,
            )
        )

    stability = None
    inf_arms = [a for a in arms if math.isinf(a.clip_threshold)]
    if inf_arms:
        stability = "exercised" if inf_arms[0].collapses > 0 else "not-exercised"

    rows = ["clip_threshold,repeats,collapses,mean_final_metric"]
    for arm in arms:
        c = "inf" if math.isinf(arm.clip_threshold) else repr(arm.clip_threshold)
        rows.append(f"{c},{arm.repeats},{arm.collapses},{_fmt(arm.mean_final_metric)}")
    (out / "ablate.csv").write_text("\n".join(rows) + "\n")
    payload = {
        "metric": metric_name,
        "stability": stability,
        "arms": [
            {
                "clip_threshold": "inf" if math.isinf(a.clip_threshold) else a.clip_threshold,
                "repeats": a.repeats,
                "collapses": a.collapses,
                "mean_final_metric": None if math.isnan(a.mean_final_metric) else a.mean_final_metric,
                "finals": [None if math.isnan(f) else f for f in a.finals],
            }
            for a in arms
        ],
    }
    (out / "ablate.json").write_text(json.dumps(payload, indent=2) + "\n")
    return AblationResult(arms=arms, metric_name=metric_name, stability=stability, warnings=[])
