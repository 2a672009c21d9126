"""Command-line surface.

Subcommands: train, ablate-clipping, verify-unbiased, account-memory,
estimate-once, quantize. Exit codes: 0 success, 2 configuration error,
3 collapsed training run, 4 verification failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_config_file
from .data import DataError
from .memory import account, render_table
from .models import PROBLEMS, QuantizedMLP
from .quant import load_layer, quantize_codebook, quantize_scalar, save_layer
from .tensor import DenseMatrix
from .train import load_dataset_for, parse_clip_tokens, run_ablation, run_train
from .verify import run_verification
from .zo import DivergenceError, PerturbSpec, qspsa_estimate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLAPSED = 3
EXIT_VERIFY = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qzo", description="zeroth-order fine-tuning of quantized models"
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run one training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate-clipping", help="sweep the clipping threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-values", required=True,
                   help="comma-separated thresholds; accepts numbers, inf, p90")
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("verify-unbiased", help="Monte-Carlo bias/variance check")
    p.add_argument("--problem", choices=sorted(PROBLEMS), default="linear")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--clip", default="inf", help="number, inf, or p90")
    p.add_argument("--check", choices=("bias", "variance", "both"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", dest="json_path", default=None)

    p = sub.add_parser("account-memory", help="training memory arithmetic")
    p.add_argument("--params", type=float, default=None, help="parameter count, e.g. 7e9")
    p.add_argument("--config", default=None, help="derive the count from a run config")
    p.add_argument("--modes", default="ft-bf16-adamw16,qzo-4bit")
    p.add_argument("--group-size", type=int, default=128)

    p = sub.add_parser("estimate-once", help="one paired-perturbation probe")
    p.add_argument("--layer", required=True)
    p.add_argument("--dataset", required=True,
                   help="synthetic kind or CSV path; uses the rows in file order "
                        "(synthetics are generated with seed 0)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("quantize", help="quantize a plain numeric weights CSV")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--group-size", type=int, default=128)
    p.add_argument("--quantizer", choices=("scalar", "codebook"), default="scalar")

    return parser


def _cmd_train(args) -> int:
    spec = parse_config_file(args.config)
    result = run_train(spec, args.out)
    print(
        f"run finished: steps={result.steps_run} {result.metric_name}: "
        f"zero-shot={result.zero_shot:.4f} final={result.final:.4f}"
    )
    if result.collapsed:
        print(f"run collapsed at step {result.collapse_step} (non-finite loss)")
        return EXIT_COLLAPSED
    return EXIT_OK


def _cmd_ablate(args) -> int:
    spec = parse_config_file(args.config)
    tokens = [t for t in args.clip_values.split(",") if t.strip()]
    values, warnings = parse_clip_tokens(tokens, spec)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    result = run_ablation(spec, values, args.repeats, args.out)
    print(f"{'clip':>10}{'collapses':>11}{'mean ' + result.metric_name:>16}")
    for arm in result.arms:
        c = "inf" if math.isinf(arm.clip_threshold) else f"{arm.clip_threshold:g}"
        mean = "-" if math.isnan(arm.mean_final_metric) else f"{arm.mean_final_metric:.4f}"
        print(f"{c:>10}{arm.collapses:>11}{mean:>16}")
    if result.stability is not None:
        print(f"stability invariant: {result.stability}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    clip = args.clip
    if clip.lower() in ("inf", "infinity"):
        clip = math.inf
    elif clip.lower() != "p90":
        clip = float(clip)
    problem = PROBLEMS[args.problem](args.seed)
    report = run_verification(problem, args.samples, clip, base_seed=args.seed)
    print(report.render())
    if args.json_path:
        Path(args.json_path).write_text(report.to_json() + "\n")
    return EXIT_OK if report.passed(args.check) else EXIT_VERIFY


def _cmd_account(args) -> int:
    if args.params is None and args.config is None:
        raise ConfigError("give --params or --config")
    if args.params is not None:
        n = int(args.params)
    else:
        from .train import build_task

        spec = parse_config_file(args.config)
        task = build_task(spec)
        n = int(sum(l.out_features * l.in_features for l in task.layers))
    modes = [m for m in args.modes.split(",") if m.strip()]
    report = account(n, modes, args.group_size)
    print(render_table(report))
    return EXIT_OK


def _cmd_estimate_once(args) -> int:
    layer = load_layer(args.layer)
    dataset = load_dataset_for(args.dataset, seed=0)
    if dataset.task == "classification":
        head, want_out = "ce", dataset.n_classes
    else:
        head, want_out = "mse", 1
    if layer.out_features != want_out:
        raise ConfigError(
            f"layer outputs {layer.out_features} but dataset needs {want_out}"
        )
    if layer.in_features != dataset.n_features:
        raise ConfigError(
            f"layer inputs {layer.in_features} but dataset has {dataset.n_features} features"
        )
    model = QuantizedMLP(layers=[layer], activation="identity", head=head)
    take = min(args.batch_size, dataset.n)
    x = dataset.features.a[:take]
    y = dataset.labels[:take]

    from .models import loss as model_loss

    est = qspsa_estimate(
        lambda batch: model_loss(model, batch),
        [layer],
        PerturbSpec(seed=args.seed, epsilon=args.epsilon),
        (x, y),
    )
    print(f"loss_plus={est.loss_plus!r}")
    print(f"loss_minus={est.loss_minus!r}")
    print(f"d={est.value!r}")
    return EXIT_OK


def _cmd_quantize(args) -> int:
    w = np.loadtxt(args.weights, delimiter=",", ndmin=2)
    matrix = DenseMatrix(w)
    if args.quantizer == "scalar":
        layer = quantize_scalar(matrix, args.bits, args.group_size)
    else:
        layer = quantize_codebook(matrix, code_bits=args.bits, group_len=args.group_size)
    save_layer(layer, args.out)
    from .quant import dequantize

    err = float(np.mean((dequantize(layer).a - matrix.a) ** 2))
    print(
        f"wrote {args.out}: {matrix.rows}x{matrix.cols} {args.quantizer} "
        f"{args.bits}-bit, group {args.group_size}, reconstruction mse {err:.3e}"
    )
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "ablate-clipping": _cmd_ablate,
    "verify-unbiased": _cmd_verify,
    "account-memory": _cmd_account,
    "estimate-once": _cmd_estimate_once,
    "quantize": _cmd_quantize,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.cmd](args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_COLLAPSED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
