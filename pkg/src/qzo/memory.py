"""Arithmetic model of training memory: weights, gradients, optimizer states,
and quantization scales. Bytes only; nothing is measured.

Per parameter: weights cost weight_bits/8, gradients gradient_bits/8 (zero
for forward-only training), AdamW keeps two moments at the state precision,
and quantized modes add one 8-byte scale per quantization group. GB means
10^9 bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

GIGABYTE = 1e9

OPTIMIZER_STATE_BYTES = {
    "adamw-16bit-states": 4.0,  # two moments, 2 bytes each
    "adamw-32bit-states": 8.0,
    "sgd": 0.0,
    "zo-none": 0.0,
}


@dataclass(frozen=True)
class MemoryModel:
    param_count: int
    weight_bits: int
    gradient_bits: int
    optimizer: str
    group_size: int = 0  # 0: no scale storage

    def __post_init__(self):
        if self.param_count < 1:
            raise ValueError("param_count must be >= 1")
        if self.optimizer not in OPTIMIZER_STATE_BYTES:
            raise ValueError(f"unknown optimizer mode {self.optimizer!r}")
        if self.weight_bits < 1 or self.gradient_bits < 0 or self.group_size < 0:
            raise ValueError("bit widths must be non-negative")

    def components(self) -> dict[str, float]:
        n = self.param_count
        return {
            "weights": n * self.weight_bits / 8.0,
            "gradients": n * self.gradient_bits / 8.0,
            "optimizer_states": n * OPTIMIZER_STATE_BYTES[self.optimizer],
            "scales": (n / self.group_size) * 8.0 if self.group_size else 0.0,
        }

    def total(self) -> float:
        return sum(self.components().values())


def _mode_model(mode: str, n_params: int, group_size: int) -> MemoryModel:
    presets = {
        "ft-bf16-adamw16": dict(weight_bits=16, gradient_bits=16, optimizer="adamw-16bit-states"),
        "ft-bf16-adamw32": dict(weight_bits=16, gradient_bits=16, optimizer="adamw-32bit-states"),
        "ft-bf16-sgd": dict(weight_bits=16, gradient_bits=16, optimizer="sgd"),
        "mezo-bf16": dict(weight_bits=16, gradient_bits=0, optimizer="zo-none"),
        "qzo-8bit": dict(weight_bits=8, gradient_bits=0, optimizer="zo-none", group_size=group_size),
        "qzo-4bit": dict(weight_bits=4, gradient_bits=0, optimizer="zo-none", group_size=group_size),
        "qzo-3bit": dict(weight_bits=3, gradient_bits=0, optimizer="zo-none", group_size=group_size),
        "qzo-2bit": dict(weight_bits=2, gradient_bits=0, optimizer="zo-none", group_size=group_size),
    }
    if mode not in presets:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(presets)}")
    return MemoryModel(param_count=n_params, **presets[mode])


def account(n_params: int, modes: list[str], group_size: int = 128) -> dict:
    """Component bytes per mode, plus the fine-tune/QZO total ratio when both
    kinds of mode are present."""
    if n_params < 1:
        raise ValueError("param_count must be >= 1")
    rows = {}
    for mode in modes:
        model = _mode_model(mode, n_params, group_size)
        rows[mode] = {**model.components(), "total": model.total()}
    ft = [m for m in modes if m.startswith("ft-")]
    qzo = [m for m in modes if m.startswith("qzo-")]
    ratio = rows[ft[0]]["total"] / rows[qzo[0]]["total"] if ft and qzo else None
    return {"params": n_params, "group_size": group_size, "modes": rows, "ratio": ratio}


def render_table(report: dict) -> str:
    lines = [
        f"memory model for {report['params']:.3g} parameters "
        f"(group size {report['group_size']})",
        f"{'mode':<18}{'weights':>10}{'grads':>10}{'opt':>10}{'scales':>10}{'total':>10}  GB",
    ]
    for mode, row in report["modes"].items():
        lines.append(
            f"{mode:<18}"
            f"{row['weights'] / GIGABYTE:>10.3f}{row['gradients'] / GIGABYTE:>10.3f}"
            f"{row['optimizer_states'] / GIGABYTE:>10.3f}{row['scales'] / GIGABYTE:>10.3f}"
            f"{row['total'] / GIGABYTE:>10.3f}"
        )
    if report["ratio"] is not None:
        lines.append(f"fine-tune / qzo total ratio: {report['ratio']:.2f}x")
    return "\n".join(lines)
