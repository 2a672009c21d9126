"""Desk-scale forward-only models whose quantized layers get fine-tuned.

The zoo is deliberately tiny: logistic regression, its regression twin
(one linear layer with a squared-error head), a 2-layer MLP, and a
single-block attention-free sequence mixer. Evaluation is pure: the same
parameters and batch give the same loss to the last bit.

This module also owns the analytic scale-gradient oracle for the one-layer
squared-error model and the named problems the verification harness samples:
a loss linear in the scales (exact directional derivatives, known gradient)
and a heavy-tailed exponential stress loss whose directional derivatives
occasionally explode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .quant import (
    QuantizedLinear,
    QuantLayer,
    forward_batch,
    quantize_codebook,
    quantize_scalar,
)
from .rng import derive_seed, normals_at
from .tensor import DenseMatrix
from .zo import DivergenceError

ACTIVATIONS = ("relu", "tanh", "identity")
HEADS = ("ce", "mse")

_INIT_TAG = 0x4D49


def _activate(h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "tanh":
        return np.tanh(h)
    if kind == "identity":
        return h
    raise ValueError(f"unknown activation {kind!r}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood; ln(K) for uniform logits over K classes."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(logits.shape[0]), labels]
    return float(np.mean(lse - picked))


def squared_error(preds: np.ndarray, targets: np.ndarray) -> float:
    """Half squared error averaged over the batch."""
    if targets.ndim == 1:
        targets = targets[:, None]
    diff = preds - targets
    return float(0.5 * np.mean((diff * diff).sum(axis=1)))


@dataclass
class QuantizedMLP:
    """Stack of quantized linear layers with an activation between them."""

    layers: list
    activation: str = "tanh"
    head: str = "ce"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ValueError("adjacent layer dimensions are incompatible")

    def forward(self, x_batch: np.ndarray, scale_offsets=None) -> np.ndarray:
        h = np.asarray(x_batch, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            off = scale_offsets[i] if scale_offsets is not None else None
            h = forward_batch(layer, h, off)
            if not np.isfinite(h).all():
                raise DivergenceError(f"non-finite activations after layer {i}")
            if i + 1 < len(self.layers):
                h = _activate(h, self.activation)
        return h


@dataclass
class SeqMixer:
    """Attention-free single-block sequence model.

    The input row is read as a sequence of width-`chunk` tokens, a shared
    quantized linear mixes each token, tokens are mean-pooled, and a
    quantized head maps the pooled vector to the outputs.
    """

    token_layer: QuantLayer
    head_layer: QuantLayer
    chunk: int
    activation: str = "tanh"
    head: str = "ce"

    @property
    def layers(self) -> list:
        return [self.token_layer, self.head_layer]

    def forward(self, x_batch: np.ndarray, scale_offsets=None) -> np.ndarray:
        x = np.asarray(x_batch, dtype=np.float64)
        n, d = x.shape
        if d % self.chunk != 0:
            raise ValueError("feature count must be a multiple of the chunk width")
        tok_off = scale_offsets[0] if scale_offsets is not None else None
        head_off = scale_offsets[1] if scale_offsets is not None else None
        tokens = x.reshape(n * (d // self.chunk), self.chunk)
        mixed = forward_batch(self.token_layer, tokens, tok_off)
        if not np.isfinite(mixed).all():
            raise DivergenceError("non-finite activations after layer 0")
        mixed = _activate(mixed, self.activation)
        pooled = mixed.reshape(n, d // self.chunk, self.chunk).mean(axis=1)
        out = forward_batch(self.head_layer, pooled, head_off)
        if not np.isfinite(out).all():
            raise DivergenceError("non-finite activations after layer 1")
        return out


def loss(model, batch, scale_offsets=None) -> float:
    """Mean loss of the model on (features, labels); no layer copies are made."""
    x, y = batch
    out = model.forward(x, scale_offsets)
    if model.head == "ce":
        return softmax_cross_entropy(out, np.asarray(y, dtype=np.int64))
    return squared_error(out, np.asarray(y, dtype=np.float64))


def accuracy(model, x_batch: np.ndarray, labels: np.ndarray) -> float:
    out = model.forward(x_batch)
    return float(np.mean(out.argmax(axis=1) == np.asarray(labels, dtype=np.int64)))


def scale_grad_mse(layer: QuantizedLinear, x_batch: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Analytic d(loss)/d(scales) for the one-layer squared-error model.

    Chain rule through the de-quantization: the weight seen by the forward
    pass is scale * integer, so the scale gradient is the weight gradient
    summed over each group against the stored integers.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    resid = forward_batch(layer, x) - t
    grad_w = resid.T @ x / x.shape[0]
    per_group = (grad_w * layer.qweights).reshape(
        layer.out_features, layer.groups_per_row, layer.group_size
    )
    return per_group.sum(axis=2).ravel()


def _init_dense(rows: int, cols: int, seed: int) -> DenseMatrix:
    w = normals_at(seed, 0, rows * cols).reshape(rows, cols) / np.sqrt(cols)
    return DenseMatrix(w)


def _quantize(w: DenseMatrix, bits: int, group_size: int, quantizer: str, seed: int):
    if quantizer == "scalar":
        return quantize_scalar(w, bits, group_size)
    if quantizer == "codebook":
        return quantize_codebook(w, code_bits=bits, group_len=group_size, seed=seed)
    raise ValueError(f"unknown quantizer {quantizer!r}")


def build_model(
    name: str,
    in_dim: int,
    out_dim: int,
    head: str,
    *,
    bits: int,
    group_size: int,
    quantizer: str = "scalar",
    seed: int = 0,
    with_bias: bool = True,
):
    """Construct a seeded dense model and quantize its layers.

    Names: "logistic" / "linear" (one layer), "mlp" or "mlp-<hidden>"
    (two layers), "seqmix" (token mixer + head).
    """

    def make_layer(rows, cols, idx):
        layer = _quantize(
            _init_dense(rows, cols, derive_seed(seed, _INIT_TAG, idx)),
            bits, group_size, quantizer, derive_seed(seed, _INIT_TAG, idx, 1),
        )
        if with_bias:
            layer.bias = np.zeros(rows)
        return layer

    if name in ("logistic", "linear"):
        return QuantizedMLP(layers=[make_layer(out_dim, in_dim, 0)],
                            activation="identity", head=head)
    if name == "mlp" or name.startswith("mlp-"):
        hidden = int(name.split("-", 1)[1]) if "-" in name else 64
        if not 2 <= hidden <= 1024:
            raise ValueError(f"unreasonable hidden size {hidden}")
        return QuantizedMLP(
            layers=[make_layer(hidden, in_dim, 0), make_layer(out_dim, hidden, 1)],
            activation="tanh", head=head,
        )
    if name == "seqmix":
        chunk = 2 if in_dim % 2 == 0 else 1
        return SeqMixer(
            token_layer=make_layer(chunk, chunk, 0),
            head_layer=make_layer(out_dim, chunk, 1),
            chunk=chunk, activation="tanh", head=head,
        )
    raise ValueError(f"unknown model {name!r}")


# ---------------------------------------------------------------------------
# Named problems for the Monte-Carlo verification harness.


@dataclass
class Problem:
    """A loss over the scales of fixed layers, with an optional exact gradient."""

    name: str
    layers: list
    batch: object
    loss_fn: Callable[[object], float]
    grad_fn: Callable[[], np.ndarray] | None
    epsilon: float = 1e-3
    include_bias: bool = False


def linear_problem(seed: int = 0) -> Problem:
    """Loss linear in the scales: the mean summed output of one layer.

    Central differences are exact here, so the Monte-Carlo mean of d*z must
    converge to the analytic gradient with no discretization bias.
    """
    q = np.array([[3, -1, 2, 5], [-4, 2, -6, 1]], dtype=np.int8)
    layer = QuantizedLinear(
        qweights=q, scales=np.array([0.6, 0.4, 0.5, 0.7]), bits=4, group_size=2
    )
    x = normals_at(derive_seed(seed, 0x4C50), 0, 8 * 4).reshape(8, 4)

    def loss_fn(batch):
        return float(forward_batch(layer, batch).sum(axis=1).mean())

    def grad_fn():
        xbar = x.mean(axis=0)
        per_group = (layer.qweights * xbar[None, :]).reshape(2, 2, 2)
        return per_group.sum(axis=2).ravel()

    return Problem("linear", [layer], x, loss_fn, grad_fn)


def mse_problem(seed: int = 0) -> Problem:
    """One-layer squared-error loss: quadratic in the scales, oracle gradient."""
    q = np.array([[2, -7, 1, 4], [5, 3, -2, -6]], dtype=np.int8)
    layer = QuantizedLinear(
        qweights=q, scales=np.array([0.3, 0.8, 0.5, 0.2]), bits=4, group_size=2
    )
    s = derive_seed(seed, 0x4D53)
    x = normals_at(s, 0, 8 * 4).reshape(8, 4)
    y = normals_at(s, 32, 8 * 2).reshape(8, 2)

    def loss_fn(batch):
        bx, by = batch
        return squared_error(forward_batch(layer, bx), by)

    def grad_fn():
        return scale_grad_mse(layer, x, y)

    return Problem("mse", [layer], (x, y), loss_fn, grad_fn)


# Stress-loss shape: mean_i exp(kappa * out_i) through one quantized layer.
# At the matched perturbation scale the two-sided difference goes through
# sinh/exp of a Gaussian, so directional derivatives get heavy tails
# (sample kurtosis in the hundreds) and occasionally explode, which is what
# the clipping ablation needs. Perturb with STRESS_EPSILON, not the default.
STRESS_KAPPA = 8.0
STRESS_EPSILON = 0.02
STRESS_QWEIGHTS = np.array([[5, -3, 4, -6]], dtype=np.int8)
STRESS_SCALE_INIT = 0.02


def stress_batch_pool(seed: int, n: int = 64) -> np.ndarray:
    return normals_at(derive_seed(seed, 0x5354), 0, n * 4).reshape(n, 4)


def stress_layer() -> QuantizedLinear:
    return QuantizedLinear(
        qweights=STRESS_QWEIGHTS.copy(),
        scales=np.full(2, STRESS_SCALE_INIT),
        bits=4,
        group_size=2,
    )


def stress_loss(layer: QuantLayer, x_batch: np.ndarray) -> float:
    out = forward_batch(layer, x_batch)[:, 0]
    with np.errstate(over="ignore"):
        values = np.exp(STRESS_KAPPA * out)
    if not np.isfinite(values).all():
        raise DivergenceError("non-finite activations after layer 0")
    return float(values.mean())


def stress_problem(seed: int = 0) -> Problem:
    """Heavy-tailed exponential loss on a fixed batch; exact gradient known."""
    layer = stress_layer()
    x = stress_batch_pool(seed, n=16)[:16]

    def loss_fn(batch):
        return stress_loss(layer, batch)

    def grad_fn():
        out = forward_batch(layer, x)[:, 0]
        weights = STRESS_KAPPA * np.exp(STRESS_KAPPA * out)
        group_resp = (layer.qweights[0] * x).reshape(x.shape[0], 2, 2).sum(axis=2)
        return (weights[:, None] * group_resp).mean(axis=0)

    return Problem("stress", [layer], x, loss_fn, grad_fn, epsilon=STRESS_EPSILON)


PROBLEMS = {"linear": linear_problem, "mse": mse_problem, "stress": stress_problem}
