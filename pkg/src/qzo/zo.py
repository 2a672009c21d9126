"""Gradient estimation from paired forward passes over seeded perturbations.

One step follows the store-nothing protocol: perturb the continuous
parameters by +eps*z (z regenerated from a seed), evaluate the loss, perturb
by -2*eps*z, evaluate again, perturb by +eps*z to restore, and return the
directional derivative d = (loss_plus - loss_minus) / (2*eps) together with
the seed that regenerates z. The update step later replays the same stream.

When several layers are tuned jointly, a single z-stream spans all their
scale vectors in registration order (layer order, then bias vectors for the
un-quantized parts), so perturb, restore and update all walk the same
coordinates in the same order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .quant import CodebookLinear, QuantizedLinear, QuantLayer
from .rng import SeededNormalStream


class DivergenceError(RuntimeError):
    """A forward pass produced a non-finite loss or activations."""


@dataclass(frozen=True)
class PerturbSpec:
    """Seed and scale of one replayable Gaussian perturbation."""

    seed: int
    epsilon: float

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class DirectionalDerivative:
    """Raw and clipped directional derivative along one perturbation."""

    value: float
    clipped_value: float
    threshold: float

    @classmethod
    def clip(cls, value: float, threshold: float) -> "DirectionalDerivative":
        return cls(value=value, clipped_value=clip_directional(value, threshold), threshold=threshold)


@dataclass(frozen=True)
class GradEstimate:
    """Directional derivative plus the seed that regenerates its direction."""

    value: float
    loss_plus: float
    loss_minus: float
    spec: PerturbSpec
    dim: int


def clip_directional(d: float, threshold: float) -> float:
    """Clamp d to [-threshold, threshold]; threshold may be math.inf."""
    if math.isnan(d):
        raise DivergenceError("directional derivative is NaN")
    if threshold < 0:
        raise ValueError("clip threshold must be non-negative")
    if d > threshold:
        return threshold
    if d < -threshold:
        return -threshold
    return d


def _apply_perturbation(
    segments: Sequence[np.ndarray],
    spec: PerturbSpec,
    multiplier: float,
    z_override: np.ndarray | None = None,
) -> None:
    """Add multiplier * eps * z to each segment, one z-stream across all."""
    step = multiplier * spec.epsilon
    if z_override is not None:
        pos = 0
        for seg in segments:
            seg += step * z_override[pos : pos + seg.shape[0]]
            pos += seg.shape[0]
        return
    stream = SeededNormalStream(spec.seed)
    for seg in segments:
        seg += step * stream.normals(seg.shape[0])


def perturb_scales(scales: np.ndarray, spec: PerturbSpec, multiplier: float) -> None:
    """In-place scales += multiplier * eps * z with z replayed from spec.seed.

    The multiplier sequence (+1, -2, +1) with one seed telescopes back to the
    starting values within a few ulps per element.
    """
    _apply_perturbation([scales], spec, multiplier)


class ScaleSpace:
    """Mutable view over the tunable coordinates of a stack of quantized layers.

    Registration order is fixed: each layer's scale vector in layer order,
    then (when tuning un-quantized parts) each layer's bias in layer order.
    Scale coordinates carry the non-negativity constraint; biases do not.
    """

    def __init__(self, layers: Sequence[QuantLayer], include_bias: bool = False):
        self.layers = list(layers)
        self.include_bias = include_bias
        self._segments: list[tuple[np.ndarray, bool]] = []
        for layer in self.layers:
            if isinstance(layer, QuantizedLinear):
                self._segments.append((layer.scales, True))
            elif isinstance(layer, CodebookLinear):
                self._segments.append((layer.channel_scales, True))
            else:
                raise TypeError(f"not a quantized layer: {type(layer).__name__}")
        if include_bias:
            for layer in self.layers:
                if layer.bias is not None:
                    self._segments.append((layer.bias, False))
        self.size = sum(seg.shape[0] for seg, _ in self._segments)

    @property
    def nonneg_mask(self) -> np.ndarray:
        mask = np.empty(self.size, dtype=bool)
        pos = 0
        for seg, nonneg in self._segments:
            mask[pos : pos + seg.shape[0]] = nonneg
            pos += seg.shape[0]
        return mask

    def gather(self) -> np.ndarray:
        return np.concatenate([seg for seg, _ in self._segments])

    def scatter(self, values: np.ndarray) -> None:
        if values.shape != (self.size,):
            raise ValueError(f"expected {self.size} values, got {values.shape}")
        pos = 0
        for seg, _ in self._segments:
            seg[:] = values[pos : pos + seg.shape[0]]
            pos += seg.shape[0]

    def perturb(
        self, spec: PerturbSpec, multiplier: float, z_override: np.ndarray | None = None
    ) -> None:
        _apply_perturbation([seg for seg, _ in self._segments], spec, multiplier, z_override)


def _two_sided_probe(
    loss_fn: Callable,
    batch,
    spec: PerturbSpec,
    perturb: Callable[[float], None],
    dim: int,
) -> GradEstimate:
    perturb(+1.0)
    try:
        loss_plus = float(loss_fn(batch))
    except DivergenceError:
        perturb(-1.0)
        raise
    perturb(-2.0)
    try:
        loss_minus = float(loss_fn(batch))
    except DivergenceError:
        perturb(+1.0)
        raise
    perturb(+1.0)
    if not math.isfinite(loss_plus) or not math.isfinite(loss_minus):
        raise DivergenceError(
            f"non-finite loss in paired passes: loss_plus={loss_plus}, loss_minus={loss_minus}"
        )
    d = (loss_plus - loss_minus) / (2.0 * spec.epsilon)
    return GradEstimate(value=d, loss_plus=loss_plus, loss_minus=loss_minus, spec=spec, dim=dim)


def spsa_estimate(
    loss_fn: Callable,
    params: np.ndarray,
    spec: PerturbSpec,
    batch,
    z_override: np.ndarray | None = None,
) -> GradEstimate:
    """Two-sided SPSA probe on a raw parameter vector, mutated in place.

    `loss_fn(batch)` must read `params` and be deterministic for fixed values.
    Parameters are restored (within the telescoping tolerance) before
    returning, including when a pass diverges. `z_override` is a testing hook
    that injects a fixed direction instead of the seeded stream.
    """
    return _two_sided_probe(
        loss_fn, batch, spec,
        lambda m: _apply_perturbation([params], spec, m, z_override),
        params.shape[0],
    )


def qspsa_estimate(
    loss_fn: Callable,
    layers: Sequence[QuantLayer] | ScaleSpace,
    spec: PerturbSpec,
    batch,
    include_bias: bool = False,
    z_override: np.ndarray | None = None,
) -> GradEstimate:
    """Two-sided probe over the concatenated quantization scales of `layers`
    (and their biases when `include_bias`); integer weights are never touched.
    """
    space = layers if isinstance(layers, ScaleSpace) else ScaleSpace(layers, include_bias)
    return _two_sided_probe(
        loss_fn, batch, spec, lambda m: space.perturb(spec, m, z_override), space.size
    )
