"""Monte-Carlo verification of the estimator's statistical claims.

For a problem with a known scale gradient, draw many independent seeds,
compute the directional derivative d for each, clip to d', and compare the
per-coordinate mean of d'*z against the analytic gradient at three standard
errors. The same samples feed the variance comparison: the per-coordinate
variance of the clipped estimate must not exceed that of the raw estimate
beyond a three-standard-error allowance (paired, influence-function SE).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .models import Problem
from .rng import derive_seed, normals_at
from .zo import PerturbSpec, ScaleSpace, qspsa_estimate

_VERIFY_TAG = 0x5642

MIN_SAMPLES = 10_000


@dataclass
class VerifyReport:
    problem: str
    samples: int
    clip_threshold: float
    binding_fraction: float
    analytic: np.ndarray
    mc_mean: np.ndarray
    se: np.ndarray
    bias_ok: np.ndarray
    var_raw: np.ndarray
    var_clipped: np.ndarray
    var_allowance: np.ndarray
    var_ok: np.ndarray

    def passed(self, check: str = "both") -> bool:
        bias = bool(self.bias_ok.all())
        var = bool(self.var_ok.all())
        if check == "bias":
            return bias
        if check == "variance":
            return var
        return bias and var

    def render(self) -> str:
        lines = [
            f"problem={self.problem} samples={self.samples} "
            f"clip={self.clip_threshold:.6g} binding={self.binding_fraction:.3f}",
            f"{'coord':>5}{'analytic':>14}{'mc mean':>14}{'3*se':>12}{'bias':>6}"
            f"{'var raw':>14}{'var clip':>14}{'var':>5}",
        ]
        for k in range(self.analytic.shape[0]):
            lines.append(
                f"{k:>5}{self.analytic[k]:>14.6g}{self.mc_mean[k]:>14.6g}"
                f"{3 * self.se[k]:>12.3g}{'ok' if self.bias_ok[k] else 'FAIL':>6}"
                f"{self.var_raw[k]:>14.6g}{self.var_clipped[k]:>14.6g}"
                f"{'ok' if self.var_ok[k] else 'FAIL':>5}"
            )
        lines.append(
            f"unbiasedness: {'pass' if self.bias_ok.all() else 'FAIL'}   "
            f"variance ordering: {'pass' if self.var_ok.all() else 'FAIL'}"
        )
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "problem": self.problem,
            "samples": self.samples,
            "clip_threshold": self.clip_threshold,
            "binding_fraction": self.binding_fraction,
            "analytic": self.analytic.tolist(),
            "mc_mean": self.mc_mean.tolist(),
            "se": self.se.tolist(),
            "bias_ok": self.bias_ok.tolist(),
            "var_raw": self.var_raw.tolist(),
            "var_clipped": self.var_clipped.tolist(),
            "var_allowance": self.var_allowance.tolist(),
            "var_ok": self.var_ok.tolist(),
        }
        return json.dumps(payload, indent=2)


def run_verification(
    problem: Problem, samples: int, clip_threshold, base_seed: int = 0
) -> VerifyReport:
    """Sample `samples` independent estimates and check bias and variance.

    `clip_threshold` is a float, math.inf, or "p90" (the empirical 90th
    percentile of |d| over the drawn samples, so clipping binds on ~10%).
    """
    if samples < MIN_SAMPLES:
        raise ValueError(f"sample count too small: need at least {MIN_SAMPLES}")
    if problem.grad_fn is None:
        raise ValueError(f"no analytic gradient oracle for problem {problem.name!r}")

    space = ScaleSpace(problem.layers, include_bias=problem.include_bias)
    dim = space.size
    analytic = problem.grad_fn()

    seeds = np.empty(samples, dtype=np.uint64)
    d = np.empty(samples)
    for i in range(samples):
        s = derive_seed(base_seed, _VERIFY_TAG, i)
        seeds[i] = s
        spec = PerturbSpec(seed=s, epsilon=problem.epsilon)
        d[i] = qspsa_estimate(problem.loss_fn, space, spec, problem.batch).value

    if isinstance(clip_threshold, str):
        if clip_threshold != "p90":
            raise ValueError(f"unknown clip token {clip_threshold!r}")
        threshold = float(np.percentile(np.abs(d), 90.0))
    else:
        threshold = float(clip_threshold)
    if math.isnan(threshold) or threshold < 0:
        raise ValueError("clip threshold must be non-negative")

    d_clipped = np.clip(d, -threshold, threshold)
    binding = float(np.mean(np.abs(d) > threshold))

    z = np.empty((samples, dim))
    for i in range(samples):
        z[i] = normals_at(int(seeds[i]), 0, dim)

    raw = d[:, None] * z
    clipped = d_clipped[:, None] * z

    mc_mean = clipped.mean(axis=0)
    se = clipped.std(axis=0, ddof=1) / math.sqrt(samples)
    bias_ok = np.abs(mc_mean - analytic) <= 3.0 * se

    var_raw = raw.var(axis=0, ddof=1)
    var_clipped = clipped.var(axis=0, ddof=1)
    # Paired SE of the variance difference via influence functions.
    infl = (clipped - clipped.mean(axis=0)) ** 2 - (raw - raw.mean(axis=0)) ** 2
    se_diff = infl.std(axis=0, ddof=1) / math.sqrt(samples)
    var_allowance = 3.0 * se_diff
    var_ok = var_clipped <= var_raw + var_allowance

    return VerifyReport(
        problem=problem.name,
        samples=samples,
        clip_threshold=threshold,
        binding_fraction=binding,
        analytic=analytic,
        mc_mean=mc_mean,
        se=se,
        bias_ok=bias_ok,
        var_raw=var_raw,
        var_clipped=var_clipped,
        var_allowance=var_allowance,
        var_ok=var_ok,
    )
