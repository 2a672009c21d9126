import math

import numpy as np
import pytest

from qzo.optim import TrainConfig, schedule_lr, zo_sgd_step
from qzo.rng import SeededNormalStream, normals_at
from qzo.zo import PerturbSpec


def test_config_defaults_match_reference_recipe():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-7
    assert cfg.steps == 20000
    assert cfg.batch_size == 16
    assert cfg.epsilon == 1e-3
    assert cfg.clip_threshold == 100.0
    assert cfg.lr_schedule == "constant"


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_threshold=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="cosine")
    TrainConfig(clip_threshold=math.inf)  # sentinel for clipping disabled


def test_schedule_constant():
    cfg = TrainConfig(steps=100)
    assert schedule_lr(cfg, 1) == 1e-7
    assert schedule_lr(cfg, 100) == 1e-7


def test_schedule_linear():
    cfg = TrainConfig(learning_rate=1e-7, steps=20000, lr_schedule="linear-decay")
    assert schedule_lr(cfg, 1) == 1e-7
    assert schedule_lr(cfg, 10001) == pytest.approx(5e-8, rel=1e-15)
    assert schedule_lr(cfg, 20000) > 0.0


def test_schedule_step_range_checked():
    cfg = TrainConfig(steps=10)
    with pytest.raises(ValueError):
        schedule_lr(cfg, 0)
    with pytest.raises(ValueError):
        schedule_lr(cfg, 11)


def test_zero_clipped_derivative_is_a_bitwise_noop():
    params = normals_at(1, 0, 32).copy()
    before = params.copy()
    zo_sgd_step(params, 0.0, PerturbSpec(seed=4, epsilon=1e-3), 0.1,
                nonneg_mask=np.zeros(32, dtype=bool))
    assert np.array_equal(params, before)


def test_masked_projection_to_zero():
    spec = PerturbSpec(seed=6, epsilon=1e-3)
    z0 = SeededNormalStream(6).normals(1)[0]
    # craft lr*d so the update magnitude is exactly 0.02 against a 0.01 scale
    params = np.array([0.01])
    zo_sgd_step(params, 0.02 / z0, spec, 1.0, nonneg_mask=np.array([True]))
    assert params[0] == 0.0


def test_unmasked_coordinate_goes_negative():
    spec = PerturbSpec(seed=6, epsilon=1e-3)
    z0 = SeededNormalStream(6).normals(1)[0]
    params = np.array([0.01])
    zo_sgd_step(params, 0.02 / z0, spec, 1.0, nonneg_mask=np.array([False]))
    assert params[0] == pytest.approx(-0.01, rel=1e-12)


def test_opposite_steps_cancel_within_ulps():
    # parameters bounded away from zero with updates well below their size,
    # so the subtract/add pair cancels to the last couple of bits
    params = np.abs(normals_at(9, 0, 40)) + 0.5
    before = params.copy()
    spec = PerturbSpec(seed=10, epsilon=1e-3)
    zo_sgd_step(params, 1.3, spec, 0.01)
    zo_sgd_step(params, -1.3, spec, 0.01)
    assert np.all(np.abs(params - before) <= 2 * np.spacing(np.abs(before)))


def test_step_is_replayable():
    a = np.linspace(0.1, 1.0, 16)
    b = a.copy()
    spec = PerturbSpec(seed=12, epsilon=1e-3)
    mask = np.arange(16) % 2 == 0
    zo_sgd_step(a, 1.5, spec, 0.2, mask)
    zo_sgd_step(b, 1.5, spec, 0.2, mask)
    assert np.array_equal(a, b)


def test_masked_scales_stay_non_negative():
    for seed in range(20):
        params = np.abs(normals_at(seed, 0, 24)) * 0.01
        mask = np.ones(24, dtype=bool)
        spec = PerturbSpec(seed=seed, epsilon=1e-3)
        zo_sgd_step(params, 50.0, spec, 0.01, mask)
        assert params.min() >= 0.0


def test_non_finite_update_rejected():
    params = np.ones(4)
    with pytest.raises(ValueError):
        zo_sgd_step(params, math.inf, PerturbSpec(seed=1, epsilon=1e-3), 1.0)


def test_descent_on_convex_toy_problem():
    # median loss over the last 10% of steps beats the first 10%, five seeds
    from qzo.models import mse_problem
    from qzo.rng import derive_seed
    from qzo.zo import ScaleSpace, clip_directional, qspsa_estimate

    for master in range(5):
        prob = mse_problem(0)
        space = ScaleSpace(prob.layers)
        losses = []
        for t in range(1, 401):
            spec = PerturbSpec(seed=derive_seed(master, 0x44, t), epsilon=1e-3)
            est = qspsa_estimate(prob.loss_fn, space, spec, prob.batch)
            d = clip_directional(est.value, 100.0)
            vec = space.gather()
            zo_sgd_step(vec, d, spec, 1e-4, space.nonneg_mask)
            space.scatter(vec)
            losses.append(est.loss_plus)
        assert np.median(losses[-40:]) < np.median(losses[:40])
