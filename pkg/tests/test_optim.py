import math

import numpy as np
import pytest

from adderkit.trainer.optim import SGD, OptimConfig, adaptive_rescale, cosine_lr, sgd_step, step_lr
from adderkit.trainer.record import TrainRecord, parse_config
from adderkit.nn import Param


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1, 0.001) == pytest.approx(0.001, abs=1e-15)
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05, abs=1e-15)


def test_cosine_monotone_and_bounded():
    lrs = [cosine_lr(s, 37, 0.2, 0.01) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 0.01 - 1e-15 and max(lrs) <= 0.2


def test_cosine_rejects_overrun():
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)


def test_step_schedule():
    assert [step_lr(s, (3, 6), 1.0) for s in (0, 2, 3, 5, 6, 9)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(base_lr=0)
    with pytest.raises(ValueError):
        OptimConfig(total_steps=0)
    with pytest.raises(ValueError):
        OptimConfig(schedule="linear")
    cfg = OptimConfig()
    assert (cfg.momentum, cfg.weight_decay, cfg.eta) == (0.9, 1e-4, 0.1)


def test_zero_grad_no_decay_is_fixed_point():
    rng = np.random.default_rng(0)
    p = {"a": rng.normal(size=(3, 4)).astype(np.float32), "w": rng.normal(size=(2, 2, 3, 3)).astype(np.float32)}
    before = {k: v.copy() for k, v in p.items()}
    cfg = OptimConfig(weight_decay=0.0)
    state = {}
    for _ in range(5):
        sgd_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state, cfg, 0.1, adder={"w"})
    for k in p:
        assert np.array_equal(p[k], before[k])


def test_single_plain_step():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    g = {"a": np.array([0.5, 0.25, -1.0])}
    cfg = OptimConfig(momentum=0.0, weight_decay=0.0, adaptive_local_lr=False)
    sgd_step(p, g, {}, cfg, 0.1)
    assert np.array_equal(p["a"], np.array([1.0, -2.0, 3.0]) - 0.1 * np.array([0.5, 0.25, -1.0]))


def test_momentum_and_decay_two_steps():
    p = {"a": np.array([2.0])}
    cfg = OptimConfig(momentum=0.5, weight_decay=0.1, adaptive_local_lr=False)
    state = {}
    sgd_step(p, {"a": np.array([1.0])}, state, cfg, 0.1)
    v1 = 1.0 + 0.1 * 2.0
    p1 = 2.0 - 0.1 * v1
    assert p["a"][0] == pytest.approx(p1)
    sgd_step(p, {"a": np.array([1.0])}, state, cfg, 0.1)
    v2 = 0.5 * v1 + 1.0 + 0.1 * p1
    assert p["a"][0] == pytest.approx(p1 - 0.1 * v2)


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e4])
def test_adaptive_norm_fixed(scale):
    g = np.random.default_rng(1).normal(size=(8, 4, 3, 3)) * scale
    r = adaptive_rescale(g, 0.1)
    assert abs(np.linalg.norm(r) - 0.1 * math.sqrt(g.size)) < 1e-5


def test_adaptive_zero_gradient_skipped():
    assert adaptive_rescale(np.zeros((2, 2)), 0.1) is None
    p = {"w": np.ones((2, 2))}
    state = {}
    sgd_step(p, {"w": np.zeros((2, 2))}, state, OptimConfig(), 0.1, adder={"w"})
    assert np.array_equal(p["w"], np.ones((2, 2))) and "w" not in state


def test_adaptive_update_invariant_to_gradient_scale():
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=(4, 2, 3, 3))
    g = rng.normal(size=w0.shape)
    outs = []
    for s in (1.0, 10.0):
        p = {"w": w0.copy()}
        sgd_step(p, {"w": g * s}, {}, OptimConfig(), 0.05, adder={"w"})
        outs.append(p["w"])
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-12, atol=1e-12)


def test_adaptive_only_for_adder_names():
    g = np.full((2, 2), 3.0)
    p = {"w": np.zeros((2, 2))}
    cfg = OptimConfig(momentum=0, weight_decay=0)
    sgd_step(p, {"w": g}, {}, cfg, 1.0)
    assert np.array_equal(p["w"], -g)


def test_non_finite_gradient_names_layer():
    p = {"block.filter.weight": np.zeros(3)}
    with pytest.raises(FloatingPointError, match="block.filter.weight"):
        sgd_step(p, {"block.filter.weight": np.array([0, np.nan, 0])}, {}, OptimConfig(), 0.1)


def test_sgd_binds_params():
    w = Param(np.ones(3, np.float32), adder=False)
    w.grad[:] = 1
    opt = SGD([("w", w)], OptimConfig(base_lr=0.5, momentum=0, weight_decay=0, total_steps=2))
    assert opt.step() == 0.5
    np.testing.assert_allclose(w.value, 0.5)
    opt.zero_grad()
    assert not w.grad.any()


def test_record_append_only():
    rec = TrainRecord()
    rec.append(0, 1.0, 0.1)
    rec.append(3, 0.5, 0.1)
    with pytest.raises(ValueError):
        rec.append(3, 0.4, 0.1)
    assert rec.final_loss(1) == 0.5


def test_record_csv_columns():
    from adderkit.nn import filter_bn_relu

    m = filter_bn_relu("adder", 2, 3, rng=np.random.default_rng(0))
    rec = TrainRecord()
    x = np.random.default_rng(1).normal(size=(2, 2, 4, 4)).astype(np.float32)
    for s in range(2):
        m.forward(x, True)
        rec.append(s, 1.0 / (s + 1), 0.1, m)
    lines = rec.to_csv().splitlines()
    assert lines[0] == "step,loss,lr,layer,bn_mean_norm,bn_var_norm,weight_l2"
    assert len(lines) == 1 + 2 * 2  # two steps x (bn, filter)
    assert rec.bn_mean_total_variation() > 0


def test_parse_config():
    cfg = parse_config("# comment\nbase_lr = 0.05\nsteps=10\nadaptive=true\nschedule=cosine  # trailing\n\n")
    assert cfg == {"base_lr": 0.05, "steps": 10, "adaptive": True, "schedule": "cosine"}
    with pytest.raises(ValueError, match="line 1"):
        parse_config("oops")
