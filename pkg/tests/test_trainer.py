import numpy as np
import pytest

from adderkit.checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict
from adderkit.trainer import classify as C
from adderkit.trainer.experiments import bn_stat_variance_experiment
from adderkit.trainer.optim import OptimConfig

SHORT = OptimConfig(base_lr=0.02, total_steps=4)


def test_softmax_ce_gradient():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 2])
    loss, g = C.softmax_cross_entropy(z, y)
    eps = 1e-6
    num = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[i] += eps
        zm[i] -= eps
        num[i] = (C.softmax_cross_entropy(zp, y)[0] - C.softmax_cross_entropy(zm, y)[0]) / (2 * eps)
    np.testing.assert_allclose(g, num, atol=1e-8)
    assert loss == pytest.approx(-np.mean(np.log(np.exp(z) / np.exp(z).sum(1, keepdims=True))[np.arange(4), y]))


def test_bundled_checkpoints_load():
    for arch in ("conv", "adder"):
        m = C.load_pretrained(arch)
        assert m.arch.value == arch
        assert any(n.endswith("running_mean") for n in state_dict(m))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        C.train_toy_classifier("adder", "frozen", cfg=SHORT, checkpoint=tmp_path / "missing.ckpt")


def test_policy_validation():
    with pytest.raises(ValueError):
        C.train_toy_classifier("adder", "sometimes", cfg=SHORT)
    with pytest.raises(ValueError):
        C.train_toy_classifier("adder", "frozen", batch_size=1, cfg=SHORT)


def test_frozen_policy_keeps_stale_stats():
    rec = C.train_toy_classifier("conv", "frozen", cfg=SHORT, seed=3)
    assert rec.bn_mean_total_variation() == 0.0
    model = rec.model
    ref = C.load_pretrained("conv")
    C.inject_stale_stats(ref, 4)
    for (name, a), (_, b) in zip(model.batchnorms(), ref.batchnorms()):
        assert np.array_equal(a.running_mean, b.running_mean), name
        assert np.array_equal(a.running_var, b.running_var), name


def test_unfrozen_policy_moves_stats():
    rec = C.train_toy_classifier("conv", "unfrozen", cfg=SHORT, seed=3)
    assert rec.bn_mean_total_variation() > 0


def test_stale_noise_is_fixed_per_seed():
    a, b = C.load_pretrained("adder"), C.load_pretrained("adder")
    C.inject_stale_stats(a, 9)
    C.inject_stale_stats(b, 9)
    clean = C.load_pretrained("adder")
    for (_, x), (_, y), (_, z) in zip(a.batchnorms(), b.batchnorms(), clean.batchnorms()):
        assert np.array_equal(x.running_mean, y.running_mean)
        assert not np.array_equal(x.running_var, z.running_var)


def test_training_is_bit_reproducible():
    runs = [C.train_toy_classifier("adder", "unfrozen", cfg=SHORT, seed=11) for _ in range(2)]
    assert runs[0].loss == runs[1].loss
    assert runs[0].to_csv() == runs[1].to_csv()
    other = C.train_toy_classifier("adder", "unfrozen", cfg=SHORT, seed=12)
    assert other.loss != runs[0].loss


def test_checkpoint_round_trip(tmp_path):
    m = C.ToyClassifier("adder", 4, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 3, 16, 16)).astype(np.float32)
    m.forward(x, True)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state_dict(m))
    loaded = load_checkpoint(path)
    for k, v in state_dict(m).items():
        assert np.array_equal(loaded[k], v), k
    m2 = C.ToyClassifier("adder", 4, np.random.default_rng(5))
    load_state_dict(m2, loaded)
    np.testing.assert_array_equal(m.forward(x, False), m2.forward(x, False))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE\n\n")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.ckpt", {"a b": np.zeros(2)})
    m = C.ToyClassifier("conv", 4, np.random.default_rng(0))
    sd = state_dict(m)
    sd.pop(next(iter(sd)))
    with pytest.raises(KeyError):
        load_state_dict(m, sd)


def test_bn_std_decreases_with_batch_size():
    rows = dict(bn_stat_variance_experiment([2, 8, 32]))
    assert rows[2] > rows[8] > rows[32]


def test_bn_std_ratio_matches_standard_error():
    rows = dict(bn_stat_variance_experiment([2, 32], n_batches=4000))
    assert rows[2] / rows[32] == pytest.approx(4.0, rel=0.3)


def test_bn_std_constant_data():
    rows = bn_stat_variance_experiment([2, 8, 32], data=np.full((256, 4), 3.5), n_batches=50)
    assert all(std == 0 for _, std in rows)


def test_bn_std_rejects_bad_batch():
    with pytest.raises(ValueError):
        bn_stat_variance_experiment([0])


@pytest.fixture(scope="module")
def unfrozen_pair():
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return {arch: C.train_toy_classifier(arch, "unfrozen", seed=0) for arch in ("conv", "adder")}


@pytest.mark.slow
def test_adder_unfrozen_loss_halves(unfrozen_pair):
    rec = unfrozen_pair["adder"]
    assert rec.final_loss() < 0.5 * rec.loss[0]


@pytest.mark.slow
def test_adder_bn_mean_moves_more_than_conv(unfrozen_pair):
    assert unfrozen_pair["adder"].bn_mean_total_variation() > unfrozen_pair["conv"].bn_mean_total_variation()


@pytest.mark.slow
def test_conv_twin_detector_f1():
    from threadpoolctl import threadpool_limits

    from adderkit.trainer import detect as D

    with threadpool_limits(1):
        res = D.train_toy_detector("fpn", "conv", D.detector_config(1200), seed=0, pretrained=False)
    assert res.f1 >= 0.8, res.f1
