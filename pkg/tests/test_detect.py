import numpy as np
import pytest

from adderkit.trainer import detect as D
from adderkit.trainer.data import make_shapes, ClusterTask, batches


def _fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def test_focal_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    z = rng.normal(0, 2, (2, 3, 2, 2))
    t = rng.random(z.shape) < 0.3
    _, g = D.focal_loss(z, t)
    np.testing.assert_allclose(g, _fd(lambda v: D.focal_loss(v, t)[0], z), rtol=1e-5, atol=1e-8)


def test_iou_loss_gradient_and_value():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.3, 2.0, (6, 4))
    target = rng.uniform(0.3, 2.0, (6, 4))
    loss, g = D.iou_loss(pred, target)
    num = _fd(lambda v: D.iou_loss(v, target)[0].sum(), pred)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-7)
    same, _ = D.iou_loss(target, target)
    np.testing.assert_allclose(same, 0, atol=1e-12)


def test_iou_loss_matches_box_iou():
    pred = np.array([[1.0, 2.0, 3.0, 1.0]])
    target = np.array([[2.0, 1.0, 1.0, 2.0]])
    loss, _ = D.iou_loss(pred, target)
    a = [-1.0, -2.0, 3.0, 1.0]
    b = [-2.0, -1.0, 1.0, 2.0]
    assert loss[0] == pytest.approx(-np.log(D.box_iou(a, b)[0, 0]))


def test_distances_non_negative():
    raw = np.array([-50.0, -1.0, 0.0, 3.0, 80.0])
    d = D.decode_distances(raw, 16)
    assert np.all(d >= 0) and np.all(np.isfinite(d))


def test_box_iou_and_nms():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], float)
    iou = D.box_iou(boxes, boxes)
    np.testing.assert_allclose(np.diag(iou), 1)
    assert iou[0, 1] == pytest.approx(81 / 100)
    assert iou[0, 2] == 0
    keep = D.nms(boxes, np.array([0.5, 0.9, 0.1]))
    assert list(keep) == [1, 2]


def test_match_counts_and_f1():
    gt = np.array([[0, 0, 10, 10], [20, 20, 30, 30]], float)
    labels = np.array([0, 1])
    pred = np.array([[0, 0, 10, 10], [0, 0, 10, 9], [20, 20, 30, 30]], float)
    tp, fp, fn = D.match_counts(pred, np.array([0.9, 0.8, 0.7]), np.array([0, 0, 2]), gt, labels)
    assert (tp, fp, fn) == (1, 2, 1)
    assert D.f1_score(tp, fp, fn) == pytest.approx(2 / 5)
    assert D.f1_score(0, 0, 0) == 1.0
    assert D.match_counts(np.zeros((0, 4)), np.zeros(0), np.zeros(0, int), gt, labels) == (0, 0, 2)


def test_targets_assign_every_object_once():
    samples = make_shapes(40, 3)
    shapes = [(8, 8), (4, 4), (2, 2)]
    for s in samples:
        tg = D.build_targets(s, shapes)
        for lvl, (cls, dist) in enumerate(tg):
            pos = cls >= 0
            assert np.all(dist[pos] > 0)
            assert np.all(dist[~pos] == 0)
        n_pos = sum(int((c >= 0).sum()) for c, _ in tg)
        assert n_pos >= 1


def test_level_assignment_by_size():
    assert D.level_of([0, 0, 12, 12]) == 0
    assert D.level_of([0, 0, 18, 18]) == 1
    assert D.level_of([0, 0, 26, 26]) == 2


def test_shapes_dataset_contract():
    a = make_shapes(20, 5)
    b = make_shapes(20, 5)
    for s, t in zip(a, b):
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert 1 <= len(s.boxes) <= 3 and set(s.labels) <= {0, 1, 2}
        assert np.all(s.boxes[:, :2] >= 0) and np.all(s.boxes[:, 2:] <= 64)
        assert np.array_equal(s.image, t.image) and np.array_equal(s.boxes, t.boxes)
    with pytest.raises(ValueError):
        make_shapes(2, 0, size=16)


def test_cluster_task_and_batches():
    task = ClusterTask.make(1)
    x, y = task.sample(10, np.random.default_rng(0))
    assert x.shape == (10, 3, 16, 16) and y.shape == (10,)
    idx = list(batches(10, 4, np.random.default_rng(0)))
    assert [len(i) for i in idx] == [4, 4]
    assert len(set(np.concatenate(idx))) == 8


def test_detector_forward_backward_shapes():
    model = D.ToyDetector("rpafpn", "adder", seed=0)
    x = make_shapes(2, 0)
    out = model.forward(np.stack([s.image for s in x]), True)
    assert [o[0].shape for o in out] == [(2, 3, 8, 8), (2, 3, 4, 4), (2, 3, 2, 2)]
    assert [o[1].shape for o in out] == [(2, 4, 8, 8), (2, 4, 4, 4), (2, 4, 2, 2)]
    targets = [D.build_targets(s, [(8, 8), (4, 4), (2, 2)]) for s in x]
    loss, grads = D.detection_loss(out, targets)
    assert np.isfinite(loss)
    gx = model.backward(grads)
    assert gx.shape == (2, 3, 64, 64)
    names = [n for n, _ in model.named_params()]
    assert len(names) == len(set(names))
    assert sum(n.startswith("head.") for n in names) == 6  # shared tower/cls/reg weights and biases


def test_detection_loss_gradient_finite_difference():
    rng = np.random.default_rng(4)
    x = make_shapes(1, 11)
    targets = [D.build_targets(s, [(8, 8), (4, 4), (2, 2)]) for s in x]
    outs = [(rng.normal(size=(1, 3, h, h)), rng.normal(size=(1, 4, h, h))) for h in (8, 4, 2)]
    _, grads = D.detection_loss(outs, targets)
    for lvl in range(3):
        for k in range(2):
            def f(v, lvl=lvl, k=k):
                o = [list(p) for p in outs]
                o[lvl][k] = v
                return D.detection_loss([tuple(p) for p in o], targets)[0]
            num = _fd(f, outs[lvl][k].copy())
            np.testing.assert_allclose(grads[lvl][k], num, rtol=1e-3, atol=1e-6)


def test_missing_backbone_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.train_toy_detector("fpn", "conv", D.detector_config(1), backbone_checkpoint=tmp_path / "nope.ckpt")
