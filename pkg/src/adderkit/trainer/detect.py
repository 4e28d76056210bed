"""Toy anchor-free detector: 3-level backbone, a fusion neck, FCOS-style head.

Levels sit at strides 8/16/32 (8x8, 4x4, 2x2 on 64x64 inputs). The stem is
two conv layers; the three pyramid blocks and the neck use the chosen filter
kind. The head is a conv tower shared across levels that predicts class
logits and four side distances, mapped through ``stride * softplus`` so they
are never negative. Centerness is omitted.

The backbone starts from a bundled checkpoint pretrained on single-object
colour classification. Adder blocks trained from scratch on detection fall
into a dead-ReLU state at object locations and never learn colour.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import load_checkpoint, load_state_dict, save_checkpoint, state_dict
from ..layers import FilterKind
from ..necks import Neck, NeckKind, build_neck
from ..nn import Filter, GlobalAvgPool, Module, ReLU, Sequential, filter_bn_relu
from ..tensor import DTYPE
from .classify import softmax_cross_entropy
from .data import batches, make_shapes
from .optim import SGD, OptimConfig
from .record import TrainRecord

STRIDES = (8, 16, 32)
CHANNELS = (16, 32, 32)
NECK_WIDTH = 16
CLASSES = 3
# objects with sqrt(w*h) below these bounds go to P3, then P4; the rest to P5
SIZE_BOUNDS = (16.5, 21.0)
CENTER_RADIUS = 1.5
PRIOR = 0.01
SCORE_THRESHOLD = 0.3
NMS_IOU = 0.5
MATCH_IOU = 0.5
TRAIN_SEED, TEST_SEED, PRETRAIN_SEED = 7, 8, 99
N_TRAIN, N_TEST = 2048, 128


class Backbone(Module):
    def __init__(self, kind, rng, grad_mode=None):
        kind = FilterKind(kind)
        self.stem = Sequential(
            filter_bn_relu(FilterKind.CONV, 3, 8, stride=2, rng=rng),
            filter_bn_relu(FilterKind.CONV, 8, 16, stride=2, rng=rng),
            names=["conv1", "conv2"],
        )
        c3, c4, c5 = CHANNELS
        self.blocks = [
            filter_bn_relu(kind, 16, c3, stride=2, rng=rng, grad_mode=grad_mode),
            filter_bn_relu(kind, c3, c4, stride=2, rng=rng, grad_mode=grad_mode),
            filter_bn_relu(kind, c4, c5, stride=2, rng=rng, grad_mode=grad_mode),
        ]

    def forward(self, x, training=True):
        h = self.stem.forward(x, training)
        feats = []
        for b in self.blocks:
            h = b.forward(h, training)
            feats.append(h)
        return feats

    def backward(self, grads):
        g = grads[-1]
        for i in range(len(self.blocks) - 1, -1, -1):
            g = self.blocks[i].backward(g)
            if i > 0:
                g = g + grads[i - 1]
        return self.stem.backward(g)

    def named_params(self, prefix=""):
        out = self.stem.named_params(prefix + "stem.")
        for i, b in enumerate(self.blocks):
            out += b.named_params(f"{prefix}block{i + 3}.")
        return out

    def batchnorms(self, prefix=""):
        out = self.stem.batchnorms(prefix + "stem.")
        for i, b in enumerate(self.blocks):
            out += b.batchnorms(f"{prefix}block{i + 3}.")
        return out


class Head(Module):
    """Shared conv tower; one set of weights, one call site per level."""

    def __init__(self, width, classes, levels, rng):
        tower = Filter.create(FilterKind.CONV, width, width, bias=True, rng=rng)
        cls = Filter.create(FilterKind.CONV, width, classes, bias=True, rng=rng)
        reg = Filter.create(FilterKind.CONV, width, 4, bias=True, rng=rng)
        for f in (cls, reg):
            f.weight.value *= 0.1
        cls.bias.value[:] = -np.log((1 - PRIOR) / PRIOR)
        self.master = (tower, cls, reg)
        self.sites = [
            (tower.shared(), ReLU(), cls.shared(), reg.shared()) if i else (tower, ReLU(), cls, reg)
            for i in range(levels)
        ]
        self.classes = classes

    def forward(self, feats, training=True):
        out = []
        for (tower, act, cls, reg), f in zip(self.sites, feats):
            h = act.forward(tower.forward(f))
            out.append((cls.forward(h), reg.forward(h)))
        return out

    def backward(self, grads):
        gx = []
        for (tower, act, cls, reg), (gc, gr) in zip(self.sites, grads):
            gh = cls.backward(gc) + reg.backward(gr)
            gx.append(tower.backward(act.backward(gh)))
        return gx

    def named_params(self, prefix=""):
        out = []
        for name, f in zip(("tower", "cls", "reg"), self.master):
            out += f.named_params(f"{prefix}{name}.")
        return out


class ToyDetector(Module):
    def __init__(self, neck_kind, backbone_kind, seed=0, neck_filter=None, grad_mode=None):
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(backbone_kind, rng, grad_mode)
        nk = FilterKind(neck_filter or backbone_kind)
        self.graph = build_neck(NeckKind(neck_kind), 3, CHANNELS, NECK_WIDTH, nk, rng=rng, grad_mode=grad_mode)
        self.neck = Neck(self.graph)
        self.head = Head(NECK_WIDTH, CLASSES, 3, rng)

    def forward(self, x, training=True):
        return self.head.forward(self.neck.forward(self.backbone.forward(x, training), training), training)

    def backward(self, grads):
        return self.backbone.backward(self.neck.backward(self.head.backward(grads)))

    def named_params(self, prefix=""):
        return (
            self.backbone.named_params(prefix + "backbone.")
            + self.neck.named_params(prefix + "neck.")
            + self.head.named_params(prefix + "head.")
        )

    def batchnorms(self, prefix=""):
        return self.backbone.batchnorms(prefix + "backbone.") + self.neck.batchnorms(prefix + "neck.")


def softplus(z):
    return np.logaddexp(0, z)


def sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def decode_distances(raw, stride):
    """Non-negative side distances in pixels from raw regression outputs."""
    return stride * softplus(raw.astype(np.float64))


def locations(h, w, stride):
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs + 0.5) * stride, (ys + 0.5) * stride


def level_of(box) -> int:
    size = np.sqrt((box[2] - box[0]) * (box[3] - box[1]))
    return int(np.searchsorted(SIZE_BOUNDS, size, side="right"))


def build_targets(sample, shapes):
    """Per level: class map (H, W) with -1 for background, and distances (H, W, 4).

    Each object is assigned to one level by size. Positives are locations
    inside the box and within ``CENTER_RADIUS`` strides of its centre; if
    none qualify, the location nearest the centre is used. Overlaps go to
    the smaller box.
    """
    out = []
    for lvl, ((h, w), s) in enumerate(zip(shapes, STRIDES)):
        cls = np.full((h, w), -1)
        dist = np.zeros((h, w, 4))
        area = np.full((h, w), np.inf)
        cx, cy = locations(h, w, s)
        for box, label in zip(sample.boxes, sample.labels):
            if level_of(box) != lvl:
                continue
            x0, y0, x1, y1 = box
            bx, by = (x0 + x1) / 2, (y0 + y1) / 2
            d = np.stack([cx - x0, cy - y0, x1 - cx, y1 - cy], axis=-1)
            r = CENTER_RADIUS * s
            pos = (d.min(axis=-1) > 0) & (np.abs(cx - bx) <= r) & (np.abs(cy - by) <= r)
            if not pos.any():
                iy = min(int(by // s), h - 1)
                ix = min(int(bx // s), w - 1)
                pos[iy, ix] = True
                d[iy, ix] = np.maximum(d[iy, ix], 0.5)
            a = (x1 - x0) * (y1 - y0)
            pos &= a < area
            cls[pos], dist[pos], area[pos] = label, d[pos], a
        out.append((cls, dist))
    return out


def focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss summed over all entries, with its gradient."""
    z = logits.astype(np.float64)
    p = sigmoid(z)
    log_p, log_1p = -softplus(-z), -softplus(z)
    t = targets.astype(bool)
    loss = np.where(t, -alpha * (1 - p) ** gamma * log_p, -(1 - alpha) * p ** gamma * log_1p)
    grad = np.where(
        t,
        alpha * (1 - p) ** gamma * (gamma * p * log_p + p - 1),
        (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log_1p),
    )
    return float(loss.sum()), grad


def iou_loss(pred, target):
    """``-log IoU`` of boxes given as side distances from a shared point.

    ``pred`` and ``target`` are (..., 4) positive arrays (left, top, right,
    bottom). Returns per-box losses and the gradient w.r.t. ``pred``.
    """
    l, t, r, b = np.moveaxis(pred, -1, 0)
    lg, tg, rg, bg = np.moveaxis(target, -1, 0)
    wi = np.minimum(l, lg) + np.minimum(r, rg)
    hi = np.minimum(t, tg) + np.minimum(b, bg)
    inter = wi * hi
    union = (l + r) * (t + b) + (lg + rg) * (tg + bg) - inter
    loss = np.log(union) - np.log(inter)
    grads = []
    for side, ref, cross, span in ((l, lg, hi, t + b), (t, tg, wi, l + r), (r, rg, hi, t + b), (b, bg, wi, l + r)):
        d_inter = cross * (side < ref)
        grads.append((span - d_inter) / union - d_inter / inter)
    return loss, np.stack(grads, axis=-1)


def detection_loss(outputs, targets_batch):
    """Focal classification plus IoU loss on the positive locations.

    Both terms are normalized by the number of positive locations.
    """
    n_pos = sum(int((t[lvl][0] >= 0).sum()) for t in targets_batch for lvl in range(len(outputs)))
    norm = max(1, n_pos)
    total, grads = 0.0, []
    for lvl, (cls_out, reg_out) in enumerate(outputs):
        s = STRIDES[lvl]
        cls_t = np.stack([t[lvl][0] for t in targets_batch])  # (N, H, W)
        dist_t = np.stack([t[lvl][1] for t in targets_batch])  # (N, H, W, 4)
        onehot = np.zeros(cls_out.shape, bool)
        n_idx, y_idx, x_idx = np.nonzero(cls_t >= 0)
        onehot[n_idx, cls_t[n_idx, y_idx, x_idx], y_idx, x_idx] = True
        fl, gc = focal_loss(cls_out, onehot)
        raw = reg_out.astype(np.float64).transpose(0, 2, 3, 1)  # (N, H, W, 4)
        pos = cls_t >= 0
        gr = np.zeros_like(raw)
        rl = 0.0
        if pos.any():
            per_box, g_pred = iou_loss(softplus(raw[pos]), dist_t[pos] / s)
            rl = float(per_box.sum())
            gr[pos] = g_pred * sigmoid(raw[pos])
        total += (fl + rl) / norm
        grads.append(((gc / norm).astype(DTYPE), (gr.transpose(0, 3, 1, 2) / norm).astype(DTYPE)))
    return total, grads


def box_iou(a, b):
    """Pairwise IoU of (n, 4) and (m, 4) boxes."""
    a, b = np.asarray(a, np.float64).reshape(-1, 4), np.asarray(b, np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=-1)
    area_a = (a[:, 2:] - a[:, :2]).prod(axis=-1)
    area_b = (b[:, 2:] - b[:, :2]).prod(axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes, scores, iou=NMS_IOU):
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        order = rest[box_iou(boxes[i], boxes[rest])[0] < iou]
    return np.asarray(keep, int)


def decode(outputs, index, threshold=SCORE_THRESHOLD):
    """Detections for one image: (boxes (k, 4), scores (k,), labels (k,)).

    Each location keeps only its best class; overlapping boxes are then
    suppressed regardless of class.
    """
    boxes, scores, labels = [], [], []
    for lvl, (cls_out, reg_out) in enumerate(outputs):
        s = STRIDES[lvl]
        prob = sigmoid(cls_out[index].astype(np.float64))  # (K, H, W)
        best, score = prob.argmax(axis=0), prob.max(axis=0)
        dist = decode_distances(reg_out[index], s)  # (4, H, W)
        cx, cy = locations(prob.shape[1], prob.shape[2], s)
        y, x = np.nonzero(score > threshold)
        l, t, r, b = dist[:, y, x]
        boxes.append(np.stack([cx[y, x] - l, cy[y, x] - t, cx[y, x] + r, cy[y, x] + b], axis=-1))
        scores.append(score[y, x])
        labels.append(best[y, x])
    boxes, scores, labels = np.concatenate(boxes), np.concatenate(scores), np.concatenate(labels)
    keep = nms(boxes, scores)
    return boxes[keep].reshape(-1, 4), scores[keep], labels[keep]


def match_counts(pred_boxes, pred_scores, pred_labels, gt_boxes, gt_labels, iou=MATCH_IOU):
    """Greedy score-ordered matching; returns (tp, fp, fn)."""
    used = np.zeros(len(gt_boxes), bool)
    tp = 0
    ious = box_iou(pred_boxes, gt_boxes) if len(pred_boxes) and len(gt_boxes) else None
    for i in np.argsort(-pred_scores, kind="stable"):
        if ious is None:
            break
        cand = (~used) & (gt_labels == pred_labels[i]) & (ious[i] >= iou)
        if cand.any():
            j = int(np.argmax(np.where(cand, ious[i], -1)))
            used[j] = True
            tp += 1
    return tp, len(pred_boxes) - tp, len(gt_boxes) - tp


def f1_score(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class DetectionResult:
    record: TrainRecord
    f1: float
    tp: int
    fp: int
    fn: int


def detector_config(total_steps: int = 600) -> OptimConfig:
    return OptimConfig(base_lr=0.05, total_steps=total_steps)


def evaluate(model: ToyDetector, samples, batch_size=32):
    tp = fp = fn = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        outputs = model.forward(np.stack([s.image for s in chunk]), training=False)
        for j, s in enumerate(chunk):
            a, b, c = match_counts(*decode(outputs, j), s.boxes, s.labels)
            tp, fp, fn = tp + a, fp + b, fn + c
    return tp, fp, fn


def pretrain_backbone(arch: str, seed: int = 0, steps: int = 300, batch_size: int = 32, n_images: int = 2048):
    """Backbone + pooled linear classifier trained to name the colour of a single shape."""
    data = make_shapes(n_images, PRETRAIN_SEED, max_objects=1)
    x_all = np.stack([s.image for s in data])
    y_all = np.array([s.labels[0] for s in data])
    rng = np.random.default_rng(seed)
    backbone = Backbone(arch, rng)
    pool = GlobalAvgPool()
    fc = Filter.create(FilterKind.CONV, CHANNELS[-1], CLASSES, kernel=1, bias=True, rng=rng)
    cfg = OptimConfig(base_lr=0.05, total_steps=steps)
    opt = SGD(backbone.named_params() + fc.named_params("fc."), cfg)
    rec = TrainRecord()
    for step in range(steps):
        idx = rng.integers(0, n_images, batch_size)
        opt.zero_grad()
        feats = backbone.forward(x_all[idx], True)
        loss, g = softmax_cross_entropy(fc.forward(pool.forward(feats[-1]))[:, :, 0, 0], y_all[idx])
        g_top = pool.backward(fc.backward(g[:, :, None, None].astype(DTYPE)))
        backbone.backward([np.zeros_like(f) for f in feats[:-1]] + [g_top])
        rec.append(step, loss, cfg.lr_at(step))
        opt.step()
    return backbone, rec


def backbone_checkpoint_path(arch: str) -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "checkpoints" / f"det_backbone_{FilterKind(arch).value}.ckpt"


def write_backbone_checkpoints(out_dir=None):
    paths = []
    for arch in ("conv", "adder"):
        backbone, rec = pretrain_backbone(arch)
        path = Path(out_dir) / backbone_checkpoint_path(arch).name if out_dir else backbone_checkpoint_path(arch)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, state_dict(backbone))
        paths.append((path, rec.final_loss()))
    return paths


def train_toy_detector(
    neck_kind="rpafpn",
    backbone_kind="adder",
    cfg: OptimConfig | None = None,
    seed: int = 0,
    batch_size: int = 16,
    neck_filter=None,
    n_train: int = N_TRAIN,
    n_test: int = N_TEST,
    grad_mode=None,
    backbone_checkpoint=None,
    pretrained: bool = True,
) -> DetectionResult:
    """Fine-tune on the shapes set and report F1 at IoU 0.5 on a held-out split.

    ``seed`` drives neck and head init and batch order; the backbone comes
    from the pretrained checkpoint unless ``pretrained`` is false.
    """
    cfg = cfg or detector_config()
    try:
        train = make_shapes(n_train, TRAIN_SEED)
        test = make_shapes(n_test, TEST_SEED)
    except (RuntimeError, ValueError) as exc:
        raise RuntimeError(f"shapes dataset generation failed: {exc}") from exc
    model = ToyDetector(neck_kind, backbone_kind, seed, neck_filter, grad_mode)
    if pretrained:
        path = Path(backbone_checkpoint) if backbone_checkpoint else backbone_checkpoint_path(backbone_kind)
        if not path.exists():
            raise FileNotFoundError(f"pretrained backbone checkpoint not found: {path}")
        load_state_dict(model.backbone, load_checkpoint(path))
    shapes = [(64 // s, 64 // s) for s in STRIDES]
    targets = [build_targets(s, shapes) for s in train]
    rng = np.random.default_rng(seed + 10_000)
    opt = SGD(model.named_params(), cfg)
    rec = TrainRecord()
    step = 0
    while step < cfg.total_steps:
        for idx in batches(len(train), batch_size, rng):
            if step >= cfg.total_steps:
                break
            x = np.stack([train[i].image for i in idx])
            opt.zero_grad()
            loss, grads = detection_loss(model.forward(x, True), [targets[i] for i in idx])
            model.backward(grads)
            rec.append(step, loss, cfg.lr_at(step), model)
            opt.step()
            step += 1
    tp, fp, fn = evaluate(model, test)
    f1 = f1_score(tp, fp, fn)
    rec.metrics.update(f1=f1, tp=tp, fp=fp, fn=fn)
    rec.model = model
    return DetectionResult(rec, f1, tp, fp, fn)

