"""Multi-scale fusion necks as explicit node graphs: FPN, PAFPN, PAFPN with
shortcuts, and R-PAFPN (bottom-up pass first, then top-down).

Wiring used by all builders:

* ``Lateral1x1``: 1x1 filter projecting backbone level ``i`` to width ``C``, + BN + ReLU.
* ``UpsampleAdd``: ``a + upsample2x(b)`` where ``b`` is the coarser level.
* ``DownsampleAdd``: ``a + relu(bn(filter_s2(b)))`` where ``b`` is the finer level.
* ``Fuse3x3``: ``relu(bn(filter(a)) [+ a])``; the ``+ a`` skip when ``has_residual``.
* ``Identity``: marks the node that produces an output level.
* ``Extra3x3S2``: optional extra coarse levels from the top output.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .gradients import GradMode
from .layers import FilterKind
from .nn import Module, Upsample2x, filter_bn_relu


class NeckKind(str, Enum):
    FPN = "fpn"
    PAFPN = "pafpn"
    PAFPN_SHORTCUT = "pafpn_shortcut"
    RPAFPN = "rpafpn"


LATERAL, FUSE, UP_ADD, DOWN_ADD, IDENTITY, EXTRA = (
    "Lateral1x1", "Fuse3x3", "UpsampleAdd", "DownsampleAdd", "Identity", "Extra3x3S2",
)


@dataclass
class Node:
    id: str
    kind: str
    filter_kind: FilterKind | None
    has_residual: bool
    inputs: list[str]
    level: int
    block: Module | None = None


@dataclass
class FusionGraph:
    kind: NeckKind
    nodes: list[Node]
    levels: int
    width: int
    first_level: int = 3
    in_channels: tuple = ()
    outputs: list[str] = field(default_factory=list)

    def node(self, node_id) -> Node:
        return self._by_id()[node_id]

    def _by_id(self):
        return {n.id: n for n in self.nodes}

    def sources(self) -> list[str]:
        return [self.level_name(i, "C") for i in range(self.levels)]

    def level_name(self, i, prefix="P") -> str:
        return f"{prefix}{self.first_level + i}"

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.id) for n in self.nodes for src in n.inputs]

    def topological_order(self) -> list[str]:
        """Kahn's algorithm; ties broken by construction order."""
        pos = {n.id: i for i, n in enumerate(self.nodes)}
        indeg = {n.id: sum(1 for s in n.inputs if s in pos) for n in self.nodes}
        children = defaultdict(list)
        for src, dst in self.edges:
            if src in pos:
                children[src].append(dst)
        ready = sorted((i for i, d in indeg.items() if d == 0), key=pos.get)
        order = []
        while ready:
            cur = ready.pop(0)
            order.append(cur)
            for ch in children[cur]:
                indeg[ch] -= 1
                if indeg[ch] == 0:
                    ready.append(ch)
            ready.sort(key=pos.get)
        if len(order) != len(self.nodes):
            raise ValueError("fusion graph has a cycle")
        return order

    def ancestors(self, node_id) -> set[str]:
        by_id = self._by_id()
        seen, stack = set(), list(by_id[node_id].inputs)
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            if cur in by_id:
                stack.extend(by_id[cur].inputs)
        return seen

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids) | set(self.sources())
        for n in self.nodes:
            for src in n.inputs:
                if src not in known:
                    raise ValueError(f"node {n.id} reads unknown input {src}")
        self.topological_order()
        producers = defaultdict(list)
        for n in self.nodes:
            if n.kind == IDENTITY or n.kind == EXTRA:
                producers[n.level].append(n.id)
        n_out = len(self.outputs)
        for lvl in range(n_out):
            if len(producers[lvl]) != 1:
                raise ValueError(f"output level {lvl} has producers {producers[lvl]}")
        if self.kind in (NeckKind.PAFPN_SHORTCUT, NeckKind.RPAFPN):
            bad = [n.id for n in self.nodes if n.kind == FUSE and not n.has_residual]
            if bad:
                raise ValueError(f"shortcut variant with non-residual fusion nodes {bad}")

    def to_text(self) -> str:
        """One node per line: ``id kind filter_kind residual inputs``."""
        lines = [f"# neck={self.kind.value} levels={self.levels} width={self.width}"]
        for n in self.nodes:
            fk = n.filter_kind.value if n.filter_kind else "-"
            lines.append(f"{n.id} {n.kind} {fk} {int(n.has_residual)} {','.join(n.inputs)}")
        return "\n".join(lines) + "\n"


class _GraphBuilder:
    def __init__(self, graph: FusionGraph, filter_kind, rng, grad_mode):
        self.g = graph
        self.fk = FilterKind(filter_kind)
        self.rng = rng
        self.grad_mode = grad_mode

    def add(self, node_id, kind, inputs, level, residual=False, c_in=None):
        w = self.g.width
        block, fk = None, None
        if kind == LATERAL:
            block = filter_bn_relu(self.fk, c_in, w, 1, rng=self.rng, grad_mode=self.grad_mode)
        elif kind in (DOWN_ADD, EXTRA):
            block = filter_bn_relu(self.fk, w, w, 3, stride=2, rng=self.rng, grad_mode=self.grad_mode)
        elif kind == FUSE:
            block = filter_bn_relu(self.fk, w, w, 3, rng=self.rng, grad_mode=self.grad_mode, act=False)
        if block is not None:
            fk = self.fk
        self.g.nodes.append(Node(node_id, kind, fk, residual, list(inputs), level, block))
        return node_id


def build_neck(
    kind,
    levels: int,
    in_channels,
    width: int,
    filter_kind=FilterKind.ADDER,
    extra_levels: int = 0,
    first_level: int = 3,
    rng=None,
    grad_mode: GradMode | None = None,
) -> FusionGraph:
    kind = NeckKind(kind)
    if not 2 <= levels <= 8:
        raise ValueError(f"unsupported level count {levels}")
    in_channels = tuple(int(c) for c in in_channels)
    if len(in_channels) != levels or min(in_channels) < 1 or width < 1:
        raise ValueError(f"need {levels} positive input channel counts, got {in_channels}")
    rng = np.random.default_rng(rng)
    g = FusionGraph(kind, [], levels, width, first_level, in_channels)
    b = _GraphBuilder(g, filter_kind, rng, grad_mode)
    P = g.level_name
    residual = kind in (NeckKind.PAFPN_SHORTCUT, NeckKind.RPAFPN)
    top = levels - 1

    lat = [b.add(f"lat_{P(i)}", LATERAL, [g.level_name(i, "C")], i, c_in=in_channels[i]) for i in range(levels)]

    def top_down(feats, tag):
        # feats[i] -> running sums, coarsest first
        acc = {top: feats[top]}
        for i in range(top - 1, -1, -1):
            acc[i] = b.add(f"up_{tag}_{P(i)}", UP_ADD, [feats[i], acc[i + 1]], i)
        return acc

    def bottom_up(feats, tag):
        acc = {0: feats[0]}
        for i in range(1, levels):
            acc[i] = b.add(f"down_{tag}_{P(i)}", DOWN_ADD, [feats[i], acc[i - 1]], i)
        return acc

    def fuse(feats, tag, which):
        return {i: b.add(f"fuse_{tag}_{P(i)}", FUSE, [feats[i]], i, residual) for i in which}

    if kind is NeckKind.RPAFPN:
        bu = bottom_up(lat, "bu")
        mid = fuse(bu, "bu", range(levels))
        td = top_down(mid, "td")
        out = fuse(td, "td", range(top))
        out[top] = mid[top]
    else:
        td = top_down(lat, "td")
        out = fuse(td, "td", range(levels))
        if kind is not NeckKind.FPN:
            bu = bottom_up(out, "bu")
            out = {0: out[0], **fuse(bu, "bu", range(1, levels))}

    for i in range(levels):
        g.outputs.append(b.add(f"out_{P(i)}", IDENTITY, [out[i]], i))
    prev = g.outputs[-1]
    for e in range(extra_levels):
        lvl = levels + e
        prev = b.add(f"extra_{P(lvl)}", EXTRA, [prev], lvl)
        g.outputs.append(prev)
    g.validate()
    return g


class Neck(Module):
    """Executes a :class:`FusionGraph` with cached activations for backprop."""

    def __init__(self, graph: FusionGraph):
        self.graph = graph
        self._order = graph.topological_order()
        self._up = Upsample2x()

    def forward(self, pyramid, training=True):
        g = self.graph
        if len(pyramid) != g.levels:
            raise ValueError(f"expected {g.levels} pyramid levels, got {len(pyramid)}")
        for i in range(1, g.levels):
            hi, lo = pyramid[i - 1].shape[2:], pyramid[i].shape[2:]
            if hi[0] != 2 * lo[0] or hi[1] != 2 * lo[1]:
                raise ValueError(f"level {i} is {lo}, expected half of {hi}")
        for i, x in enumerate(pyramid):
            if x.shape[1] != g.in_channels[i]:
                raise ValueError(f"level {i} has {x.shape[1]} channels, expected {g.in_channels[i]}")
        vals = {g.level_name(i, "C"): np.asarray(x) for i, x in enumerate(pyramid)}
        self.pre_bn = {}
        for nid in self._order:
            n = g.node(nid)
            ins = [vals[s] for s in n.inputs]
            if n.kind in (LATERAL, EXTRA):
                y = n.block.forward(ins[0], training)
            elif n.kind == UP_ADD:
                y = ins[0] + self._up.forward(ins[1])
            elif n.kind == DOWN_ADD:
                y = ins[0] + n.block.forward(ins[1], training)
            elif n.kind == FUSE:
                filt, bn = n.block.layers
                pre = filt.forward(ins[0], training)
                self.pre_bn[nid] = pre
                z = bn.forward(pre, training)
                if n.has_residual:
                    z = z + ins[0]
                n._relu_in = z
                y = np.maximum(z, 0)
            else:
                y = ins[0]
            vals[nid] = y
        self._vals = vals
        return [vals[o] for o in g.outputs]

    def backward(self, grads):
        """Gradients w.r.t. each pyramid input, given gradients for each output."""
        g = self.graph
        acc = defaultdict(lambda: 0)
        for o, gy in zip(g.outputs, grads):
            acc[o] = acc[o] + gy
        for nid in reversed(self._order):
            if nid not in acc:
                continue
            gy = acc.pop(nid)
            n = g.node(nid)
            if n.kind in (LATERAL, EXTRA):
                acc[n.inputs[0]] = acc[n.inputs[0]] + n.block.backward(gy)
            elif n.kind == UP_ADD:
                acc[n.inputs[0]] = acc[n.inputs[0]] + gy
                acc[n.inputs[1]] = acc[n.inputs[1]] + self._up.backward(gy)
            elif n.kind == DOWN_ADD:
                acc[n.inputs[0]] = acc[n.inputs[0]] + gy
                acc[n.inputs[1]] = acc[n.inputs[1]] + n.block.backward(gy)
            elif n.kind == FUSE:
                gz = np.where(n._relu_in > 0, gy, 0).astype(gy.dtype)
                filt, bn = n.block.layers
                gx = filt.backward(bn.backward(gz))
                if n.has_residual:
                    gx = gx + gz
                acc[n.inputs[0]] = acc[n.inputs[0]] + gx
            else:
                acc[n.inputs[0]] = acc[n.inputs[0]] + gy
        return [acc.get(s, np.zeros_like(self._vals[s])) for s in g.sources()]

    def named_params(self, prefix=""):
        out = []
        for n in self.graph.nodes:
            if n.block is not None:
                out.extend(n.block.named_params(f"{prefix}{n.id}."))
        return out

    def batchnorms(self, prefix=""):
        out = []
        for n in self.graph.nodes:
            if n.block is not None:
                out.extend(n.block.batchnorms(f"{prefix}{n.id}."))
        return out


def neck_forward(graph: FusionGraph, pyramid, training: bool = False):
    return Neck(graph).forward(pyramid, training)
