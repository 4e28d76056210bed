"""Print the fusion graph of each neck and run a random pyramid through it."""

import numpy as np

from adderkit.necks import Neck, NeckKind, build_neck

rng = np.random.default_rng(0)
xs = [rng.normal(size=(1, c, s, s)).astype(np.float32) for c, s in ((8, 32), (16, 16), (32, 8))]
for kind in NeckKind:
    g = build_neck(kind, 3, [8, 16, 32], 16, rng=0)
    outs = Neck(g).forward(xs, training=False)
    print(f"{kind.value}: {len(g.nodes)} nodes, outputs {[o.shape for o in outs]}")
    print("  order:", " ".join(g.topological_order()))
