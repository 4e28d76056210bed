"""Energy of bundled detectors as components are swapped to adder filters one by one.

Some bundled specs only split into stem, backbone and an aggregate remainder.
"""

from adderkit.golden import bundled_spec
from adderkit.profiler import FP32, INT8, convert_to_adder, count_model, energy

G = 1e9
for name in ("fcos_r50", "retinanet_r50", "faster_rcnn_r50"):
    spec = bundled_spec(name)
    comps = [c for c in dict.fromkeys(l.component for l in spec.layers) if c != "stem"]
    for parts in [comps[:i] for i in range(len(comps) + 1)]:
        c = count_model(convert_to_adder(spec, parts) if parts else spec)
        label = "+".join(parts) or "none"
        print(f"{name:16s} adder={label:20s} muls {c.muls / G:7.1f}G adds {c.adds / G:7.1f}G "
              f"fp32 {energy(c, FP32):8.2f} mJ int8 {energy(c, INT8):7.2f} mJ")
