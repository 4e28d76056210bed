"""Adder vs conv filters on one input: outputs, gradients and a finite-difference check."""

import numpy as np

from adderkit.gradients import adder_backward_input, adder_backward_weight, gradcheck, kink_free_inputs
from adderkit.layers import FilterBank, adder_forward, conv_forward
from adderkit.tensor import ConvGeometry

rng = np.random.default_rng(0)
x, w = kink_free_inputs(rng, (2, 3, 6, 6), (4, 3, 3, 3))
geo = ConvGeometry((3, 3), 1, 1)
adder, conv = FilterBank(w, "adder", geo), FilterBank(w, "conv", geo)

ya, yc = adder_forward(x, adder), conv_forward(x, conv)
print(f"adder output range [{ya.min():.2f}, {ya.max():.2f}] (never positive)")
print(f"conv  output range [{yc.min():.2f}, {yc.max():.2f}]")

gy = np.ones_like(ya)
gx = adder_backward_input(x, adder, gy, "sign")
gw = adder_backward_weight(x, adder, gy)
print(f"input grad |max| {np.abs(gx).max():.2f}, weight grad |max| {np.abs(gw).max():.2f}")

r = gradcheck(lambda x: adder_forward(x, adder), {"x": x},
              lambda gy, x: {"x": adder_backward_input(x, adder, gy, "sign")})
print(f"sign input gradient vs finite differences: max rel err {r.max_rel_err:.1e}")
