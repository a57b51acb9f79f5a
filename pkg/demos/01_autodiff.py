"""
Reverse-mode gradients on a tiny tape
=====================================

The velocity network is differentiated by a small tape-based autodiff.
Here we build a two-layer net by hand, take a gradient, and compare it
with central differences.
"""

import numpy as np
from mscfm import autodiff as ad

# parameters live in one flat vector; the layout names the pieces
layout = ad.ParamLayout((("W0", (3, 8)), ("b0", (8,)), ("W1", (8, 2)), ("b1", (2,))))
rng = np.random.default_rng(0)
theta = 0.5 * rng.standard_normal(layout.size)
x = rng.standard_normal((5, 3))
y = rng.standard_normal((5, 2))


def net(p, x):
    return ad.tanh(x @ p["W0"] + p["b0"]) @ p["W1"] + p["b1"]


def loss(th):
    out = ad.forward(net, (x,), th, layout)
    return ad.mean(ad.sum(ad.square(out - y), axis=1))


g = ad.backward(loss(theta))
print("loss", float(loss(theta).value), "| grad norm", np.linalg.norm(g))

# central differences, one coordinate at a time
h = 1e-6
fd = np.array([(float(loss(theta + h * e).value) - float(loss(theta - h * e).value)) / (2 * h)
               for e in np.eye(layout.size)])
print("max abs diff vs finite differences:", np.abs(fd - g).max())
