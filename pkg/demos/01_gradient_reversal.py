# coding: utf-8

# # Gradient reversal, checked by hand
#
# A domain-adversarial network has three parts: a feature extractor G_f, a
# label head G_y and a domain head G_d. The extractor is trained on
# L_y - lam * L_d, so it helps the label head and hurts the domain head.
# The domain head itself still minimizes L_d. This walk-through builds a tiny
# network and confirms both facts numerically.

import numpy as np

from msdann import nn
from msdann.strategies import joint_gradients

rng = np.random.default_rng(0)

# ## A tiny network
#
# Six inputs, a five-unit ReLU feature layer, two heads with a four-unit
# hidden layer each. The domain head separates three sites.

g_f = nn.init_mlp(6, [5], 5, seed=1, output_activation="relu")
g_y = nn.init_mlp(5, [4], 2, seed=2)
g_d = nn.init_mlp(5, [4], 3, seed=3)

x = rng.normal(size=(8, 6))
y = rng.integers(0, 2, 8).astype(float)
d = np.eye(3)[rng.integers(0, 3, 8)]

# ## One joint backward pass
#
# `joint_gradients` runs both heads and backpropagates once. The reversal
# layer multiplies whatever reaches it from G_d by -lam.

lam = 0.5
joint = joint_gradients(g_f, g_y, g_d, x, y, d, lam)
print(f"L_y = {joint.l_y:.4f}   L_d = {joint.l_d:.4f}")

# ## The same gradient, assembled from two separate passes

grad_ly = joint_gradients(g_f, g_y, None, x, y, None, lam).grad_f
grad_ld = joint_gradients(g_f, g_y, g_d, x, y, d, 1.0, label_mask=np.zeros(8, bool), reverse=False).grad_f

diff = max(float(np.max(np.abs(a - (b - lam * c))))
           for a, b, c in zip(joint.grad_f.parameters(), grad_ly.parameters(), grad_ld.parameters()))
print(f"max |joint - (grad L_y - lam * grad L_d)| = {diff:.1e}")

# ## The domain head is not reversed
#
# Stepping G_d along its own gradient lowers L_d, even though the extractor
# sees the opposite sign.

cfg = nn.OptimConfig(method="sgd", learning_rate=0.1)
for step in range(5):
    res = joint_gradients(g_f, g_y, g_d, x, y, d, lam)
    print(f"step {step}: L_d = {res.l_d:.4f}")
    nn.optim_step(g_d, res.grad_d, cfg)
