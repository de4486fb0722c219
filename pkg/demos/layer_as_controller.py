"""Any linear layer W z + b with b in range(W) is a feedback law K (g - z).

Run:  python3 demos/layer_as_controller.py
"""

import numpy as np

from slfc.model import estimate_goal, layer_to_controller

rng = np.random.default_rng(0)
W = rng.normal(size=(2, 2))
b = rng.normal(size=2)

K, g, residual = layer_to_controller(W, b)
print("K =", np.round(K, 4).tolist())
print("g =", np.round(g, 4).tolist(), " residual", residual)

z = rng.normal(size=(5, 2))
print("max |Wz + b - K(g - z)| =", np.abs(z @ W.T + b - (g - z) @ K.T).max())

# the goal is where the layer outputs zero action
print("action at the goal:", np.round(W @ g + b, 12))

# with an observed action, the goal can be read off from the gain alone
u = K @ (g - z[0])
print("goal from (K, z, u):", np.round(estimate_goal(K, u, z[0]), 6), "vs", np.round(g, 6))

# a tall layer (more action than latent dims) cannot absorb every bias;
# the residual is the part of b outside the column space of W
W_tall = rng.normal(size=(3, 1))
_, _, r = layer_to_controller(W_tall, rng.normal(size=3))
print("tall layer residual:", round(r, 6))
