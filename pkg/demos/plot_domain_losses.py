"""
Domain losses as functions of similarity
========================================

The invariant term pulls the squeezed detector feature toward the image
embedding; the specific term pushes it away from every prompt embedding.
Both are built from the same ``-(1 - x) ln x`` curve.
"""

import math
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from leapd.alignment import (
    class_probabilities, domain_invariant_grad, domain_invariant_loss, domain_specific_loss, total_loss,
)

out_dir = os.environ.get("LEAPD_OUT", "demo_out")
os.makedirs(out_dir, exist_ok=True)

# the curve on a grid; it vanishes at 1 and grows like -ln x near the clamp floor
s = np.linspace(1e-3, 1, 400)
loss = domain_invariant_loss(s).numpy()
grad = np.array([domain_invariant_grad(x) for x in s])
print("L(0.5) =", float(domain_invariant_loss(0.5)), " expected", 0.5 * math.log(2))
print("L(1e-7) =", float(domain_invariant_loss(1e-7)))

# averaging over prompts: one prompt already maximally far, one at 0.5
print("L_ds(1, 0.5) =", float(domain_specific_loss([1.0, 0.5])))

# the weighted objective with the default weights
print(total_loss((0.3, 0.2, 0.4, 0.6)))

# temperature sharpens the class posterior: cosine gap 0.1 at tau=0.01 is 10 nats
v = torch.tensor([1.0, 0.0], dtype=torch.float64)
prompts = torch.tensor([[0.2, math.sqrt(0.96)], [0.1, math.sqrt(0.99)]], dtype=torch.float64)
for tau in (1.0, 0.1, 0.01):
    print(f"tau={tau:<5}", class_probabilities(v, prompts, tau).numpy().round(7))

fig, ax = plt.subplots(1, 2, figsize=(8, 3))
ax[0].plot(s, loss)
ax[0].set_xlabel("s")
ax[0].set_ylabel("-(1-s) ln s")
ax[1].plot(s, grad)
ax[1].set_ylim(-20, 1)
ax[1].set_xlabel("s")
ax[1].set_ylabel("dL/ds")
fig.tight_layout()
fig.savefig(os.path.join(out_dir, "domain_loss_curve.png"), dpi=100)
print("wrote", os.path.join(out_dir, "domain_loss_curve.png"))
