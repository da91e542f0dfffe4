"""
Loss terms at a glance
======================

The training objective is  seg + 1.0*cls + 0.2*ent  where seg mixes
Dice and focal terms over the deep-supervision pyramid, cls is patch
cross-entropy, and ent is the mean voxel-wise Shannon entropy being
minimized to sharpen uncertain (false-positive-prone) predictions.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from echodetect import LossWeights, dice_loss, entropy_loss, focal_loss, total_loss

#%%
# Entropy of a binary voxel as a function of its lesion probability:
# zero at certainty, ln 2 at maximal confusion.

p = np.linspace(1e-6, 1 - 1e-6, 200)
entropies = [
    float(entropy_loss(torch.tensor([[1 - pi], [pi]], dtype=torch.float64)))
    for pi in p
]

fig, ax = plt.subplots(figsize=(5, 3.2))
ax.plot(p, entropies)
ax.axhline(np.log(2), ls="--", c="gray", lw=0.8)
ax.set_xlabel("lesion probability")
ax.set_ylabel("voxel entropy (nats)")
fig.tight_layout()
fig.savefig("entropy_curve.png", dpi=120)
print("wrote entropy_curve.png")

#%%
# Focal loss vs plain cross-entropy on the true-class probability:
# gamma=2 down-weights easy voxels, the lever against 96:4 imbalance.

p_t = np.linspace(0.01, 1.0, 200)


def focal_curve(gamma):
    vals = []
    for pi in p_t:
        probs = torch.tensor([[1 - pi], [pi]], dtype=torch.float64)
        y = torch.ones((1,), dtype=torch.long)
        vals.append(float(focal_loss(probs, y, gamma=gamma)))
    return vals


fig, ax = plt.subplots(figsize=(5, 3.2))
ax.plot(p_t, focal_curve(0.0), label="gamma = 0 (cross-entropy)")
ax.plot(p_t, focal_curve(2.0), label="gamma = 2")
ax.set_xlabel("true-class probability")
ax.set_ylabel("voxel loss")
ax.legend()
fig.tight_layout()
fig.savefig("focal_curve.png", dpi=120)
print("wrote focal_curve.png")

#%%
# Dice loss responds to overlap, not voxel count, which is what makes
# it robust to the background dominating the grid.

y = torch.zeros((10, 10, 10), dtype=torch.float64)
y[3:7, 3:7, 3:7] = 1.0
shifts = range(0, 8)
dice_vals = []
for s in shifts:
    pred = torch.zeros_like(y)
    pred[3 + s:min(7 + s, 10), 3:7, 3:7] = 1.0
    dice_vals.append(float(dice_loss(pred, y)))
fig, ax = plt.subplots(figsize=(5, 3.2))
ax.plot(list(shifts), dice_vals, marker="o")
ax.set_xlabel("prediction shift (voxels)")
ax.set_ylabel("Dice loss")
fig.tight_layout()
fig.savefig("dice_curve.png", dpi=120)
print("wrote dice_curve.png")

#%%
# The combined objective with the reference weights.

w = LossWeights()
print("lambda_cls =", w.lambda_cls, " lambda_ent =", w.lambda_ent)
print("total(seg=0.5, cls=0.3, ent=0.4) =", total_loss(0.5, 0.3, 0.4, w))
