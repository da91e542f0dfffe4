"""
Synthetic phantom gallery
=========================

Generate one B-mode-like phantom and look at what is inside: speckled
tissue, the bright capsule rim around the gland, dark lesions inside
it, and the two confounder families (shadow stripes crossing the
capsule, hypoechoic blobs outside the gland) that share the lesions'
intensity distribution.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from echodetect import PhantomSpec, generate_phantom

#%%
# One phantom, fully deterministic per seed.

spec = PhantomSpec()
record, confounders = generate_phantom(spec, seed=17)
print("case:", record.case_id)
print("lesion voxels:", int(record.label.data.sum()))
print("lesion fraction of gland:", record.label.data.sum() / record.prostate.count())

#%%
# Mid slices: image, gland mask, truth lesions, confounders.

z = record.volume.shape[0] // 2
fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
axes[0].imshow(record.volume.data[z], cmap="gray")
axes[0].set_title("B-mode-like slice")
axes[1].imshow(record.prostate.data[z], cmap="bone")
axes[1].set_title("gland mask")
axes[2].imshow(record.volume.data[z], cmap="gray")
axes[2].contour(record.label.data[z], levels=[0.5], colors="yellow")
axes[2].set_title("lesion truth (yellow)")
axes[3].imshow(record.volume.data[z], cmap="gray")
if confounders.data[z].any():
    axes[3].contour(confounders.data[z], levels=[0.5], colors="red")
axes[3].set_title("confounders (red)")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("phantom_gallery.png", dpi=120)
print("wrote phantom_gallery.png")

#%%
# The point of the confounders: their intensity histogram matches the
# lesions', so only shape/context can separate them.

lesion_vals = record.volume.data[record.label.data.astype(bool)]
conf_vals = record.volume.data[confounders.data]
fig, ax = plt.subplots(figsize=(5, 3.2))
bins = np.linspace(0, 1.6, 50)
ax.hist(lesion_vals, bins=bins, alpha=0.6, density=True, label="lesion voxels")
ax.hist(conf_vals, bins=bins, alpha=0.6, density=True, label="confounder voxels")
ax.legend()
ax.set_xlabel("intensity")
fig.tight_layout()
fig.savefig("phantom_intensities.png", dpi=120)
print("wrote phantom_intensities.png")
