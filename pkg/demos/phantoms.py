"""
Synthetic head phantoms
=======================

The desk-scale experiments run on ellipse phantoms with a bright, partly
broken rim, clutter arcs and multiplicative speckle. This script writes a
small set to disk, reads it back through the regular dataset reader and
saves a contact sheet.
"""

import tempfile

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from pccl.data import load_dataset, synth_counts, synth_generate

root = tempfile.mkdtemp()
written = synth_generate(34, 64, seed=7, root=root)
print("split sizes:", synth_counts(34))

train = load_dataset(root, "train")
fg = np.mean([s.mask.mean() for s in train])
print(f"{len(train)} training images, mean foreground fraction {fg:.2f}")

fig, axes = plt.subplots(2, 6, figsize=(12, 4))
for i, ax in enumerate(axes[0]):
    ax.imshow(train[i].image[0], cmap="gray")
    ax.set_axis_off()
for i, ax in enumerate(axes[1]):
    ax.imshow(train[i].mask, cmap="gray")
    ax.set_axis_off()
fig.tight_layout()
fig.savefig("phantoms.png", dpi=80)
print("saved phantoms.png")
