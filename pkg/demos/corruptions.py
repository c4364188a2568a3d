"""
What the corrupted validation splits look like
==============================================

Render a few synthetic images, darken and mask them, and print how much of
each image survives.
"""

import numpy as np

from bmfl.data import CorruptionSpec, SyntheticDatasetSpec, cell_energy, corrupt, generate_dataset

train, val = generate_dataset(SyntheticDatasetSpec(samples_per_class=1, val_samples_per_class=1))
print(f"{len(train)} train / {len(val)} val images of shape {train.images.shape[1:]}")

# low light works in linear intensity: darken, add sensor noise, re-apply gamma
for severity in (0.3, 0.7, 0.95):
    dark = corrupt(val.images[0], CorruptionSpec("low_light", severity=severity, seed=1))
    print(f"severity {severity:.2f}: mean brightness {val.images[0].mean():.3f} -> {dark.mean():.3f}")

# masking zeroes whole 8-pixel cells; 'saliency' picks the cells with the most edges
img = val.images[3]
print("edge energy per cell:\n", np.round(cell_energy(img, 8), 2))
for mode in ("random", "saliency"):
    out = corrupt(img, CorruptionSpec("masked", mask_ratio=0.25, mask_mode=mode, seed=1))
    hidden = (out == 0).all(axis=0)[::8, ::8].astype(int)
    print(f"{mode} mask (1 = hidden):\n{hidden}")
