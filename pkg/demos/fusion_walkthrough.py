"""
Cross-attention fusion on hand-sized tokens
===========================================

Build random image and brain tokens, push them through the fusion module and
look at the pieces the loss is assembled from.
"""

import numpy as np

from bmfl.brain_transformer import FmriTokens
from bmfl.fusion import Fusion, FusionConfig, fuse
from bmfl.image_encoder import ImageTokens
from bmfl.numerics import make_rng
from bmfl.objective import LossConfig, total_loss

rng = np.random.default_rng(0)

# one image: a CLS vector plus 16 patch tokens; one brain sample: CLS plus 16 fMRI tokens
img = ImageTokens(rng.normal(size=8).astype(np.float32), rng.normal(size=(16, 8)).astype(np.float32))
brain = FmriTokens(rng.normal(size=8).astype(np.float32), rng.normal(size=(16, 8)).astype(np.float32))

cfg = FusionConfig(d_v=8, d_b=8, d_f=6, num_classes=4)
fusion = Fusion(cfg, make_rng(0))
out = fuse(img, brain, fusion)

# x_vb: the image CLS read over fMRI tokens; x_bv: the brain CLS read over image patches
print("x_vb   ", np.round(out.x_vb.data, 4))
print("x_bv   ", np.round(out.x_bv.data, 4))
print("x_j has", out.x_j.shape[0], "entries; the classifier sees", out.features.shape[0])

# shuffling the fMRI tokens changes nothing: attention is a weighted average over keys
shuffled = FmriTokens(brain.cls, brain.patches[rng.permutation(16)])
print("order-free:", np.allclose(fuse(img, shuffled, fusion).logits.data, out.logits.data, atol=1e-6))

# the objective rewards agreement between the two directions
logits = out.logits.reshape(1, -1)
for alpha in (0.0, -0.4, -1.0):
    _, report = total_loss(logits, [2], out.x_vb.reshape(1, -1), out.x_bv.reshape(1, -1), LossConfig(alpha))
    print(f"alpha={alpha:+.1f}  l_cls={report.l_cls:.4f}  pcc={report.l_fusion:+.4f}  total={report.l_total:.4f}")
