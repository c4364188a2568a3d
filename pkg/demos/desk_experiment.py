"""
Does reading predicted brain activity help under corruption?
============================================================

The full desk-scale loop: synthetic images, warmed-up encoders, then the full
model and the concatenation-only ablation trained side by side and scored on
clean, low-light and masked validation images. Takes a few minutes on one CPU;
pass a smaller epoch count as the first argument to go faster.
"""

import sys
import time
from dataclasses import replace

from bmfl.harness import EVAL_SPLITS, RunConfig, evaluate, make_splits, pretrain_encoders, train

cfg = RunConfig(epochs=int(sys.argv[1]) if len(sys.argv) > 1 else 20)
t0 = time.perf_counter()

splits = make_splits(cfg)
print({name: len(s) for name, s in splits.items()})

# both encoders are trained once here and frozen from then on
enc = pretrain_encoders(cfg, splits["train"], splits["clean_val"])
print(f"image encoder train accuracy {enc.image_train_accuracy:.3f}, "
      f"brain encoder held-out voxel R {enc.brain_val_r:.3f}  ({time.perf_counter() - t0:.0f}s)")

for name, flags in (("full", {}), ("concat-only", {"no_cross_attention": True})):
    result = train(replace(cfg, **flags), splits["train"], enc.image, enc.brain)
    report = evaluate(result.model, {k: splits[k] for k in EVAL_SPLITS})
    accs = [report.accuracy(k) for k in EVAL_SPLITS]
    print(f"{name:<12}" + "  ".join(f"{k}={a:.3f}" for k, a in zip(EVAL_SPLITS, accs))
          + f"  corrupted mean={(accs[1] + accs[2]) / 2:.3f}")

print(f"done in {time.perf_counter() - t0:.0f}s")
