"""
Finite-difference audit of the whole model
==========================================

Every parameter of a tiny full model is probed with central differences. The
frozen encoders must not see a gradient at all.
"""

from bmfl.harness import format_gradcheck, gradcheck_all, tiny_config

rows = gradcheck_all(tiny_config())
print(format_gradcheck(rows))

trainable = [r for r in rows if r.trainable]
print(f"\n{len(trainable)} trainable tensors, worst relative error "
      f"{max(r.max_rel_error for r in trainable):.2e}")
print(f"{len(rows) - len(trainable)} frozen tensors, all zero:", all(r.max_rel_error == 0 for r in rows
                                                                    if not r.trainable))
