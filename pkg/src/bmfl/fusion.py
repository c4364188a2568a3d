"""Bidirectional cross-attention between image and brain CLS tokens, plus the classifier.

Image CLS queries the fMRI patch tokens (x_vb); brain CLS queries the image
patch tokens (x_bv). Their concatenation x_j, extended with the mean image
patch token, feeds an affine classifier. Two reduced variants drop the
cross-attention (classifier over [I_c, F_c]) or the brain branch entirely
(classifier over [I_c, mean I_p]).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bmfl.brain_transformer import FmriTokens
from bmfl.errors import ConfigError, DimensionError
from bmfl.image_encoder import ImageTokens
from bmfl.numerics import Linear, Module, Tensor, as_tensor, concat, gelu, multi_head_attention, split_rng


@dataclass(frozen=True)
class FusionConfig:
    d_v: int = 64
    d_b: int = 64
    d_f: int = 64
    heads: int = 1
    num_classes: int = 8
    use_cross_attention: bool = True
    use_fmri: bool = True
    head_hidden: int = 0  # > 0 swaps the affine classifier for a one-hidden-layer MLP

    def __post_init__(self):
        if min(self.d_v, self.d_b, self.d_f, self.heads, self.num_classes) < 1:
            raise ConfigError("fusion widths, heads and num_classes must be >= 1")
        if self.d_f % self.heads:
            raise ConfigError(f"d_f={self.d_f} not divisible by heads={self.heads}")
        if self.head_hidden < 0:
            raise ConfigError("head_hidden must be >= 0")

    @property
    def variant(self) -> str:
        if not self.use_fmri:
            return "no_fmri"
        return "full" if self.use_cross_attention else "concat_only"

    @property
    def classifier_width(self) -> int:
        if self.variant == "full":
            return 2 * self.d_f + self.d_v
        if self.variant == "concat_only":
            return self.d_v + self.d_b
        return 2 * self.d_v


@dataclass
class FusionOutput:
    """Batched fusion features; x_vb and x_bv have zero width in the reduced variants."""

    x_vb: Tensor
    x_bv: Tensor
    x_j: Tensor
    features: Tensor
    logits: Tensor


class ClassifierHead(Module):
    def __init__(self, d_in: int, num_classes: int, rng: np.random.Generator, hidden: int = 0):
        r1, r2 = split_rng(rng, 2)
        if hidden:
            self.hidden = Linear(d_in, hidden, r1)
            self.out = Linear(hidden, num_classes, r2)
        else:
            self.hidden = None
            self.out = Linear(d_in, num_classes, r2)
        self.d_in = d_in

    def __call__(self, features: Tensor) -> Tensor:
        x = features if self.hidden is None else gelu(self.hidden(features))
        return self.out(x)


def classify(features, head) -> Tensor:
    """Logits from a feature vector or batch; ``head`` is a ClassifierHead or Linear."""
    features = as_tensor(features)
    if features.shape[-1] != head.d_in:
        raise DimensionError(f"classifier expects width {head.d_in}, got features {features.shape}")
    if features.ndim == 1:
        return head(features.reshape(1, -1))[0]
    return head(features)


def _cross_attend(query: Tensor, context: Tensor, wq: Linear, wk: Linear, wv: Linear, heads: int) -> Tensor:
    q = wq(query).reshape(query.shape[0], 1, wq.d_out)
    out = multi_head_attention(q, wk(context), wv(context), heads)
    return out.reshape(query.shape[0], wq.d_out)


class Fusion(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        rs = split_rng(rng, 7)
        if cfg.variant == "full":
            # x_vb: image CLS attends over fMRI patches; x_bv: brain CLS attends over image patches
            self.vb_q = Linear(cfg.d_v, cfg.d_f, rs[0])
            self.vb_k = Linear(cfg.d_b, cfg.d_f, rs[1])
            self.vb_v = Linear(cfg.d_b, cfg.d_f, rs[2])
            self.bv_q = Linear(cfg.d_b, cfg.d_f, rs[3])
            self.bv_k = Linear(cfg.d_v, cfg.d_f, rs[4])
            self.bv_v = Linear(cfg.d_v, cfg.d_f, rs[5])
        self.head = ClassifierHead(cfg.classifier_width, cfg.num_classes, rs[6], cfg.head_hidden)

    def forward(self, i_c, i_p, f_c=None, f_p=None) -> FusionOutput:
        """Batched: i_c (B, d_v), i_p (B, N_p, d_v), f_c (B, d_b), f_p (B, N_f, d_b)."""
        cfg = self.cfg
        i_c, i_p = as_tensor(i_c), as_tensor(i_p)
        self._check(i_c, i_p, cfg.d_v, "image")
        b = i_c.shape[0]
        empty = Tensor(np.zeros((b, 0), np.float32))
        if cfg.variant == "no_fmri":
            features = concat([i_c, i_p.mean(axis=1)], axis=-1)
            return FusionOutput(empty, empty, empty, features, self.head(features))
        if f_c is None:
            raise DimensionError(f"variant {cfg.variant!r} needs brain tokens")
        f_c = as_tensor(f_c)
        if cfg.variant == "concat_only":
            if f_c.ndim != 2 or f_c.shape != (b, cfg.d_b):
                raise DimensionError(f"brain CLS must be ({b}, {cfg.d_b}), got {f_c.shape}")
            features = concat([i_c, f_c], axis=-1)
            return FusionOutput(empty, empty, empty, features, self.head(features))
        f_p = as_tensor(f_p)
        self._check(f_c, f_p, cfg.d_b, "brain")
        if f_p.shape[0] != b:
            raise DimensionError(f"image batch {b} != brain batch {f_p.shape[0]}")
        x_vb = _cross_attend(i_c, f_p, self.vb_q, self.vb_k, self.vb_v, cfg.heads)
        x_bv = _cross_attend(f_c, i_p, self.bv_q, self.bv_k, self.bv_v, cfg.heads)
        x_j = concat([x_vb, x_bv], axis=-1)
        features = concat([x_j, i_p.mean(axis=1)], axis=-1)
        return FusionOutput(x_vb, x_bv, x_j, features, self.head(features))

    __call__ = forward

    @staticmethod
    def _check(cls: Tensor, patches: Tensor, d: int, what: str) -> None:
        if cls.ndim != 2 or cls.shape[1] != d:
            raise DimensionError(f"{what} CLS must be (B, {d}), got {cls.shape}")
        if patches.ndim != 3 or patches.shape[2] != d or patches.shape[0] != cls.shape[0]:
            raise DimensionError(f"{what} patches must be ({cls.shape[0]}, N, {d}), got {patches.shape}")


def _batched(tokens):
    single = np.ndim(tokens.cls) == 1
    if single:
        return tokens.cls[None], tokens.patches[None], True
    return tokens.cls, tokens.patches, False


def _unbatch(out: FusionOutput) -> FusionOutput:
    return FusionOutput(*(t[0] for t in (out.x_vb, out.x_bv, out.x_j, out.features, out.logits)))


def fuse(img: ImageTokens, brain: FmriTokens, fusion: Fusion) -> FusionOutput:
    """Full bidirectional fusion for one sample or a batch of token sets."""
    if fusion.cfg.variant != "full":
        raise ConfigError(f"fuse needs the cross-attention variant, model is {fusion.cfg.variant!r}")
    i_c, i_p, single = _batched(img)
    f_c, f_p, _ = _batched(brain)
    out = fusion(i_c, i_p, f_c, f_p)
    return _unbatch(out) if single else out


def fuse_concat_only(img: ImageTokens, brain: FmriTokens | None, fusion: Fusion) -> FusionOutput:
    """Reduced fusion without cross-attention ([I_c, F_c]) or without fMRI ([I_c, mean I_p])."""
    if fusion.cfg.variant == "full":
        raise ConfigError("fuse_concat_only needs use_cross_attention=False or use_fmri=False")
    i_c, i_p, single = _batched(img)
    f_c = None if brain is None or not fusion.cfg.use_fmri else _batched(brain)[0]
    out = fusion(i_c, i_p, f_c)
    return _unbatch(out) if single else out
