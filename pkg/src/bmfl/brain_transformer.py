"""Transformer over a voxel vector, yielding a brain CLS vector and fMRI patch tokens.

The voxel vector is cut into non-overlapping windows of ``kernel`` voxels, each
window linearly projected to ``d_b`` channels (a 1D convolution whose stride
equals its kernel), then a CLS token and learned positions are added before a
stack of pre-norm encoder blocks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bmfl.brain_encoder import FmriRecord
from bmfl.errors import ConfigError, DimensionError, InputError
from bmfl.numerics import EncoderBlock, Linear, Module, Parameter, Tensor, concat, no_grad, split_rng, trunc_normal


@dataclass(frozen=True)
class BrainTransformerConfig:
    kernel: int = 192
    d_b: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    num_voxels: int = 3072

    def __post_init__(self):
        if self.kernel < 1:
            raise ConfigError(f"kernel must be >= 1, got {self.kernel}")
        if self.d_b % self.heads:
            raise ConfigError(f"d_b={self.d_b} not divisible by heads={self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.num_voxels % self.kernel:
            raise ConfigError(f"V={self.num_voxels} not divisible by kernel={self.kernel}")

    @property
    def num_tokens(self) -> int:
        return self.num_voxels // self.kernel


PAPER_SCALE = BrainTransformerConfig(kernel=192, d_b=768, depth=12, heads=12, mlp_ratio=4.0)


@dataclass
class FmriTokens:
    """Brain CLS vector(s) and patch-token matrix (matrices); a leading batch axis is allowed."""

    cls: np.ndarray
    patches: np.ndarray = field(repr=False)

    def __getitem__(self, index) -> "FmriTokens":
        return FmriTokens(self.cls[index], self.patches[index])

    def __len__(self) -> int:
        return self.cls.shape[0] if self.cls.ndim == 2 else 1


def patchify_fmri(voxels, conv: Linear, kernel: int) -> Tensor:
    """(V,) or (B, V) voxels -> (B, V/kernel, d_b) tokens via a stride-``kernel`` 1D convolution."""
    x = voxels if isinstance(voxels, Tensor) else Tensor(np.asarray(voxels, np.float32))
    if x.ndim == 1:
        x = x.reshape(1, x.shape[0])
    v = x.shape[-1]
    if v % kernel:
        raise InputError(f"voxel count V={v} is not divisible by kernel={kernel}")
    if conv.d_in != kernel:
        raise DimensionError(f"convolution expects windows of {conv.d_in}, kernel is {kernel}")
    return conv(x.reshape(x.shape[0], v // kernel, kernel))


class BrainTransformer(Module):
    def __init__(self, cfg: BrainTransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        r_conv, r_cls, r_pos, r_blocks = split_rng(rng, 4)
        self.conv = Linear(cfg.kernel, cfg.d_b, r_conv)
        self.cls_token = Parameter(trunc_normal(r_cls, (1, 1, cfg.d_b)))
        self.pos_embed = Parameter(trunc_normal(r_pos, (1, cfg.num_tokens + 1, cfg.d_b)))
        self.blocks = [EncoderBlock(cfg.d_b, cfg.heads, cfg.mlp_ratio, r) for r in split_rng(r_blocks, cfg.depth)]

    def forward(self, voxels) -> tuple[Tensor, Tensor]:
        """Batched forward; returns (F_c (B, d_b), F_p (B, N_f, d_b)) tensors."""
        if isinstance(voxels, FmriRecord):
            voxels = voxels.voxels
        tokens = patchify_fmri(voxels, self.conv, self.cfg.kernel)
        if tokens.shape[1] != self.cfg.num_tokens:
            raise DimensionError(
                f"expected {self.cfg.num_voxels} voxels ({self.cfg.num_tokens} tokens), got {tokens.shape[1]} tokens"
            )
        b = tokens.shape[0]
        cls = self.cls_token + Tensor(np.zeros((b, 1, 1), np.float32))
        x = concat([cls, tokens], axis=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return x[:, 0, :], x[:, 1:, :]

    __call__ = forward


def encode_fmri(rec, transformer: BrainTransformer) -> FmriTokens:
    """Encode one record (V,) or a batch (B, V) into FmriTokens (values only, no graph)."""
    voxels = rec.voxels if isinstance(rec, FmriRecord) else np.asarray(rec, np.float32)
    single = voxels.ndim == 1
    with no_grad():
        cls, patches = transformer(voxels)
    if single:
        return FmriTokens(cls.data[0].copy(), patches.data[0].copy())
    return FmriTokens(cls.data.copy(), patches.data.copy())
