"""Small ViT image encoder producing a CLS vector and patch tokens.

At desk scale this stands in for a frozen self-supervised backbone: it is
warmed up with a supervised classification head that is discarded afterwards,
then frozen for fusion training.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bmfl.errors import ConfigError, DimensionError, InputError
from bmfl.numerics import (
    AdamW,
    EncoderBlock,
    LayerNorm,
    Linear,
    LrSchedule,
    Module,
    Parameter,
    Tensor,
    concat,
    cross_entropy,
    lr_at,
    make_rng,
    no_grad,
    split_rng,
    trunc_normal,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageEncoderConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch_size: int = 8
    d_v: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    frozen: bool = True

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by patch {self.patch_size}")
        if self.d_v % self.heads:
            raise ConfigError(f"d_v={self.d_v} not divisible by heads={self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)


PAPER_SCALE = ImageEncoderConfig(height=224, width=224, patch_size=14, d_v=768, depth=12, heads=12,
                                 mlp_ratio=4.0)


@dataclass
class ImageTokens:
    """CLS vector(s) and patch-token matrix (matrices); a leading batch axis is allowed."""

    cls: np.ndarray
    patches: np.ndarray = field(repr=False)

    def __getitem__(self, index) -> "ImageTokens":
        return ImageTokens(self.cls[index], self.patches[index])

    def __len__(self) -> int:
        return self.cls.shape[0] if self.cls.ndim == 2 else 1


def image_to_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N_p, C*patch*patch), patches in row-major grid order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


class ImageEncoder(Module):
    def __init__(self, cfg: ImageEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        r_embed, r_cls, r_pos, r_blocks = split_rng(rng, 4)
        d = cfg.d_v
        self.patch_embed = Linear(cfg.channels * cfg.patch_size ** 2, d, r_embed)
        self.cls_token = Parameter(trunc_normal(r_cls, (1, 1, d)))
        self.pos_embed = Parameter(trunc_normal(r_pos, (1, cfg.num_patches + 1, d)))
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.mlp_ratio, r) for r in split_rng(r_blocks, cfg.depth)]
        self.norm = LayerNorm(d)
        if cfg.frozen:
            self.freeze()

    def _check(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise DimensionError(
                f"expected images of shape (C,H,W)=({cfg.channels},{cfg.height},{cfg.width}), got {images.shape}"
            )
        if not np.isfinite(images).all():
            raise InputError("image contains non-finite pixel values")
        return images

    def forward(self, images) -> tuple[Tensor, Tensor]:
        """Batched forward; returns (cls (B, d_v), patches (B, N_p, d_v)) tensors."""
        images = self._check(images)
        b = images.shape[0]
        tokens = self.patch_embed(Tensor(image_to_patches(images, self.cfg.patch_size)))
        cls = self.cls_token + Tensor(np.zeros((b, 1, 1), np.float32))
        x = concat([cls, tokens], axis=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0, :], x[:, 1:, :]

    __call__ = forward


def encode_image(image, encoder: ImageEncoder) -> ImageTokens:
    """Encode one (C, H, W) image or a (B, C, H, W) batch without recording gradients."""
    single = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
    with no_grad():
        cls, patches = encoder(image)
    if single:
        return ImageTokens(cls.data[0].copy(), patches.data[0].copy())
    return ImageTokens(cls.data.copy(), patches.data.copy())


def encode_images(images: np.ndarray, encoder: ImageEncoder, batch_size: int = 256) -> ImageTokens:
    """Encode a large image array in chunks."""
    cls_parts, patch_parts = [], []
    for start in range(0, len(images), batch_size):
        toks = encode_image(images[start:start + batch_size], encoder)
        cls_parts.append(toks.cls)
        patch_parts.append(toks.patches)
    return ImageTokens(np.concatenate(cls_parts), np.concatenate(patch_parts))


def _pooled(cls: Tensor, patches: Tensor) -> Tensor:
    return concat([cls, patches.mean(axis=1)], axis=-1)


@dataclass
class PretrainResult:
    encoder: ImageEncoder
    train_accuracy: float
    epoch_losses: list[float]


def pretrain_image_encoder(images: np.ndarray, labels: np.ndarray, cfg: ImageEncoderConfig,
                           epochs: int, num_classes: int | None = None, seed: int = 0,
                           batch_size: int = 32, peak_lr: float = 1e-3,
                           weight_decay: float = 0.05) -> PretrainResult:
    """Supervised warm-up of the toy encoder with a throwaway linear head on [CLS, mean patch].

    The returned encoder is frozen when ``cfg.frozen`` is set.
    """
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels, np.int64)
    if len(images) == 0:
        raise InputError("cannot pretrain on an empty dataset")
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    root = make_rng(seed)
    r_model, r_head, r_shuffle = split_rng(root, 3)
    encoder = ImageEncoder(cfg, r_model)
    encoder.unfreeze()
    head = Linear(2 * cfg.d_v, num_classes, r_head)
    params = encoder.trainable_parameters() + [("head." + n, p) for n, p in head.named_parameters()]
    opt = AdamW(params, weight_decay=weight_decay)
    steps_per_epoch = -(-len(images) // batch_size)
    sched = LrSchedule.from_epochs(steps_per_epoch, max(epochs, 1), warmup_epochs=1.0, peak_lr=peak_lr)
    losses = []
    step = 0
    for epoch in range(epochs):
        order = r_shuffle.permutation(len(images))
        total = 0.0
        for start in range(0, len(images), batch_size):
            idx = order[start:start + batch_size]
            loss = cross_entropy(head(_pooled(*encoder(images[idx]))), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, sched))
            step += 1
            total += float(loss.data) * len(idx)
        losses.append(total / len(images))
        log.info("image encoder epoch %d loss %.4f", epoch, losses[-1])
    with no_grad():
        correct = 0
        for start in range(0, len(images), 256):
            logits = head(_pooled(*encoder(images[start:start + 256])))
            correct += int((logits.data.argmax(-1) == labels[start:start + 256]).sum())
    acc = correct / len(images)
    if cfg.frozen:
        encoder.freeze()
    return PretrainResult(encoder, acc, losses)
