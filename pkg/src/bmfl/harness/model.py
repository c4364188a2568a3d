"""The assembled pipeline: image encoder -> brain encoder -> brain transformer -> fusion."""
from __future__ import annotations

import numpy as np

from bmfl.brain_encoder import SUBSETS, BrainEncoder
from bmfl.brain_transformer import BrainTransformer
from bmfl.errors import ConfigError
from bmfl.fusion import Fusion, FusionOutput
from bmfl.harness.config import RunConfig
from bmfl.harness.serialization import Checkpoint
from bmfl.image_encoder import ImageEncoder, encode_images
from bmfl.numerics import Module, Tensor, make_rng, no_grad, split_rng

GROUPS = ("image_encoder", "brain_encoder", "brain_transformer", "fusion")


class BMFLModel(Module):
    """Frozen encoders plus the trainable brain transformer and fusion head.

    Variants without fMRI hold no brain encoder or brain transformer at all.
    """

    def __init__(self, cfg: RunConfig, image_encoder: ImageEncoder | None = None,
                 brain_encoder: BrainEncoder | None = None, seed: int | None = None):
        cfg = cfg.canonical()
        self.cfg = cfg
        r_img, r_brain, r_bt, r_fusion = split_rng(make_rng(cfg.seed if seed is None else seed), 4)
        self.image_encoder = image_encoder or ImageEncoder(cfg.image_config(), r_img)
        self.image_encoder.freeze()
        if cfg.no_fmri:
            self.brain_encoder = None
            self.brain_transformer = None
        else:
            self.brain_encoder = brain_encoder or BrainEncoder(cfg.brain_encoder_config(), r_brain)
            self.brain_encoder.freeze()
            self.brain_transformer = BrainTransformer(cfg.brain_transformer_config(), r_bt)
        self.fusion = Fusion(cfg.fusion_config(), r_fusion)
        if self.image_encoder.cfg != cfg.image_config():
            raise ConfigError("image encoder checkpoint does not match the run configuration")
        if self.brain_encoder is not None and self.brain_encoder.cfg.num_voxels != cfg.brain_encoder_config().num_voxels:
            raise ConfigError("brain encoder checkpoint does not match the run configuration")

    # feature extraction of the frozen stages ---------------------------------
    def image_features(self, images: np.ndarray, batch_size: int = 256):
        toks = encode_images(images, self.image_encoder, batch_size)
        return toks.cls, toks.patches

    def brain_voxels(self, patches) -> Tensor | None:
        """Predicted fMRI restricted to the configured ROI subset (graph kept when patches carry one)."""
        if self.brain_encoder is None:
            return None
        voxels = self.brain_encoder(patches)
        if self.cfg.roi == "all":
            return voxels
        streams = SUBSETS[self.cfg.roi]
        keep = [np.arange(e.start, e.end) for e in self.brain_encoder.roi_map.entries if e.stream in streams]
        return voxels[:, np.concatenate(keep)]

    def cached_features(self, images: np.ndarray, batch_size: int = 256) -> dict:
        """All frozen-stage outputs for a set of images, computed once without a graph."""
        i_c, i_p = self.image_features(images, batch_size)
        voxels = None
        if self.brain_encoder is not None:
            parts = []
            with no_grad():
                for start in range(0, len(i_p), batch_size):
                    parts.append(self.brain_voxels(i_p[start:start + batch_size]).data)
            voxels = np.concatenate(parts) if parts else np.zeros((0, self.cfg.selected_voxels()), np.float32)
        return {"i_c": i_c, "i_p": i_p, "voxels": voxels}

    # trainable stages ------------------------------------------------------------
    def head(self, i_c, i_p, voxels=None) -> FusionOutput:
        if self.brain_transformer is None:
            return self.fusion(i_c, i_p)
        f_c, f_p = self.brain_transformer(voxels)
        return self.fusion(i_c, i_p, f_c, f_p)

    def forward(self, images) -> FusionOutput:
        """Full differentiable pipeline from raw images."""
        i_c, i_p = self.image_encoder(images)
        return self.head(i_c, i_p, self.brain_voxels(i_p))

    __call__ = forward

    # persistence -------------------------------------------------------------------
    def to_checkpoint(self, optimizer_state=None, extra: dict | None = None) -> Checkpoint:
        header = {"kind": "bmfl", "config": self.cfg.to_dict(), **(extra or {})}
        return Checkpoint(self.state_dict(), header, optimizer_state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "BMFLModel":
        if ckpt.kind != "bmfl":
            raise ConfigError(f"expected a BMFL model checkpoint, got kind {ckpt.kind!r}")
        model = cls(RunConfig.from_dict(ckpt.header["config"]))
        model.load_state_dict(ckpt.params)
        return model


def parameter_group(name: str) -> str:
    return name.split(".", 1)[0]
