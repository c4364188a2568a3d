"""Run configuration: one flat record of every knob, loadable from key=value text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace
from pathlib import Path

from bmfl.brain_encoder import HEMISPHERES, SUBSETS, BrainEncoderConfig
from bmfl.brain_transformer import BrainTransformerConfig
from bmfl.data import CorruptionSpec, SyntheticDatasetSpec
from bmfl.errors import BMFLError, ConfigError
from bmfl.fusion import FusionConfig
from bmfl.image_encoder import ImageEncoderConfig
from bmfl.objective import LossConfig

ROI_CHOICES = ("all", "lvc", "hvc")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # data
    num_classes: int = 8
    samples_per_class: int = 200
    val_samples_per_class: int = 50
    image_size: int = 32
    data_seed: int = 0
    severity: float = 0.7
    mask_ratio: float = 0.25
    mask_mode: str = "random"
    corruption_seed: int = 1
    # image encoder
    patch_size: int = 8
    d_v: int = 64
    image_depth: int = 4
    image_heads: int = 4
    image_pretrain_epochs: int = 10
    # brain encoder
    brain_depth: int = 2
    brain_d_model: int = 64
    brain_heads: int = 4
    voxels_per_roi: int = 192
    brain_pretrain_epochs: int = 10
    teacher_noise: float = 0.1
    # brain transformer
    kernel: int = 192
    d_b: int = 64
    bt_depth: int = 2
    bt_heads: int = 4
    # fusion and loss
    d_f: int = 64
    fusion_heads: int = 1
    head_hidden: int = 0
    alpha: float = -0.4
    # optimisation
    batch_size: int = 64
    epochs: int = 20
    peak_lr: float = 5e-5
    warmup_epochs: float = 1.5
    floor_lr: float = 0.0
    weight_decay: float = 0.02
    seed: int = 0
    # ablation flags
    no_fmri: bool = False
    no_cross_attention: bool = False
    no_fusion_loss: bool = False
    roi: str = "all"
    # paths
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if self.roi not in ROI_CHOICES:
            raise ConfigError(f"roi must be one of {ROI_CHOICES}, got {self.roi!r}")
        if self.voxels_per_roi % self.kernel:
            raise ConfigError(f"voxels_per_roi={self.voxels_per_roi} not divisible by kernel={self.kernel}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.alpha > 0:
            raise ConfigError(f"alpha must be <= 0, got {self.alpha}")
        # build every sub-config once so invalid combinations fail at load time
        try:
            self.image_config(), self.brain_encoder_config(), self.fusion_config()
            self.brain_transformer_config(), self.dataset_spec(), self.loss_config()
        except BMFLError as exc:
            raise ConfigError(str(exc)) from exc

    # derived module configs ---------------------------------------------------
    def image_config(self) -> ImageEncoderConfig:
        return ImageEncoderConfig(height=self.image_size, width=self.image_size, patch_size=self.patch_size,
                                  d_v=self.d_v, depth=self.image_depth, heads=self.image_heads)

    def brain_encoder_config(self) -> BrainEncoderConfig:
        return BrainEncoderConfig(depth=self.brain_depth, d_model=self.brain_d_model, d_in=self.d_v,
                                  heads=self.brain_heads, voxels_per_roi=self.voxels_per_roi)

    def selected_voxels(self) -> int:
        return len(HEMISPHERES) * len(SUBSETS[self.roi]) * self.voxels_per_roi

    def brain_transformer_config(self) -> BrainTransformerConfig:
        return BrainTransformerConfig(kernel=self.kernel, d_b=self.d_b, depth=self.bt_depth, heads=self.bt_heads,
                                      num_voxels=self.selected_voxels())

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(d_v=self.d_v, d_b=self.d_b, d_f=self.d_f, heads=self.fusion_heads,
                            num_classes=self.num_classes, use_cross_attention=not self.no_cross_attention,
                            use_fmri=not self.no_fmri, head_hidden=self.head_hidden)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, enabled_fusion_loss=not self.no_fusion_loss)

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(num_classes=self.num_classes, samples_per_class=self.samples_per_class,
                                    val_samples_per_class=self.val_samples_per_class, height=self.image_size,
                                    width=self.image_size, seed=self.data_seed)

    def corruption_specs(self) -> dict[str, CorruptionSpec]:
        return {
            "low_light": CorruptionSpec("low_light", severity=self.severity, seed=self.corruption_seed,
                                        cell_size=self.patch_size),
            "masked": CorruptionSpec("masked", mask_ratio=self.mask_ratio, mask_mode=self.mask_mode,
                                     seed=self.corruption_seed, cell_size=self.patch_size),
        }

    # ablation bookkeeping -----------------------------------------------------
    def canonical(self) -> "RunConfig":
        """Collapse flag combinations that describe the same model and objective.

        Without fMRI there is no cross-attention; without cross-attention there
        are no fusion features to correlate; a zero alpha and a disabled fusion
        loss are the same objective.
        """
        cfg = self
        if cfg.no_fmri:
            cfg = replace(cfg, no_cross_attention=True, roi="all")
        if cfg.no_cross_attention or cfg.alpha == 0.0:
            cfg = replace(cfg, no_fusion_loss=True)
        if cfg.no_fusion_loss:
            cfg = replace(cfg, alpha=0.0)
        return cfg

    @property
    def variant(self) -> str:
        c = self.canonical()
        if c.no_fmri:
            return "no_fmri"
        if c.no_cross_attention:
            name = "no_cross_attention"
        elif c.no_fusion_loss:
            name = "no_fusion_loss"
        else:
            name = "full"
        return name if c.roi == "all" else f"{name}_{c.roi}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        return cls(**values)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return replace(self, **coerce_values(overrides))


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(RunConfig)}


def coerce_values(raw: dict) -> dict:
    """Convert string values to the types of the RunConfig defaults."""
    types = _field_types()
    out = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = types[key]
        if not isinstance(value, str):
            out[key] = value
            continue
        text = value.strip()
        try:
            if kind is bool:
                low = text.lower()
                if low not in _TRUE | _FALSE:
                    raise ValueError(text)
                out[key] = low in _TRUE
            elif kind is int:
                out[key] = int(text)
            elif kind is float:
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return out


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the key=value file at ``path``, then ``overrides``."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from exc
        values.update(parse_key_values(text, str(p)))
    values.update(overrides or {})
    return RunConfig.from_dict(coerce_values(values))


def tiny_config(**changes) -> RunConfig:
    """Very small dimensions for finite-difference checks (d <= 8, batch 2)."""
    base = dict(num_classes=3, image_size=8, patch_size=4, d_v=8, image_depth=1, image_heads=2,
                brain_depth=1, brain_d_model=8, brain_heads=2, voxels_per_roi=4, kernel=4, d_b=8,
                bt_depth=1, bt_heads=2, d_f=8, batch_size=2)
    base.update(changes)
    return RunConfig(**base)
