"""Voxel-response prediction from image patch tokens.

A DETR-style decoder: one learned query per ROI (8 streams x 2 hemispheres)
cross-attends to the projected patch tokens, and each query owns a linear
regression head that emits that ROI's voxel slice. Also hosts the ROI map,
ROI subset selection, the synthetic linear teacher used as pretraining
targets, and the noise-ceiling-normalised encoding score.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from bmfl.errors import ConfigError, DimensionError, InputError
from bmfl.image_encoder import ImageTokens
from bmfl.numerics import (
    AdamW,
    DecoderBlock,
    LayerNorm,
    Linear,
    LrSchedule,
    Module,
    Parameter,
    Tensor,
    lr_at,
    make_rng,
    no_grad,
    split_rng,
    trunc_normal,
)

log = logging.getLogger(__name__)

HEMISPHERES = ("left", "right")
STREAMS = ("early", "mid-ventral", "mid-lateral", "mid-parietal", "ventral", "lateral", "parietal", "unknown")
SUBSETS = {
    "lvc": frozenset({"early"}),
    "hvc": frozenset({"ventral", "lateral", "parietal"}),
    "rest": frozenset({"mid-ventral", "mid-lateral", "mid-parietal", "unknown"}),
    "all": frozenset(STREAMS),
}


@dataclass(frozen=True)
class RoiEntry:
    hemisphere: str
    stream: str
    start: int
    end: int

    @property
    def name(self) -> str:
        return f"{self.hemisphere}:{self.stream}"

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class RoiMap:
    entries: tuple

    def __post_init__(self):
        pos = 0
        for e in self.entries:
            if e.start != pos or e.end <= e.start:
                raise InputError(f"ROI ranges must be contiguous, ascending and non-empty; bad entry {e}")
            pos = e.end

    @property
    def num_voxels(self) -> int:
        return self.entries[-1].end if self.entries else 0

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def default(cls, voxels_per_roi: int = 192) -> "RoiMap":
        entries = []
        for h in HEMISPHERES:
            for s in STREAMS:
                start = len(entries) * voxels_per_roi
                entries.append(RoiEntry(h, s, start, start + voxels_per_roi))
        return cls(tuple(entries))

    @classmethod
    def from_table(cls, table: Sequence[tuple[str, int, int]]) -> "RoiMap":
        entries = []
        for name, start, end in table:
            hemisphere, _, stream = name.partition(":")
            entries.append(RoiEntry(hemisphere, stream, int(start), int(end)))
        return cls(tuple(entries))

    def to_table(self) -> list[tuple[str, int, int]]:
        return [(e.name, e.start, e.end) for e in self.entries]


@dataclass
class FmriRecord:
    """Voxel responses (V,) or a batch (B, V) with their ROI partition."""

    voxels: np.ndarray = field(repr=False)
    roi_map: RoiMap

    def __post_init__(self):
        if self.voxels.shape[-1] != self.roi_map.num_voxels:
            raise DimensionError(f"{self.voxels.shape[-1]} voxels but ROI map covers {self.roi_map.num_voxels}")

    def __len__(self) -> int:
        return self.voxels.shape[0] if self.voxels.ndim == 2 else 1

    def __getitem__(self, index) -> "FmriRecord":
        return FmriRecord(self.voxels[index], self.roi_map)


def select_rois(rec: FmriRecord, subset: str) -> FmriRecord:
    """Restrict to the ROIs of ``subset`` (lvc, hvc, rest or all), re-basing the map."""
    key = subset.lower()
    if key not in SUBSETS:
        raise InputError(f"unknown ROI subset {subset!r}; expected one of {sorted(SUBSETS)}")
    chosen = [e for e in rec.roi_map.entries if e.stream in SUBSETS[key]]
    if not chosen:
        raise InputError(f"ROI subset {subset!r} selects no entries of the map")
    if key == "all":
        return rec
    pieces, entries, pos = [], [], 0
    for e in chosen:
        pieces.append(rec.voxels[..., e.start:e.end])
        entries.append(RoiEntry(e.hemisphere, e.stream, pos, pos + e.size))
        pos += e.size
    return FmriRecord(np.concatenate(pieces, axis=-1), RoiMap(tuple(entries)))


@dataclass(frozen=True)
class BrainEncoderConfig:
    num_queries: int = 16
    depth: int = 2
    d_model: int = 64
    d_in: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    voxels_per_roi: int = 192
    final_norm: bool = False
    frozen: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.num_queries != len(HEMISPHERES) * len(STREAMS) and self.num_queries < 1:
            raise ConfigError("need at least one query")

    @property
    def num_voxels(self) -> int:
        return self.num_queries * self.voxels_per_roi

    def roi_map(self) -> RoiMap:
        if self.num_queries == len(HEMISPHERES) * len(STREAMS):
            return RoiMap.default(self.voxels_per_roi)
        # reduced maps (tiny test configs) keep the hemisphere-major naming
        entries = []
        for q in range(self.num_queries):
            h, s = HEMISPHERES[q // len(STREAMS) % 2], STREAMS[q % len(STREAMS)]
            entries.append(RoiEntry(h, s, q * self.voxels_per_roi, (q + 1) * self.voxels_per_roi))
        return RoiMap(tuple(entries))


class BrainEncoder(Module):
    def __init__(self, cfg: BrainEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        r_in, r_q, r_blocks, r_head = split_rng(rng, 4)
        d = cfg.d_model
        self.input_proj = Linear(cfg.d_in, d, r_in)
        self.queries = Parameter(trunc_normal(r_q, (1, cfg.num_queries, d), std=1.0))
        self.blocks = [DecoderBlock(d, cfg.heads, cfg.mlp_ratio, r) for r in split_rng(r_blocks, cfg.depth)]
        self.norm = LayerNorm(d) if cfg.final_norm else None
        self.head_weight = Parameter(trunc_normal(r_head, (cfg.num_queries, d, cfg.voxels_per_roi)))
        self.head_bias = Parameter(np.zeros((cfg.num_queries, cfg.voxels_per_roi), np.float32))
        self.roi_map = cfg.roi_map()
        if cfg.frozen:
            self.freeze()

    def forward(self, patches) -> Tensor:
        """(B, N_p, d_in) patch tokens -> (B, V) voxel predictions ordered by the ROI map."""
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        if patches.ndim == 2:
            patches = patches.reshape(1, *patches.shape)
        if patches.ndim != 3 or patches.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"brain encoder expects (B, N, {self.cfg.d_in}) patches, got {patches.shape}")
        b = patches.shape[0]
        memory = self.input_proj(patches)
        x = self.queries + Tensor(np.zeros((b, 1, 1), np.float32))
        for block in self.blocks:
            x = block(x, memory)
        if self.norm is not None:
            x = self.norm(x)
        q, d, k = self.cfg.num_queries, self.cfg.d_model, self.cfg.voxels_per_roi
        out = x.reshape(b, q, 1, d) @ self.head_weight
        out = out.reshape(b, q, k) + self.head_bias
        return out.reshape(b, q * k)

    __call__ = forward


def predict_fmri(patches, encoder: BrainEncoder, batch_size: int = 256) -> FmriRecord:
    """Predict voxel responses for one (N_p, d) patch matrix or a (B, N_p, d) batch."""
    arr = np.asarray(patches.data if isinstance(patches, Tensor) else patches, np.float32)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    parts = []
    with no_grad():
        for start in range(0, len(arr), batch_size):
            parts.append(encoder(arr[start:start + batch_size]).data)
    voxels = np.concatenate(parts)
    return FmriRecord(voxels[0] if single else voxels, encoder.roi_map)


# synthetic targets ------------------------------------------------------------
@dataclass
class LinearTeacher:
    """Frozen random linear map from mean patch token to z-scored voxel responses."""

    weight: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, tokens: ImageTokens, num_voxels: int, seed: int = 0) -> "LinearTeacher":
        rng = make_rng(seed)
        feats = tokens.patches.mean(axis=1).astype(np.float64)
        weight = rng.standard_normal((feats.shape[1], num_voxels)) / np.sqrt(feats.shape[1])
        signal = feats @ weight
        std = signal.std(axis=0)
        std[std == 0] = 1.0
        return cls(weight, signal.mean(axis=0), std)

    def __call__(self, tokens: ImageTokens, noise_sigma: float = 0.0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
        feats = tokens.patches.mean(axis=1).astype(np.float64)
        z = (feats @ self.weight - self.mean) / self.std
        if noise_sigma > 0:
            rng = make_rng(0) if rng is None else rng
            z = z + rng.normal(0.0, noise_sigma, z.shape)
        return z.astype(np.float32)


def noise_ceiling(targets: np.ndarray, noise_sigma: float) -> np.ndarray:
    """Per-voxel ceiling 1 - sigma^2 / var(target), clipped to [0.1, 1]."""
    var = np.asarray(targets, np.float64).var(axis=0)
    with np.errstate(divide="ignore"):
        nc = 1.0 - noise_sigma ** 2 / np.where(var > 0, var, np.inf)
    return np.clip(nc, 0.1, 1.0)


def voxel_correlations(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-voxel Pearson R across samples (two-pass); NaN where either side is constant."""
    p = np.asarray(pred, np.float64)
    t = np.asarray(truth, np.float64)
    pc = p - p.mean(axis=0)
    tc = t - t.mean(axis=0)
    num = (pc * tc).sum(axis=0)
    den = np.sqrt((pc * pc).sum(axis=0)) * np.sqrt((tc * tc).sum(axis=0))
    const = (np.ptp(p, axis=0) == 0) | (np.ptp(t, axis=0) == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(const, np.nan, num / np.where(const, 1.0, den))
    return np.clip(r, -1.0, 1.0)


def _as_matrix(records) -> np.ndarray:
    if isinstance(records, FmriRecord):
        return np.atleast_2d(records.voxels)
    if isinstance(records, np.ndarray):
        return np.atleast_2d(records)
    return np.stack([r.voxels if isinstance(r, FmriRecord) else np.asarray(r) for r in records])


def encoding_score(pred, truth, noise_ceiling) -> float:
    """Encoding quality m = 100 * mean over voxels of R^2 / NC.

    Voxels with zero variance in either prediction or truth have undefined R;
    they are excluded and counted in a warning.
    """
    p, t = _as_matrix(pred), _as_matrix(truth)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ")
    nc = np.broadcast_to(np.asarray(noise_ceiling, np.float64), (p.shape[1],))
    if (nc <= 0).any():
        raise InputError("noise ceiling entries must be positive")
    r = voxel_correlations(p, t)
    valid = ~np.isnan(r)
    excluded = int((~valid).sum())
    if excluded:
        warnings.warn(f"encoding_score: {excluded} zero-variance voxel(s) excluded", RuntimeWarning, stacklevel=2)
    if not valid.any():
        raise InputError("no voxel has a defined correlation")
    return float(np.mean(r[valid] ** 2 / nc[valid]) * 100.0)


# pretraining -------------------------------------------------------------------
@dataclass
class BrainPretrainResult:
    encoder: BrainEncoder
    final_mse: float
    roi_correlation: dict
    mean_voxel_r: float
    epoch_losses: list[float]


def _stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray, RoiMap]:
    patches, voxels, roi_map = [], [], None
    for tokens, rec in pairs:
        if roi_map is None:
            roi_map = rec.roi_map
        elif rec.voxels.shape[-1] != roi_map.num_voxels or rec.roi_map != roi_map:
            raise InputError(
                f"inconsistent voxel count across pairs: {rec.voxels.shape[-1]} vs {roi_map.num_voxels}"
            )
        patches.append(np.atleast_3d(tokens.patches) if tokens.patches.ndim == 3 else tokens.patches[None])
        voxels.append(np.atleast_2d(rec.voxels))
    if roi_map is None:
        raise InputError("no training pairs given")
    return np.concatenate(patches), np.concatenate(voxels), roi_map


def pretrain_brain_encoder(pairs, cfg: BrainEncoderConfig, epochs: int, seed: int = 0,
                           batch_size: int = 64, peak_lr: float = 2e-3, weight_decay: float = 0.0,
                           encoder: BrainEncoder | None = None) -> BrainPretrainResult:
    """Fit the decoder to (image tokens, voxel responses) pairs by minimising MSE.

    ``pairs`` is a sequence of (ImageTokens, FmriRecord); batched tokens/records
    are accepted as single pairs.
    """
    patches, targets, roi_map = _stack_pairs(pairs)
    if targets.shape[1] != cfg.num_voxels:
        raise InputError(f"targets have {targets.shape[1]} voxels, config expects {cfg.num_voxels}")
    root = make_rng(seed)
    r_model, r_shuffle = split_rng(root, 2)
    encoder = BrainEncoder(cfg, r_model) if encoder is None else encoder
    encoder.unfreeze()
    opt = AdamW(encoder.trainable_parameters(), weight_decay=weight_decay)
    steps = -(-len(patches) // batch_size)
    sched = LrSchedule.from_epochs(steps, max(epochs, 1), warmup_epochs=1.0, peak_lr=peak_lr)
    losses, step = [], 0
    for epoch in range(epochs):
        order = r_shuffle.permutation(len(patches))
        total = 0.0
        for start in range(0, len(patches), batch_size):
            idx = order[start:start + batch_size]
            diff = encoder(patches[idx]) - Tensor(targets[idx])
            loss = (diff * diff).mean()
            opt.zero_grad()
            loss.backward()
            opt.step(lr_at(step, sched))
            step += 1
            total += float(loss.data) * len(idx)
        losses.append(total / len(patches))
        log.info("brain encoder epoch %d mse %.5f", epoch, losses[-1])
    if cfg.frozen:
        encoder.freeze()
    pred = predict_fmri(patches, encoder).voxels
    mse = float(np.mean((pred.astype(np.float64) - targets) ** 2))
    r = voxel_correlations(pred, targets)
    per_roi = {e.name: float(np.nanmean(r[e.start:e.end])) for e in roi_map.entries}
    return BrainPretrainResult(encoder, mse, per_roi, float(np.nanmean(r)), losses)
