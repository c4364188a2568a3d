"""Procedural labelled images and the low-light / masked corruption generators.

Every sample is rendered from its own seed derived from ``(dataset seed, global
index)``, so datasets are reproducible and independent of batching or worker
count. Train and validation use disjoint index ranges of the same generator,
making them i.i.d.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from bmfl.errors import ConfigError, InputError

SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond", "bar", "ellipse")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 8
    samples_per_class: int = 200
    val_samples_per_class: int = 50
    height: int = 32
    width: int = 32
    seed: int = 0
    hue_jitter: float = 0.05
    texture_bands: tuple = ((0.3, 0.8), (4.0, 6.0))
    scale_range: tuple = (0.45, 0.8)
    background_noise: float = 0.03
    hue_groups: int = 4
    pair_hue_offset: float = 0.08

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1 or self.val_samples_per_class < 0:
            raise InputError("dataset needs at least one class and one training sample per class")

    def class_params(self, c: int) -> dict:
        """Shape family, texture frequency band and base hue of class ``c``."""
        return {
            "shape": SHAPES[c % len(SHAPES)],
            "band": self.texture_bands[(c // self.hue_groups) % len(self.texture_bands)],
            "hue": (c % self.hue_groups) / self.hue_groups + (c // self.hue_groups) * self.pair_hue_offset,
        }


@dataclass
class Split:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "split"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Split":
        return Split(self.images[index], self.labels[index], self.name, dict(self.meta))


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def hsv_to_rgb(h, s, v) -> np.ndarray:
    """Vectorised HSV -> RGB; inputs broadcast, output has a trailing channel axis."""
    h = np.asarray(h, np.float64) % 1.0
    s, v = np.asarray(s, np.float64), np.asarray(v, np.float64)
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(np.broadcast(h, s, v).shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        for ch, comp in enumerate((r, g, b)):
            out[..., ch] = np.where(sel, np.broadcast_to(comp, out.shape[:-1]), out[..., ch])
    return out


def _shape_mask(shape: str, dx: np.ndarray, dy: np.ndarray, s: float) -> np.ndarray:
    r = np.hypot(dx, dy)
    if shape == "disk":
        return r < s
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) < 0.8 * s
    if shape == "triangle":
        return (dy < 0.8 * s) & (dy > -s) & (np.abs(dx) < 0.55 * (dy + s))
    if shape == "ring":
        return (r < s) & (r > 0.55 * s)
    if shape == "cross":
        return ((np.abs(dx) < 0.3 * s) & (np.abs(dy) < s)) | ((np.abs(dy) < 0.3 * s) & (np.abs(dx) < s))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) < s
    if shape == "bar":
        return (np.abs(dy) < 0.35 * s) & (np.abs(dx) < s)
    if shape == "ellipse":
        return (dx / (0.5 * s)) ** 2 + (dy / s) ** 2 < 1.0
    raise ConfigError(f"unknown shape {shape!r}")


def render_sample(spec: SyntheticDatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    params = spec.class_params(label)
    ys, xs = np.meshgrid(np.linspace(-1, 1, spec.height), np.linspace(-1, 1, spec.width), indexing="ij")
    cx, cy = rng.uniform(-0.3, 0.3, size=2)
    scale = rng.uniform(*spec.scale_range)
    dx, dy = xs - cx, ys - cy
    mask = _shape_mask(params["shape"], dx, dy, scale)

    freq = rng.uniform(*params["band"])
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (dx * np.cos(theta) + dy * np.sin(theta)) + phase)
    hue = params["hue"] + rng.uniform(-spec.hue_jitter, spec.hue_jitter)
    fg = hsv_to_rgb(hue, rng.uniform(0.6, 0.9), 0.3 + 0.7 * stripes)

    bg_hue = rng.uniform()
    bg = hsv_to_rgb(bg_hue, rng.uniform(0.0, 0.25), rng.uniform(0.15, 0.45))
    bg = np.broadcast_to(bg, fg.shape) + rng.normal(0, spec.background_noise, fg.shape)
    img = np.where(mask[..., None], fg, bg)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def _render_range(spec: SyntheticDatasetSpec, start: int, per_class: int, name: str) -> Split:
    n = per_class * spec.num_classes
    labels = np.tile(np.arange(spec.num_classes), per_class).astype(np.int64)
    images = np.empty((n, 3, spec.height, spec.width), np.float32)
    for i in range(n):
        images[i] = render_sample(spec, int(labels[i]), item_rng(spec.seed, start + i))
    return Split(images, labels, name, {"seed": spec.seed, "first_index": start})


def generate_dataset(spec: SyntheticDatasetSpec) -> tuple[Split, Split]:
    """Render (train, val) splits; val uses the indices right after train's."""
    n_train = spec.samples_per_class * spec.num_classes
    train = _render_range(spec, 0, spec.samples_per_class, "train")
    val = _render_range(spec, n_train, spec.val_samples_per_class, "clean_val")
    return train, val


# corruptions ---------------------------------------------------------------
@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "low_light"
    severity: float = 0.7
    mask_ratio: float = 0.25
    mask_mode: str = "random"
    seed: int = 0
    cell_size: int = 8
    gamma: float = 2.2
    noise: bool = True
    shot_noise: float = 0.01
    read_noise: float = 0.005

    def __post_init__(self):
        if self.kind not in ("low_light", "masked"):
            raise InputError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 < self.severity <= 1.0:
            raise InputError(f"severity must lie in (0, 1], got {self.severity}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise InputError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.mask_mode not in ("random", "saliency"):
            raise InputError(f"unknown mask mode {self.mask_mode!r}")
        if self.cell_size < 1:
            raise InputError("cell_size must be positive")


def corrupt_low_light(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Darken in linear light, add shot/read noise, re-apply gamma; output in [0, 1]."""
    if not 0.0 < spec.severity <= 1.0:
        raise InputError(f"severity must lie in (0, 1], got {spec.severity}")
    rng = item_rng(spec.seed, 0) if rng is None else rng
    linear = np.clip(np.asarray(image, np.float64), 0.0, 1.0) ** spec.gamma
    linear = linear * (1.0 - spec.severity)
    if spec.noise:
        sigma = np.sqrt(spec.shot_noise * linear + spec.read_noise ** 2)
        linear = linear + rng.normal(size=linear.shape) * sigma
    out = np.clip(linear, 0.0, 1.0) ** (1.0 / spec.gamma)
    return out.astype(np.float32)


def cell_energy(image: np.ndarray, cell: int) -> np.ndarray:
    """Summed squared luminance gradient per (cell x cell) block; shape (H/cell, W/cell)."""
    lum = np.asarray(image, np.float64).mean(axis=0)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = np.diff(lum, axis=1)
    gy[:-1, :] = np.diff(lum, axis=0)
    e = gx ** 2 + gy ** 2
    h, w = lum.shape
    return e.reshape(h // cell, cell, w // cell, cell).sum(axis=(1, 3))


def corrupt_masked(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Zero ⌊mask_ratio · n_cells⌋ grid cells, chosen at random or by gradient energy."""
    if not 0.0 <= spec.mask_ratio < 1.0:
        raise InputError(f"mask_ratio must lie in [0, 1), got {spec.mask_ratio}")
    image = np.asarray(image, np.float32)
    c, h, w = image.shape
    cell = spec.cell_size
    if h % cell or w % cell:
        raise InputError(f"image {h}x{w} not divisible into {cell}-pixel cells")
    gh, gw = h // cell, w // cell
    n_cells = gh * gw
    k = int(np.floor(spec.mask_ratio * n_cells))
    out = image.copy()
    if k == 0:
        return out
    if spec.mask_mode == "random":
        rng = item_rng(spec.seed, 0) if rng is None else rng
        chosen = rng.choice(n_cells, size=k, replace=False)
    else:
        energy = cell_energy(image, cell).reshape(-1)
        chosen = np.argsort(-energy, kind="stable")[:k]
    for idx in chosen:
        r, q = divmod(int(idx), gw)
        out[:, r * cell:(r + 1) * cell, q * cell:(q + 1) * cell] = 0.0
    return out


def corrupt(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if spec.kind == "low_light":
        return corrupt_low_light(image, spec, rng)
    return corrupt_masked(image, spec, rng)


@dataclass(frozen=True)
class ManifestRow:
    index: int
    kind: str
    severity: float
    seed: int


def corrupt_split(split: Split, spec: CorruptionSpec, name: str | None = None) -> tuple[Split, list[ManifestRow]]:
    """Corrupt every image with a per-item seed derived from (spec.seed, index); labels copied."""
    images = np.empty_like(split.images)
    rows = []
    level = spec.severity if spec.kind == "low_light" else spec.mask_ratio
    for i in range(len(split)):
        item_seed = int(np.random.SeedSequence(spec.seed, spawn_key=(i,)).generate_state(1)[0])
        images[i] = corrupt(split.images[i], spec, np.random.Generator(np.random.PCG64(item_seed)))
        rows.append(ManifestRow(i, spec.kind, level, item_seed))
    out = Split(images, split.labels.copy(), name or spec.kind, {**split.meta, "corruption": spec.kind})
    return out, rows


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "kind", "severity", "seed"])
        for r in rows:
            writer.writerow([r.index, r.kind, repr(float(r.severity)), r.seed])


def read_manifest(path) -> list[ManifestRow]:
    with open(Path(path), newline="") as fh:
        return [ManifestRow(int(r["index"]), r["kind"], float(r["severity"]), int(r["seed"]))
                for r in csv.DictReader(fh)]


def with_severity(spec: CorruptionSpec, **changes) -> CorruptionSpec:
    return replace(spec, **changes)
