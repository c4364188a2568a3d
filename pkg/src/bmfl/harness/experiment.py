"""End-to-end experiment plumbing: data, encoder warm-up, ablation matrix, gradient audit."""
from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from bmfl.brain_encoder import FmriRecord, LinearTeacher, predict_fmri, pretrain_brain_encoder, voxel_correlations
from bmfl.data import Split, corrupt_split, generate_dataset
from bmfl.errors import BMFLError
from bmfl.harness.config import RunConfig, tiny_config
from bmfl.harness.model import BMFLModel, parameter_group
from bmfl.harness.training import EvalReport, evaluate, train
from bmfl.image_encoder import encode_images, pretrain_image_encoder
from bmfl.numerics import grad_check_report, make_rng
from bmfl.objective import total_loss

log = logging.getLogger(__name__)

EVAL_SPLITS = ("clean_val", "low_light", "masked")


def make_splits(cfg: RunConfig) -> dict[str, Split]:
    """Train, clean validation and the two corrupted copies of the validation split."""
    train_split, val = generate_dataset(cfg.dataset_spec())
    splits = {"train": train_split, "clean_val": val}
    for name, spec in cfg.corruption_specs().items():
        splits[name] = corrupt_split(val, spec, name)[0]
    return splits


@dataclass
class Encoders:
    image: object
    brain: object
    image_train_accuracy: float
    brain_val_r: float


def pretrain_image(cfg: RunConfig, train_split: Split):
    return pretrain_image_encoder(train_split.images, train_split.labels, cfg.image_config(),
                                  cfg.image_pretrain_epochs, num_classes=cfg.num_classes, seed=cfg.seed)


def brain_targets(cfg: RunConfig, image_encoder, train_split: Split):
    """Synthetic voxel targets: a fixed random linear read-out of the mean patch token plus noise."""
    brain_cfg = cfg.brain_encoder_config()
    tokens = encode_images(train_split.images, image_encoder)
    teacher = LinearTeacher.fit(tokens, brain_cfg.num_voxels, seed=cfg.seed)
    targets = teacher(tokens, cfg.teacher_noise, make_rng(cfg.seed + 1))
    return tokens, teacher, FmriRecord(targets, brain_cfg.roi_map())


def pretrain_brain(cfg: RunConfig, image_encoder, train_split: Split, val_split: Split | None = None):
    """Fit the brain encoder; returns (pretrain result, held-out mean voxel R, training targets)."""
    tokens, teacher, record = brain_targets(cfg, image_encoder, train_split)
    brain = pretrain_brain_encoder([(tokens, record)], cfg.brain_encoder_config(), cfg.brain_pretrain_epochs,
                                   seed=cfg.seed)
    val_r = float("nan")
    if val_split is not None and len(val_split):
        vt = encode_images(val_split.images, image_encoder)
        pred = predict_fmri(vt.patches, brain.encoder).voxels
        val_r = float(np.nanmean(voxel_correlations(pred, teacher(vt))))
    return brain, val_r, record


def pretrain_encoders(cfg: RunConfig, train_split: Split, val_split: Split | None = None) -> Encoders:
    """Warm up the image encoder on labels, then the brain encoder on synthetic voxel targets."""
    img = pretrain_image(cfg, train_split)
    brain, val_r, _ = pretrain_brain(cfg, img.encoder, train_split, val_split)
    return Encoders(img.encoder, brain.encoder, img.train_accuracy, val_r)


def run_variant(cfg: RunConfig, splits: dict, encoders: Encoders) -> EvalReport:
    result = train(cfg, splits["train"], encoders.image, encoders.brain)
    return evaluate(result.model, {k: splits[k] for k in EVAL_SPLITS if k in splits})


# ablation matrix -----------------------------------------------------------------------
ABLATIONS = (
    ("full", {}),
    ("no_fmri", {"no_fmri": True}),
    ("no_cross_attention", {"no_cross_attention": True}),
    ("no_fusion_loss", {"no_fusion_loss": True}),
    ("full_lvc", {"roi": "lvc"}),
    ("full_hvc", {"roi": "hvc"}),
)


@dataclass
class AblationRow:
    variant: str
    status: str
    report: EvalReport | None = None
    error: str = ""

    def accuracy(self, split: str) -> float:
        return self.report.accuracy(split) if self.report else float("nan")


def ablation_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    base = replace(base, no_fmri=False, no_cross_attention=False, no_fusion_loss=False, roi="all")
    return [(name, replace(base, **flags).canonical()) for name, flags in ABLATIONS]


def _run_row(args) -> AblationRow:
    name, cfg, splits, encoders = args
    try:
        return AblationRow(name, "ok", run_variant(cfg, splits, encoders))
    except BMFLError as exc:
        log.error("ablation %s failed: %s", name, exc)
        return AblationRow(name, "failed", error=str(exc))


def run_ablation_matrix(base: RunConfig, splits: dict, encoders: Encoders, workers: int = 1) -> list[AblationRow]:
    """Train and evaluate every ablation variant with shared data, encoders and seed.

    A failing variant is recorded as a failed row; the others still run.
    ``workers > 1`` runs variants in separate processes.
    """
    jobs = [(name, cfg, splits, encoders) for name, cfg in ablation_configs(base)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_row, jobs))
    return [_run_row(job) for job in jobs]


def masked_gap(rows: list[AblationRow]) -> float:
    """Signed masked-split accuracy of the full model minus the concatenation-only variant."""
    by_name = {r.variant: r for r in rows}
    return by_name["full"].accuracy("masked") - by_name["no_cross_attention"].accuracy("masked")


def format_ablation(rows: list[AblationRow]) -> str:
    header = f"{'variant':<20}" + "".join(f"{s:>11}" for s in EVAL_SPLITS) + f"{'corrupted':>11}  status"
    lines = [header, "-" * len(header)]
    for r in rows:
        accs = [r.accuracy(s) for s in EVAL_SPLITS]
        corrupted = float(np.mean(accs[1:]))
        lines.append(f"{r.variant:<20}" + "".join(f"{a:>11.4f}" for a in accs) + f"{corrupted:>11.4f}  "
                     + (r.status if r.status == "ok" else f"failed: {r.error}"))
    if {"full", "no_cross_attention"} <= {r.variant for r in rows}:
        lines.append(f"masked gap (full - concat-only): {masked_gap(rows):+.4f}")
    return "\n".join(lines)


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "status", *EVAL_SPLITS, "mean_corrupted", "error"])
        for r in rows:
            accs = [r.accuracy(s) for s in EVAL_SPLITS]
            writer.writerow([r.variant, r.status, *(repr(a) for a in accs), repr(float(np.mean(accs[1:]))), r.error])


# gradient audit ------------------------------------------------------------------------
@dataclass(frozen=True)
class GradRow:
    name: str
    group: str
    trainable: bool
    size: int
    max_rel_error: float


def gradcheck_all(cfg: RunConfig | None = None, eps: float = 1e-3, batch: int = 2,
                  scale: float = 0.5) -> list[GradRow]:
    """Finite-difference audit of every parameter of the full model at tiny width.

    Trainable parameters are redrawn from N(0, scale^2) so the probe point is
    generic (at the 0.02-std initialisation the fusion features are nearly
    constant and the correlation term is too curved for differencing), then
    checked against central differences of the total loss. Frozen parameters
    must receive no gradient at all and report 0.
    """
    cfg = (cfg or tiny_config()).canonical()
    if max(cfg.d_v, cfg.d_b, cfg.d_f, cfg.brain_d_model) > 8 or batch > 2:
        raise BMFLError("gradcheck_all needs tiny dimensions (d <= 8, batch <= 2)")
    model = BMFLModel(cfg)
    rng = make_rng(cfg.seed + 17)
    for _, p in model.trainable_parameters():
        p.data = rng.normal(0.0, scale, p.shape).astype(np.float32)
    images = rng.uniform(0, 1, (batch, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
    labels = rng.integers(0, cfg.num_classes, batch)
    loss_cfg = cfg.loss_config()

    def objective():
        out = model(images)
        return total_loss(out.logits, labels, out.x_vb, out.x_bv, loss_cfg)[0]

    named = list(model.named_parameters())
    objective().backward()
    frozen_grads = {name: p.grad for name, p in named if not p.requires_grad}
    model.zero_grad()
    trainable = [(n, p) for n, p in named if p.requires_grad]
    errors = dict(zip((n for n, _ in trainable), grad_check_report(objective, [p for _, p in trainable], eps)))
    rows = []
    for name, p in named:
        if name in errors:
            rows.append(GradRow(name, parameter_group(name), True, p.data.size, errors[name]))
        else:
            g = frozen_grads[name]
            err = 0.0 if g is None else float(np.abs(g).max())
            rows.append(GradRow(name, parameter_group(name), False, p.data.size, err))
    return rows


def format_gradcheck(rows: list[GradRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'parameter':<{width}}  {'group':<18}{'size':>6}  max_rel_error"]
    for r in rows:
        tag = "" if r.trainable else "  (frozen)"
        lines.append(f"{r.name:<{width}}  {r.group:<18}{r.size:>6}  {r.max_rel_error:.3e}{tag}")
    return "\n".join(lines)


def write_gradcheck_csv(path, rows: list[GradRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in dataclasses.fields(GradRow)])
        for r in rows:
            writer.writerow([r.name, r.group, r.trainable, r.size, repr(r.max_rel_error)])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


__all__ = [
    "ABLATIONS", "AblationRow", "EVAL_SPLITS", "Encoders", "GradRow", "ablation_configs", "ensure_dir",
    "format_ablation", "format_gradcheck", "gradcheck_all", "make_splits", "masked_gap", "pretrain_brain", "pretrain_encoders", "pretrain_image", "brain_targets",
    "run_ablation_matrix", "run_variant", "write_ablation_csv", "write_gradcheck_csv",
]
