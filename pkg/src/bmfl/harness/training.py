"""Training loop, evaluation and encoder checkpoint helpers."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bmfl.brain_encoder import BrainEncoder, BrainEncoderConfig
from bmfl.data import Split
from bmfl.errors import ConfigError, InputError, NumericalError
from bmfl.harness.config import RunConfig
from bmfl.harness.model import BMFLModel
from bmfl.harness.serialization import Checkpoint, load_checkpoint, save_checkpoint
from bmfl.image_encoder import ImageEncoder, ImageEncoderConfig
from bmfl.numerics import AdamW, LrSchedule, OptimizerState, lr_at, make_rng, no_grad, split_rng
from bmfl.objective import cross_entropy, fusion_loss, total_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "l_cls", "l_fusion", "l_total")


# encoder checkpoints --------------------------------------------------------------
def encoder_checkpoint(encoder, kind: str, **info) -> Checkpoint:
    return Checkpoint(encoder.state_dict(), {"kind": kind, "config": dataclasses.asdict(encoder.cfg), **info})


def load_encoder(path, kind: str):
    """Rebuild a frozen image or brain encoder from its checkpoint file."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"missing {kind} checkpoint: {p}")
    ckpt = load_checkpoint(p)
    if ckpt.kind != kind:
        raise ConfigError(f"{p} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
    if kind == "image_encoder":
        encoder = ImageEncoder(ImageEncoderConfig(**ckpt.header["config"]), make_rng(0))
    else:
        encoder = BrainEncoder(BrainEncoderConfig(**ckpt.header["config"]), make_rng(0))
    encoder.load_state_dict(ckpt.params)
    encoder.freeze()
    return encoder


# training ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: BMFLModel
    log_rows: list[dict]
    optimizer: OptimizerState
    summary: dict = field(default_factory=dict)

    def checkpoint(self) -> Checkpoint:
        return self.model.to_checkpoint(full_optimizer_state(self.model, self.optimizer))


def full_optimizer_state(model: BMFLModel, state: OptimizerState) -> OptimizerState:
    """Optimizer moments aligned with every stored parameter (zeros for frozen ones)."""
    by_id = {id(p): i for i, p in enumerate(p for _, p in model.trainable_parameters())}
    m, v = [], []
    for _, p in model.named_parameters():
        i = by_id.get(id(p))
        m.append(state.m[i] if i is not None else np.zeros_like(p.data))
        v.append(state.v[i] if i is not None else np.zeros_like(p.data))
    return dataclasses.replace(state, m=m, v=v)


def train(cfg: RunConfig, train_split: Split, image_encoder: ImageEncoder | None = None,
          brain_encoder: BrainEncoder | None = None, features: dict | None = None) -> TrainResult:
    """Train the brain transformer and fusion head with both encoders frozen.

    Frozen-stage outputs are computed once up front (``features`` may pass them
    in to share work between runs). Deterministic given ``cfg.seed``.
    """
    cfg = cfg.canonical()
    if len(train_split) == 0:
        raise InputError("training split is empty")
    if int(train_split.labels.max()) >= cfg.num_classes:
        raise ConfigError(f"labels reach {int(train_split.labels.max())} but num_classes={cfg.num_classes}")
    model = BMFLModel(cfg, image_encoder, brain_encoder)
    feats = features if features is not None else model.cached_features(train_split.images)
    i_c, i_p, voxels = feats["i_c"], feats["i_p"], feats["voxels"]
    labels = train_split.labels

    params = model.trainable_parameters()
    if any(name.startswith(("image_encoder.", "brain_encoder.")) for name, _ in params):
        raise ConfigError("frozen encoder weights leaked into the optimizer")
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n = len(labels)
    steps_per_epoch = -(-n // cfg.batch_size)
    sched = LrSchedule.from_epochs(steps_per_epoch, max(cfg.epochs, 1), cfg.warmup_epochs, cfg.peak_lr, cfg.floor_lr)
    loss_cfg = cfg.loss_config()
    r_shuffle = split_rng(make_rng(cfg.seed), 5)[4]

    rows, epoch_losses, step = [], [], 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = r_shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out = model.head(i_c[idx], i_p[idx], None if voxels is None else voxels[idx])
            loss, report = total_loss(out.logits, labels[idx], out.x_vb, out.x_bv, loss_cfg)
            if not math.isfinite(report.l_total):
                raise NumericalError(f"non-finite loss at step {step} (epoch {epoch}): {report}")
            lr = lr_at(step, sched)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            rows.append({"step": step, "lr": lr, "l_cls": report.l_cls, "l_fusion": report.l_fusion,
                         "l_total": report.l_total})
            total += report.l_total * len(idx)
            step += 1
        epoch_losses.append(total / n)
        log.info("%s epoch %d loss %.4f", cfg.variant, epoch, epoch_losses[-1])
    summary = {
        "variant": cfg.variant,
        "steps": step,
        "epoch_losses": epoch_losses,
        "final_loss": epoch_losses[-1] if epoch_losses else None,
        "seconds": round(time.perf_counter() - started, 3),
    }
    return TrainResult(model, rows, opt.state, summary)


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in LOG_FIELDS[1:]}} for r in csv.DictReader(fh)]


def save_run(result: TrainResult, out_dir, name: str = "model") -> dict:
    """Write checkpoint, step log and summary JSON; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / f"{name}.ckpt", "log": out / f"{name}_log.csv", "summary": out / f"{name}_summary.json"}
    save_checkpoint(paths["checkpoint"], result.checkpoint())
    write_log(paths["log"], result.log_rows)
    summary = {**result.summary, "config": result.model.cfg.to_dict()}
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True))
    return paths


# evaluation -------------------------------------------------------------------------
@dataclass(frozen=True)
class SplitResult:
    split: str
    n: int
    accuracy: float
    loss: float
    pcc_mean: float
    pcc_std: float


@dataclass
class EvalReport:
    rows: list[SplitResult]

    def __getitem__(self, split: str) -> SplitResult:
        for row in self.rows:
            if row.split == split:
                return row
        raise KeyError(split)

    def accuracy(self, split: str) -> float:
        return self[split].accuracy

    def to_dict(self) -> dict:
        return {"rows": [dataclasses.asdict(r) for r in self.rows]}

    def format(self) -> str:
        lines = [f"{'split':<12}{'n':>6}{'top1':>9}{'loss':>9}{'pcc':>9}"]
        for r in self.rows:
            lines.append(f"{r.split:<12}{r.n:>6}{r.accuracy:>9.4f}{r.loss:>9.4f}{r.pcc_mean:>9.4f}")
        return "\n".join(lines)


def _content_order(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    keys = [hashlib.sha1(np.ascontiguousarray(img).tobytes() + int(lab).to_bytes(4, "little")).digest()
            for img, lab in zip(images, labels)]
    return np.array(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def evaluate(model: BMFLModel, splits: dict, batch_size: int = 256) -> EvalReport:
    """Top-1 accuracy, mean loss and fusion correlation per split, without gradients.

    Samples are processed in an order fixed by their content, so the report
    does not depend on how a split is shuffled.
    """
    if not splits:
        raise InputError("no splits to evaluate")
    rows = []
    for name, split in splits.items():
        if len(split) == 0:
            raise InputError(f"split {name!r} is empty")
        if int(split.labels.max()) >= model.cfg.num_classes:
            raise ConfigError(f"split {name!r} has labels up to {int(split.labels.max())}, "
                              f"model has {model.cfg.num_classes} classes")
        order = _content_order(split.images, split.labels)
        images, labels = split.images[order], split.labels[order]
        feats = model.cached_features(images, batch_size)
        correct, loss_sum, pccs = 0, 0.0, []
        with no_grad():
            for start in range(0, len(labels), batch_size):
                sl = slice(start, start + batch_size)
                vox = None if feats["voxels"] is None else feats["voxels"][sl]
                out = model.head(feats["i_c"][sl], feats["i_p"][sl], vox)
                correct += int((out.logits.data.argmax(-1) == labels[sl]).sum())
                loss_sum += float(cross_entropy(out.logits, labels[sl]).data) * len(labels[sl])
                if out.x_vb.shape[-1] >= 2:
                    for a, b in zip(out.x_vb.data, out.x_bv.data):
                        pccs.append(float(fusion_loss(a, b).data))
        pcc = np.asarray(pccs, np.float64)
        rows.append(SplitResult(name, len(labels), correct / len(labels), loss_sum / len(labels),
                                float(pcc.mean()) if pcc.size else 0.0, float(pcc.std()) if pcc.size else 0.0))
    return EvalReport(rows)
