"""Command line entry point: ``bmfl <subcommand> [--config FILE] [--key value ...]``.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from bmfl.brain_encoder import RoiMap
from bmfl.data import Split, corrupt_split, generate_dataset, write_manifest
from bmfl.errors import BMFLError, InputError, NumericalError
from bmfl.harness.config import RunConfig, load_config, tiny_config
from bmfl.harness.experiment import (
    EVAL_SPLITS,
    Encoders,
    ensure_dir,
    format_ablation,
    format_gradcheck,
    gradcheck_all,
    pretrain_brain,
    pretrain_image,
    run_ablation_matrix,
    write_ablation_csv,
    write_gradcheck_csv,
)
from bmfl.harness.model import BMFLModel
from bmfl.harness.serialization import load_checkpoint, read_archive, save_checkpoint, write_archive
from bmfl.harness.training import encoder_checkpoint, evaluate, load_encoder, save_run, train

log = logging.getLogger("bmfl")

GRAD_TOLERANCE = 1e-3


def _archive_path(cfg: RunConfig, split: str) -> Path:
    return Path(cfg.data_dir) / f"{split}.bmta"


def load_split(cfg: RunConfig, name: str) -> Split:
    path = _archive_path(cfg, name)
    if not path.exists():
        raise InputError(f"missing data file {path}; run gen-data/corrupt first")
    archive = read_archive(path)
    return Split(archive.stacked(), archive.labels, name)


def save_split(cfg: RunConfig, split: Split, name: str) -> Path:
    path = _archive_path(cfg, name)
    write_archive(path, list(split.images), split.labels)
    return path


def _encoders(cfg: RunConfig, need_brain: bool = True) -> Encoders:
    out = Path(cfg.out_dir)
    image = load_encoder(out / "image_encoder.ckpt", "image_encoder")
    brain = load_encoder(out / "brain_encoder.ckpt", "brain_encoder") if need_brain else None
    return Encoders(image, brain, float("nan"), float("nan"))


# subcommands ------------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, args) -> int:
    ensure_dir(cfg.data_dir)
    train_split, val = generate_dataset(cfg.dataset_spec())
    for split, name in ((train_split, "train"), (val, "clean_val")):
        print(f"wrote {save_split(cfg, split, name)} ({len(split)} images)")
    return 0


def cmd_corrupt(cfg: RunConfig, args) -> int:
    val = load_split(cfg, "clean_val")
    kinds = ("low_light", "masked") if args.kind == "both" else (args.kind,)
    for kind in kinds:
        spec = cfg.corruption_specs()[kind]
        split, rows = corrupt_split(val, spec, kind)
        path = save_split(cfg, split, kind)
        write_manifest(Path(cfg.data_dir) / f"{kind}_manifest.csv", rows)
        print(f"wrote {path} ({len(split)} images, {kind})")
    return 0


def cmd_pretrain_image(cfg: RunConfig, args) -> int:
    result = pretrain_image(cfg, load_split(cfg, "train"))
    path = ensure_dir(cfg.out_dir) / "image_encoder.ckpt"
    save_checkpoint(path, encoder_checkpoint(result.encoder, "image_encoder", train_accuracy=result.train_accuracy))
    print(f"image encoder train accuracy {result.train_accuracy:.4f}; wrote {path}")
    return 0


def cmd_pretrain_brain(cfg: RunConfig, args) -> int:
    image = load_encoder(Path(cfg.out_dir) / "image_encoder.ckpt", "image_encoder")
    train_split = load_split(cfg, "train")
    val = load_split(cfg, "clean_val") if _archive_path(cfg, "clean_val").exists() else None
    result, val_r, record = pretrain_brain(cfg, image, train_split, val)
    path = Path(cfg.out_dir) / "brain_encoder.ckpt"
    save_checkpoint(path, encoder_checkpoint(result.encoder, "brain_encoder", final_mse=result.final_mse,
                                             val_mean_r=val_r))
    roi_map: RoiMap = record.roi_map
    write_archive(_archive_path(cfg, "fmri_targets"), list(record.voxels), train_split.labels, roi_map)
    print(f"brain encoder train MSE {result.final_mse:.4f}, held-out mean voxel R {val_r:.4f}; wrote {path}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    enc = _encoders(cfg, need_brain=not cfg.canonical().no_fmri)
    result = train(cfg, load_split(cfg, "train"), enc.image, enc.brain)
    paths = save_run(result, ensure_dir(cfg.out_dir), args.name)
    print(f"{result.summary['variant']}: final loss {result.summary['final_loss']:.4f}; wrote {paths['checkpoint']}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt_path = Path(args.checkpoint or Path(cfg.out_dir) / "model.ckpt")
    if not ckpt_path.exists():
        raise InputError(f"missing checkpoint {ckpt_path}")
    model = BMFLModel.from_checkpoint(load_checkpoint(ckpt_path))
    names = [s for s in EVAL_SPLITS if _archive_path(cfg, s).exists()]
    if not names:
        raise InputError(f"no evaluation splits found in {cfg.data_dir}")
    report = evaluate(model, {n: load_split(cfg, n) for n in names})
    print(report.format())
    out = ensure_dir(cfg.out_dir) / f"{ckpt_path.stem}_eval.json"
    out.write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    splits = {"train": load_split(cfg, "train")}
    splits.update({n: load_split(cfg, n) for n in EVAL_SPLITS})
    rows = run_ablation_matrix(cfg, splits, _encoders(cfg), workers=args.workers)
    out = ensure_dir(cfg.out_dir)
    write_ablation_csv(out / "ablation.csv", rows)
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    rows = gradcheck_all(tiny_config(seed=cfg.seed, alpha=cfg.alpha))
    print(format_gradcheck(rows))
    write_gradcheck_csv(ensure_dir(cfg.out_dir) / "gradcheck.csv", rows)
    worst = max(r.max_rel_error for r in rows if r.trainable)
    leaked = [r.name for r in rows if not r.trainable and r.max_rel_error != 0.0]
    if worst > GRAD_TOLERANCE or leaked:
        raise NumericalError(f"gradient check failed: worst relative error {worst:.3e}, frozen with gradient {leaked}")
    print(f"all trainable parameters within {GRAD_TOLERANCE:g} (worst {worst:.3e})")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic train / clean validation splits"),
    "corrupt": (cmd_corrupt, "write low-light and masked copies of the validation split"),
    "pretrain-image": (cmd_pretrain_image, "warm up and freeze the image encoder"),
    "pretrain-brain": (cmd_pretrain_brain, "fit the brain encoder to synthetic voxel targets"),
    "train": (cmd_train, "train the brain transformer and fusion head"),
    "eval": (cmd_eval, "evaluate a checkpoint on the clean and corrupted splits"),
    "ablate": (cmd_ablate, "run the ablation matrix and write a comparison table"),
    "gradcheck": (cmd_gradcheck, "finite-difference audit of every parameter at tiny width"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value file; command-line flags override it")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="VALUE")
        if name == "corrupt":
            p.add_argument("--kind", choices=("both", "low_light", "masked"), default="both")
        if name == "train":
            p.add_argument("--name", default="model", help="stem of the written checkpoint and logs")
        if name == "eval":
            p.add_argument("--checkpoint", help="model checkpoint (default OUT_DIR/model.ckpt)")
        if name == "ablate":
            p.add_argument("--workers", type=int, default=1, help="run variants in this many processes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command][0](cfg, args)
    except BMFLError as exc:
        print(f"bmfl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
