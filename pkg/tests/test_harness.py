import json
import math
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest

from bmfl.brain_encoder import RoiMap
from bmfl.data import generate_dataset
from bmfl.errors import BMFLError, ConfigError, FormatError, InputError
from bmfl.harness import (
    ABLATIONS,
    BMFLModel,
    Checkpoint,
    Encoders,
    RunConfig,
    ablation_configs,
    archive_bytes,
    archive_from_bytes,
    checkpoint_bytes,
    checkpoint_from_bytes,
    evaluate,
    format_ablation,
    gradcheck_all,
    load_checkpoint,
    load_config,
    parse_key_values,
    read_log,
    run_ablation_matrix,
    save_run,
    tiny_config,
    train,
)
from bmfl.harness.cli import main
from bmfl.numerics import OptimizerState

TINY = tiny_config(samples_per_class=6, val_samples_per_class=3, epochs=2, peak_lr=1e-2, warmup_epochs=0.5)


@pytest.fixture(scope="module")
def tiny_splits():
    train_split, val = generate_dataset(TINY.dataset_spec())
    return {"train": train_split, "clean_val": val}


# configuration -------------------------------------------------------------------------------
def test_parse_key_values_with_comments():
    text = "# a run\nalpha = -0.2  # weaker\n\nepochs=3\nno-fmri = yes\n"
    assert parse_key_values(text) == {"alpha": "-0.2", "epochs": "3", "no_fmri": "yes"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_key_values("epochs=1\njust words")


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 3\nalpha = -0.1\nroi = lvc\n")
    cfg = load_config(path, {"alpha": "-0.3", "no_fusion_loss": "true"})
    assert cfg.epochs == 3 and cfg.alpha == -0.3 and cfg.no_fusion_loss is True and cfg.roi == "lvc"
    assert load_config().to_dict() == RunConfig().to_dict()


@pytest.mark.parametrize("values", [{"epochs": "many"}, {"colour": "red"}, {"alpha": "0.5"},
                                    {"roi": "v4"}, {"no_fmri": "perhaps"}, {"d_v": "10"}])
def test_bad_values_are_config_errors(values):
    with pytest.raises(ConfigError):
        load_config(None, values)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


@pytest.mark.parametrize("flags,variant,alpha", [
    ({}, "full", -0.4),
    ({"no_fmri": True, "roi": "lvc"}, "no_fmri", 0.0),
    ({"no_cross_attention": True}, "no_cross_attention", 0.0),
    ({"alpha": 0.0}, "no_fusion_loss", 0.0),
    ({"no_fusion_loss": True}, "no_fusion_loss", 0.0),
    ({"roi": "hvc"}, "full_hvc", -0.4),
])
def test_canonical_variants(flags, variant, alpha):
    cfg = replace(RunConfig(), **flags).canonical()
    assert cfg.variant == variant and cfg.alpha == alpha
    assert cfg.canonical() == cfg


def test_selected_voxels_follow_roi():
    assert RunConfig().selected_voxels() == 3072
    assert RunConfig(roi="lvc").selected_voxels() == 384
    assert RunConfig(roi="hvc").brain_transformer_config().num_tokens == 6


# serialization ------------------------------------------------------------------------------------
def _checkpoint(rng, with_opt=True):
    params = {"a.weight": rng.normal(size=(3, 2)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    opt = OptimizerState(m=[np.ones((3, 2), np.float32), np.zeros(4, np.float32)],
                         v=[np.full((3, 2), 2, np.float32), np.ones(4, np.float32)], step=7,
                         beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.02) if with_opt else None
    return Checkpoint(params, {"kind": "demo", "note": "x"}, opt)


def test_checkpoint_round_trip(rng):
    ck = _checkpoint(rng)
    blob = checkpoint_bytes(ck)
    back = checkpoint_from_bytes(blob)
    assert back.header == ck.header and back.kind == "demo" and list(back.params) == ["a.weight", "b"]
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    assert back.optimizer.step == 7 and np.array_equal(back.optimizer.v[0], ck.optimizer.v[0])
    assert checkpoint_bytes(back) == blob
    assert checkpoint_from_bytes(checkpoint_bytes(_checkpoint(rng, False))).optimizer is None


def test_checkpoint_corruption_is_detected(rng):
    blob = bytearray(checkpoint_bytes(_checkpoint(rng)))
    for pos in (2, 20, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0xFF
        with pytest.raises(FormatError):
            checkpoint_from_bytes(bytes(bad))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(bytes(blob[:-9]))


def test_future_version_rejected(rng):
    body = bytearray(checkpoint_bytes(_checkpoint(rng))[:-4])
    body[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version 2"):
        checkpoint_from_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def test_missing_checkpoint_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_archive_round_trip_with_roi_table(rng):
    arrays = [rng.normal(size=12).astype(np.float32) for _ in range(3)]
    roi = RoiMap.from_table([("left:early", 0, 6), ("right:early", 6, 12)])
    back = archive_from_bytes(archive_bytes(arrays, [0, 2, 1], roi))
    assert back.roi_map == roi and back.labels.tolist() == [0, 2, 1]
    assert np.array_equal(back.stacked(), np.stack(arrays))
    assert archive_from_bytes(archive_bytes(arrays, [0, 2, 1])).roi_map is None
    with pytest.raises(InputError):
        archive_bytes(arrays, [0, 1])


# training and evaluation -------------------------------------------------------------------------------
def test_same_seed_same_checkpoint_bytes(tiny_splits):
    a = train(TINY, tiny_splits["train"])
    b = train(TINY, tiny_splits["train"])
    assert checkpoint_bytes(a.checkpoint()) == checkpoint_bytes(b.checkpoint())
    assert len(a.log_rows) == 2 * math.ceil(18 / 2)


def test_zero_alpha_equals_disabled_fusion_loss(tiny_splits):
    a = train(replace(TINY, alpha=0.0), tiny_splits["train"])
    b = train(replace(TINY, no_fusion_loss=True), tiny_splits["train"])
    assert checkpoint_bytes(a.checkpoint()) == checkpoint_bytes(b.checkpoint())


def test_first_step_loss_near_log_classes(tiny_splits):
    rows = train(replace(TINY, epochs=1), tiny_splits["train"]).log_rows
    assert rows[0]["l_cls"] == pytest.approx(math.log(3), abs=0.05)


def test_log_rows_satisfy_total_identity(tiny_splits, tmp_path):
    result = train(TINY, tiny_splits["train"])
    for row in result.log_rows:
        assert row["l_total"] == pytest.approx(row["l_cls"] - 0.4 * row["l_fusion"], abs=1e-12)
    paths = save_run(result, tmp_path, "tiny")
    assert read_log(paths["log"]) == result.log_rows
    summary = json.loads(paths["summary"].read_text())
    assert summary["variant"] == "full" and summary["steps"] == len(result.log_rows)
    reloaded = BMFLModel.from_checkpoint(load_checkpoint(paths["checkpoint"]))
    x = tiny_splits["clean_val"].images[:2]
    np.testing.assert_array_equal(reloaded(x).logits.data, result.model(x).logits.data)


def test_encoder_weights_never_change(tiny_splits):
    model = BMFLModel(TINY)
    before = {n: p.data.copy() for n, p in model.named_parameters() if n.startswith(("image_", "brain_encoder"))}
    result = train(TINY, tiny_splits["train"], model.image_encoder, model.brain_encoder)
    after = dict(result.model.named_parameters())
    assert all(np.array_equal(v, after[n].data) for n, v in before.items())


def test_evaluation_ignores_sample_order(tiny_splits):
    model = train(TINY, tiny_splits["train"]).model
    val = tiny_splits["clean_val"]
    perm = np.random.default_rng(3).permutation(len(val))
    a = evaluate(model, {"v": val})
    b = evaluate(model, {"v": val.subset(perm)})
    assert a.to_dict() == b.to_dict()


def test_label_beyond_class_count(tiny_splits):
    split = tiny_splits["train"]
    bad = replace(split, labels=split.labels + 5)
    with pytest.raises(ConfigError):
        train(TINY, bad)
    with pytest.raises(ConfigError):
        evaluate(BMFLModel(TINY), {"x": bad})


def test_no_fmri_model_has_no_brain_parameters():
    model = BMFLModel(replace(TINY, no_fmri=True))
    groups = {n.split(".")[0] for n, _ in model.named_parameters()}
    assert groups == {"image_encoder", "fusion"}


# ablation and gradient audit --------------------------------------------------------------------------------
def test_ablation_configs_cover_six_variants():
    names = [n for n, _ in ablation_configs(TINY)]
    assert names == [n for n, _ in ABLATIONS] and len(names) == 6
    assert [c.variant for _, c in ablation_configs(TINY)] == names


def test_failed_variant_is_marked_and_others_run(tiny_splits, monkeypatch):
    import bmfl.harness.experiment as experiment

    real = experiment.run_variant

    def flaky(cfg, splits, encoders):
        if cfg.roi == "hvc":
            raise BMFLError("boom")
        return real(cfg, splits, encoders)

    monkeypatch.setattr(experiment, "run_variant", flaky)
    model = BMFLModel(TINY)
    splits = {**tiny_splits, "low_light": tiny_splits["clean_val"], "masked": tiny_splits["clean_val"]}
    rows = run_ablation_matrix(replace(TINY, epochs=1), splits,
                               Encoders(model.image_encoder, model.brain_encoder, 0.0, 0.0))
    status = {r.variant: r.status for r in rows}
    assert status.pop("full_hvc") == "failed" and set(status.values()) == {"ok"}
    assert "failed: boom" in format_ablation(rows)


def test_gradcheck_covers_every_parameter():
    rows = gradcheck_all()
    model = BMFLModel(tiny_config())
    assert [r.name for r in rows] == [n for n, _ in model.named_parameters()]
    assert max(r.max_rel_error for r in rows if r.trainable) <= 1e-3
    assert all(r.max_rel_error == 0.0 for r in rows if not r.trainable)
    assert {r.group for r in rows if r.trainable} == {"brain_transformer", "fusion"}


def test_gradcheck_refuses_wide_models():
    with pytest.raises(BMFLError):
        gradcheck_all(tiny_config(d_f=16))


# command line -------------------------------------------------------------------------------------------------
@pytest.fixture
def cli_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    values = {**{k: v for k, v in TINY.to_dict().items()}, "image_pretrain_epochs": 1, "brain_pretrain_epochs": 1,
              "data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "runs"), "epochs": 1}
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def test_cli_end_to_end(cli_config, tmp_path, capsys):
    steps = ["gen-data", "corrupt", "pretrain-image", "pretrain-brain", "train", "eval", "ablate", "gradcheck"]
    for step in steps:
        assert main([step, "--config", str(cli_config)]) == 0, step
    runs = tmp_path / "runs"
    for name in ("model.ckpt", "model_log.csv", "model_eval.json", "ablation.csv", "gradcheck.csv"):
        assert (runs / name).exists(), name
    assert (tmp_path / "data" / "masked_manifest.csv").exists()
    assert len((runs / "ablation.csv").read_text().splitlines()) == 7
    assert "masked gap" in capsys.readouterr().out


def test_cli_flag_overrides_file(cli_config, tmp_path):
    assert main(["gen-data", "--config", str(cli_config), "--data-dir", str(tmp_path / "other")]) == 0
    assert (tmp_path / "other" / "train.bmta").exists()


def test_cli_exit_codes(cli_config, tmp_path, capsys):
    assert main(["train", "--config", str(cli_config), "--alpha", "0.3"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["train", "--config", str(cli_config)]) == 3
    assert main(["eval", "--config", str(cli_config), "--checkpoint", str(tmp_path / "x.ckpt")]) == 3
    assert "InputError" in capsys.readouterr().err


def test_cli_numerical_failure_exit_code(cli_config):
    for step in ("gen-data", "pretrain-image", "pretrain-brain"):
        assert main([step, "--config", str(cli_config)]) == 0
    assert main(["train", "--config", str(cli_config), "--peak-lr", "1e38", "--epochs", "3"]) == 4
