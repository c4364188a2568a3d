"""Configuration, persistence, training, evaluation and the command line."""
from bmfl.harness.config import RunConfig, load_config, parse_key_values, tiny_config
from bmfl.harness.experiment import (
    ABLATIONS,
    EVAL_SPLITS,
    AblationRow,
    Encoders,
    GradRow,
    ablation_configs,
    format_ablation,
    format_gradcheck,
    gradcheck_all,
    make_splits,
    masked_gap,
    pretrain_encoders,
    run_ablation_matrix,
    run_variant,
)
from bmfl.harness.model import BMFLModel
from bmfl.harness.serialization import (
    Checkpoint,
    TensorArchive,
    archive_bytes,
    archive_from_bytes,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    read_archive,
    save_checkpoint,
    write_archive,
)
from bmfl.harness.training import EvalReport, SplitResult, TrainResult, evaluate, read_log, save_run, train, write_log
