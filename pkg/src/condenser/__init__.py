"""Dataset condensation toolkit.

Squeeze a labeled dataset into a trained model, recover a small
synthetic image set from that model's batch statistics, relabel it with
crop-level soft labels, and evaluate students trained on the result.
"""

from .analysis import (
    extract_embeddings,
    emit_report,
    generalization_bound_icb,
    mutual_info_upper_bound,
    read_embeddings,
    write_embeddings,
)
from .config import ExperimentConfig, from_ini, recipe_defaults, to_ini
from .continual import class_incremental_run
from .crops import CropParams
from .data import (
    CondensedDataset,
    LabeledDataset,
    Normalization,
    load_condensed,
    load_dataset,
    make_toy_dataset,
    save_condensed,
)
from .errors import (
    CheckpointLoadError,
    CondenserError,
    ConfigurationError,
    DataError,
    DivergenceError,
    IntegrityError,
    StructureError,
)
from .evaluate import EvalConfig, kd_loss, top1, train_student
from .models import (
    BackboneSpec,
    BNLayerStats,
    Checkpoint,
    build_backbone,
    convert_ln_to_bn,
    extract_bn_stats,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import inspect_experiment, resume, run_pipeline
from .recover import (
    RecoverConfig,
    RecoveryLossBreakdown,
    SyntheticBatch,
    bn_matching_loss,
    composite_loss,
    init_synthetic,
    l2_regularizer,
    recover,
    recover_step,
    tv_regularizer,
)
from .relabel import (
    CropLabelArchive,
    CropRecord,
    generate_crop_plan,
    load_archive,
    relabel,
    save_archive,
)
from .squeeze import SqueezeConfig, evaluate_checkpoint, squeeze_train
from .vit import TransformerDescription, tiny_description

__version__ = "0.1.0"
