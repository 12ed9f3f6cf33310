"""Multi-defense adversarial tuning of a small vision transformer via
hypernetwork-generated low-rank adapters, with adapter merging and a
robustness evaluation bench."""

from .attacks import AdvBatch, AttackBudget, cw_margin_loss, fgsm_attack, pgd_attack
from .backbone import (
    POSITIONS,
    BackboneSpec,
    InjectionSite,
    VisionBackbone,
    forward_logits,
    init_backbone,
    sites_for_spec,
)
from .config import ExperimentConfig, config_hash, desk_config
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import LabeledImages, iter_batches, load_dataset, make_synthetic_splits
from .defenses import (
    DefenseBank,
    DefenseSpec,
    decoupled_divergence,
    default_defenses,
    kl_divergence,
    loss_dkl,
    loss_mart,
    loss_score,
    loss_trades,
    loss_vanilla_at,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    HyperLoraError,
    IngestionError,
    IntegrityError,
    NumericalError,
    StageError,
)
from .evalbench import (
    EvalReport,
    average_accuracy,
    evaluate_clean,
    evaluate_model,
    evaluate_robust,
    summarize,
)
from .hypernet import (
    AdapterContext,
    EmbeddingBank,
    LoraFactors,
    LoraHypernetwork,
    MethodRegistry,
    build_hypernetwork,
    embed_context,
    generate_all,
    generate_lora,
)
from .merging import (
    MergeCoefficients,
    MergedAdapter,
    combine_deltas,
    even_coefficients,
    load_coefficients,
    merge_equal,
    merged_forward,
    optimize_coefficients,
    save_coefficients,
)
from .trainer import (
    HyperAtTrainer,
    TrainConfig,
    sample_method,
    train_clean,
    train_hyperat,
)

__version__ = "0.1.0"
