"""Debiased feature augmentation for compositional zero-shot recognition.

Trains projector/text/fusion parameters on precomputed image embeddings,
synthesizes pseudo composition features through a residual fusion network,
reweights the augmentation loss by inverse label frequency, and evaluates
with the calibration-sweep protocol in closed- and open-world settings.
"""

from .augment import (
    DebiasConfig,
    FusionNet,
    cartesian_aug_loss,
    cartesian_labels,
    cartesian_pseudo,
    debias_weight_table,
    disentangle_loss,
    factor_weights,
    pairwise_aug,
    reconstruction_loss,
)
from .autodiff import DegenerateVectorError, ParamStore, Tensor
from .config import ABLATIONS, PRESETS, RunConfig, apply_ablation, preset_config
from .dataio import (
    Dataset,
    FormatError,
    SyntheticSpec,
    build_spaces,
    generate_synthetic,
    load_dataset,
    parse_manifest,
    read_embeddings,
    read_feasibility,
    save_synthetic,
    write_embeddings,
)
from .encoders import TokenTable, VisualProjectors
from .evaluation import (
    EvalError,
    EvalReport,
    FeasibilityMask,
    calibration_sweep,
    closed_world_eval,
    open_world_eval,
    select_threshold,
    subset_accuracy,
)
from .model import (
    DefaModel,
    LossWeights,
    ModelConfig,
    ScoreBundle,
    classification_scores,
    inference_score,
    total_loss,
)
from .nn import Adam, MLPSpec, cosine, grad_check, make_rng, mlp_forward, softmax_ce
from .space import (
    CompositionSpace,
    FrequencyTable,
    Sample,
    SpaceError,
    build_space,
    count_frequencies,
)
from .training import TrainingError, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
