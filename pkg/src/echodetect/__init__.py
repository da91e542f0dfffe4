"""echodetect: volumetric lesion detection on B-mode-like ultrasound.

Multi-task 3D segmentation with deep supervision, a patch-classification
head, and entropy minimization for false-positive reduction, plus a
synthetic phantom generator and a lesion/patient-level evaluation
harness for desk-scale verification.
"""

__version__ = "0.1.0"

from .cases import CaseRecord, load_case, load_manifest, save_manifest
from .errors import ConfigError, DegenerateInputError, DivergenceError, GridMismatchError
from .evaluation import (
    ConfusionCounts,
    MatchResult,
    MetricPanel,
    aggregate_cases,
    evaluate_case,
    match_lesions,
    metric_panel,
    region_negatives,
    roc_auc,
    sextant_masks,
)
from .inference import (
    LesionCandidate,
    PredictionResult,
    extract_lesions,
    patient_score,
    predict_case,
    predict_volume,
    select_decision_threshold,
)
from .losses import (
    ABLATION_PRESETS,
    LossWeights,
    classification_loss,
    dice_loss,
    entropy_loss,
    focal_loss,
    seg_loss,
    total_loss,
)
from .model import (
    Checkpoint,
    LesionDetectionNet,
    ModelConfig,
    PredictionPyramid,
    build_model,
    load_checkpoint,
    predict_pyramid,
    rescale_to_full,
    save_checkpoint,
)
from .patches import Patch, PatchSpec, sample_training_patch, stitch_predictions, tile_volume
from .phantom import PhantomSpec, generate_dataset, generate_phantom, generate_weak_label
from .training import (
    ExperimentConfig,
    ExperimentResult,
    TrainConfig,
    derive_patch_label,
    lesion_level_auc,
    run_ablation,
    run_preset_experiment,
    train_stage,
)
from .volumes import (
    BinaryMask,
    ConnectedComponent,
    LabelVolume,
    Volume3D,
    connected_components,
    crop_to_bbox,
    normalize_intensity,
)
