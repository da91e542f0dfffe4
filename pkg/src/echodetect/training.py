"""Two-stage training and the ablation harness.

Stage one pretrains on weak (reader-drawn) labels, stage two fine-tunes
on strong (pathology-confirmed) labels from a pretrained checkpoint.
Both stages share the same loop: sample lesion-biased patches, forward,
deep-supervised Dice+focal segmentation loss plus - when enabled - the
patch-classification and entropy terms, Adam with cosine decay, and a
lesion-level ROC-AUC validation score that selects the best epoch.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .cases import CaseRecord
from .errors import ConfigError
from .evaluation import aggregate_cases, roc_auc, sextant_masks
from .inference import (
    DEFAULT_MIN_LESION_VOXELS,
    evaluate_case,
    extract_lesions,
    patient_score,
    predict_case,
    predict_volume,
    select_decision_threshold,
)
from .losses import ABLATION_PRESETS, LossWeights, classification_loss, entropy_loss, seg_loss, total_loss
from .model import LesionDetectionNet, ModelConfig, build_model, rescale_to_full
from .patches import PatchSpec, sample_training_patch
from .volumes import BinaryMask, LabelVolume, Volume3D, connected_components, normalize_intensity

__all__ = [
    "TrainConfig",
    "ExperimentConfig",
    "TrainResult",
    "ExperimentResult",
    "derive_patch_label",
    "initialize_model",
    "train_stage",
    "run_preset_experiment",
    "run_ablation",
    "lesion_level_auc",
    "write_loss_log",
    "read_loss_log",
]

LOG_FIELDS = ("epoch", "l_seg", "l_cls", "l_ent", "l_total", "val_auc")


def derive_patch_label(label_patch: np.ndarray, min_lesion_voxels: int = 32) -> str:
    """'cancer' when the patch holds at least ``min_lesion_voxels`` lesion
    voxels, else 'normal'; a stray voxel or two should not flip a patch."""
    return "cancer" if int(np.count_nonzero(label_patch)) >= min_lesion_voxels else "normal"


@dataclass(frozen=True)
class TrainConfig:
    """One training stage."""

    stage: str  # pretrain | finetune
    model: ModelConfig
    epochs: int = 10
    patches_per_case: int = 8
    batch_size: int = 4
    learning_rate: float | None = None  # None -> 1e-4 pretrain, 1e-5 finetune
    seed: int = 0
    weights: LossWeights = LossWeights()
    use_cls: bool = True
    use_ent: bool = True
    use_pretrained: bool = True
    positive_bias: float = 0.5
    patch_class_min_voxels: int = 32
    val_every: int = 1
    allow_provenance_mismatch: bool = False

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patches_per_case < 1 or self.batch_size < 1:
            raise ConfigError("patches_per_case and batch_size must be >= 1")

    @property
    def effective_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-4 if self.stage == "pretrain" else 1e-5

    @property
    def stage_tag(self) -> str:
        return "pretrained" if self.stage == "pretrain" else "finetuned"


@dataclass
class TrainResult:
    model: LesionDetectionNet
    log: list[dict]
    best_val_auc: float
    stage_tag: str


def initialize_model(config: TrainConfig, initial_state: dict | None = None) -> LesionDetectionNet:
    """Fresh seeded model, or one restored bitwise from ``initial_state``."""
    if initial_state is not None:
        model = LesionDetectionNet(config.model)
        model.load_state_dict(initial_state)
        return model
    return build_model(config.model, seed=config.seed)


def _check_provenance(config: TrainConfig, cases: list[CaseRecord]) -> None:
    wanted = "weak" if config.stage == "pretrain" else "strong"
    bad = [c.case_id for c in cases if c.provenance != wanted]
    if bad and not config.allow_provenance_mismatch:
        raise ConfigError(
            f"{config.stage} expects {wanted}-label cases; got mismatched provenance for {bad[:5]}"
        )


def _normalized_cases(cases: list[CaseRecord]) -> list[CaseRecord]:
    out = []
    for c in cases:
        vol = normalize_intensity(c.volume, c.prostate)
        out.append(CaseRecord(c.case_id, vol, c.prostate, c.label, c.split))
    return out


def lesion_level_auc(case_probs: list[tuple[Volume3D, LabelVolume, BinaryMask]]) -> float:
    """Threshold-free lesion-level ROC-AUC: truth lesions (positives) vs
    truth-free sextants (negatives), each scored by peak probability.
    NaN when only one class is present."""
    scores, labels = [], []
    for prob, truth, prostate in case_probs:
        for comp in connected_components(truth.as_mask(), connectivity=26):
            scores.append(float(prob.data[comp.voxels[:, 0], comp.voxels[:, 1], comp.voxels[:, 2]].max()))
            labels.append(1)
        for zone in sextant_masks(prostate):
            if (zone & (truth.data != 0)).any():
                continue
            scores.append(float(prob.data[zone].max()))
            labels.append(0)
    arr = np.asarray(labels)
    if len(arr) == 0 or (arr == 1).all() or (arr == 0).all():
        return math.nan
    return roc_auc(scores, labels)


def _sample_batch(config: TrainConfig, cases, rng, patch_spec: PatchSpec):
    images, labels, valids, targets = [], [], [], []
    for _ in range(config.batch_size):
        case = cases[int(rng.integers(len(cases)))]
        patch = sample_training_patch(
            case.volume, case.prostate, case.label, patch_spec, rng, config.positive_bias
        )
        images.append(patch.image.astype(np.float32))
        labels.append(patch.label.astype(np.int64))
        valids.append(patch.valid)
        targets.append(1 if derive_patch_label(patch.label, config.patch_class_min_voxels) == "cancer" else 0)
    return (
        torch.from_numpy(np.stack(images)).unsqueeze(1),
        torch.from_numpy(np.stack(labels)),
        torch.from_numpy(np.stack(valids)),
        torch.tensor(targets, dtype=torch.long),
    )


def train_stage(
    config: TrainConfig,
    cases: list[CaseRecord],
    initial_state: dict | None = None,
) -> TrainResult:
    """Run one training stage and keep the best-validation parameters.

    ``cases`` supplies both the train and val splits; provenance must
    match the stage (weak for pretrain, strong for finetune) unless the
    config explicitly allows a mismatch.  The loss log holds one entry
    per epoch with finite components; validation is the lesion-level
    ROC-AUC.  Deterministic given (config, cases, initial_state).
    """
    if config.stage == "finetune" and config.use_pretrained and initial_state is None:
        raise ConfigError("finetune with use_pretrained requires an initial checkpoint state")
    train_cases = [c for c in cases if c.split == "train"]
    val_cases = [c for c in cases if c.split == "val"]
    if not train_cases:
        raise ConfigError("no cases in the train split")
    _check_provenance(config, train_cases + val_cases)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0 if config.stage == "pretrain" else 1]))

    train_cases = _normalized_cases(train_cases)
    val_cases = _normalized_cases(val_cases)

    model = initialize_model(config, initial_state)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.effective_lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    patch_spec = PatchSpec(size=config.model.patch_size, stride=config.model.patch_size)

    eff_weights = replace(
        config.weights,
        lambda_cls=config.weights.lambda_cls if config.use_cls else 0.0,
        lambda_ent=config.weights.lambda_ent if config.use_ent else 0.0,
    )
    steps = max(1, math.ceil(len(train_cases) * config.patches_per_case / config.batch_size))

    log: list[dict] = []
    best_auc = -math.inf
    best_state = None
    for epoch in range(1, config.epochs + 1):
        sums = {"l_seg": 0.0, "l_cls": 0.0, "l_ent": 0.0, "l_total": 0.0}
        for _ in range(steps):
            images, labels, valids, targets = _sample_batch(config, train_cases, rng, patch_spec)
            seg_logits, class_logits = model(images)
            probs = [F.softmax(l, dim=1) for l in seg_logits]
            rescaled = [
                p if s == 0 else rescale_to_full(p, config.model.patch_size)
                for s, p in enumerate(probs)
            ]
            pyramid = [p.movedim(1, 0) for p in rescaled]
            l_seg = seg_loss(pyramid, labels, eff_weights, valids)
            l_cls = (
                classification_loss(F.softmax(class_logits, dim=1), targets)
                if config.use_cls
                else torch.zeros((), dtype=l_seg.dtype)
            )
            l_ent = entropy_loss(pyramid[0], valids) if config.use_ent else torch.zeros((), dtype=l_seg.dtype)
            l_total = total_loss(l_seg, l_cls, l_ent, eff_weights)
            optimizer.zero_grad()
            l_total.backward()
            optimizer.step()
            sums["l_seg"] += float(l_seg.detach())
            sums["l_cls"] += float(l_cls.detach())
            sums["l_ent"] += float(l_ent.detach())
            sums["l_total"] += float(l_total.detach())
        scheduler.step()

        val_auc = math.nan
        if val_cases and (epoch % config.val_every == 0 or epoch == config.epochs):
            spec = PatchSpec(size=config.model.patch_size, stride=config.model.patch_size)
            probs_out = []
            for c in val_cases:
                prob, _ = predict_volume(model, c.volume, c.prostate, spec, blend="uniform")
                probs_out.append((prob, c.label, c.prostate))
            val_auc = lesion_level_auc(probs_out)
            if not math.isnan(val_auc) and val_auc > best_auc:
                best_auc = val_auc
                best_state = copy.deepcopy(model.state_dict())

        entry = {k: v / steps for k, v in sums.items()}
        entry["epoch"] = epoch
        entry["val_auc"] = val_auc
        log.append({k: entry[k] for k in LOG_FIELDS})

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        log=log,
        best_val_auc=best_auc if best_state is not None else math.nan,
        stage_tag=config.stage_tag,
    )


def write_loss_log(path, log: list[dict]) -> None:
    import csv
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for entry in log:
            writer.writerow({k: repr(entry[k]) if k != "epoch" else entry[k] for k in LOG_FIELDS})


def read_loss_log(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            parsed = {"epoch": int(row["epoch"])}
            for k in LOG_FIELDS[1:]:
                parsed[k] = float(row[k])
            rows.append(parsed)
        return rows


@dataclass(frozen=True)
class ExperimentConfig:
    """Hyperparameters of one two-stage experiment."""

    model: ModelConfig
    pretrain_epochs: int = 6
    finetune_epochs: int = 6
    patches_per_case: int = 8
    batch_size: int = 4
    lr_pretrain: float = 1e-4
    lr_finetune: float = 1e-5
    seed: int = 0
    weights: LossWeights = LossWeights()
    positive_bias: float = 0.5
    patch_class_min_voxels: int = 32
    min_lesion_voxels: int = DEFAULT_MIN_LESION_VOXELS
    val_every: int = 1
    blend: str = "gaussian"


@dataclass
class ExperimentResult:
    """Everything one preset run produces."""

    preset: str
    flags: dict
    model: LesionDetectionNet
    pretrain_log: list[dict]
    finetune_log: list[dict]
    threshold: float
    youden: float
    lesion_panel: object
    patient_panel: object
    case_evaluations: list
    predictions: dict  # case_id -> PredictionResult
    runtime_s: float


def run_preset_experiment(
    preset: str,
    cases_weak: list[CaseRecord],
    cases_strong: list[CaseRecord],
    exp: ExperimentConfig,
    flags: dict | None = None,
) -> ExperimentResult:
    """Run one ablation preset end to end.

    Pipeline: optional weak-label pretraining, strong-label fine-tuning,
    Youden threshold selection on the validation split, tiled inference
    and lesion/patient-level evaluation on the test split.
    """
    if flags is None:
        if preset not in ABLATION_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {list(ABLATION_PRESETS)}")
        flags = ABLATION_PRESETS[preset]
    t0 = time.perf_counter()

    common = dict(
        model=exp.model,
        patches_per_case=exp.patches_per_case,
        batch_size=exp.batch_size,
        weights=exp.weights,
        use_cls=flags["use_cls"],
        use_ent=flags["use_ent"],
        positive_bias=exp.positive_bias,
        patch_class_min_voxels=exp.patch_class_min_voxels,
        val_every=exp.val_every,
    )

    pretrain_log: list[dict] = []
    initial_state = None
    if flags["use_pretrained"]:
        pre_cfg = TrainConfig(
            stage="pretrain",
            epochs=exp.pretrain_epochs,
            learning_rate=exp.lr_pretrain,
            seed=exp.seed,
            use_pretrained=False,
            **common,
        )
        pre_result = train_stage(pre_cfg, cases_weak)
        pretrain_log = pre_result.log
        initial_state = pre_result.model.state_dict()

    fin_cfg = TrainConfig(
        stage="finetune",
        epochs=exp.finetune_epochs,
        learning_rate=exp.lr_finetune,
        seed=exp.seed,
        use_pretrained=flags["use_pretrained"],
        **common,
    )
    fin_result = train_stage(fin_cfg, cases_strong, initial_state=initial_state)
    model = fin_result.model

    spec = PatchSpec(size=exp.model.patch_size)
    val_cases = _normalized_cases([c for c in cases_strong if c.split == "val"])
    val_probs = []
    for c in val_cases:
        prob, _ = predict_volume(model, c.volume, c.prostate, spec, blend=exp.blend)
        val_probs.append((c.case_id, prob, c.label, c.prostate))
    if val_probs:
        threshold, youden = select_decision_threshold(val_probs, exp.min_lesion_voxels)
    else:
        threshold, youden = 0.5, math.nan

    test_cases = _normalized_cases([c for c in cases_strong if c.split == "test"])
    evaluations, predictions = [], {}
    for c in test_cases:
        result = predict_case(model, c.volume, c.prostate, threshold, spec, exp.min_lesion_voxels, exp.blend)
        predictions[c.case_id] = result
        evaluations.append(
            evaluate_case(
                c.case_id, result.probability.data, c.label, c.prostate, result.candidates, result.patient_score
            )
        )
    lesion_panel, patient_panel = aggregate_cases(evaluations) if evaluations else (None, None)

    return ExperimentResult(
        preset=preset,
        flags=dict(flags),
        model=model,
        pretrain_log=pretrain_log,
        finetune_log=fin_result.log,
        threshold=threshold,
        youden=youden,
        lesion_panel=lesion_panel,
        patient_panel=patient_panel,
        case_evaluations=evaluations,
        predictions=predictions,
        runtime_s=time.perf_counter() - t0,
    )


def run_ablation(
    presets: list[str] | None,
    cases_weak: list[CaseRecord],
    cases_strong: list[CaseRecord],
    exp: ExperimentConfig,
) -> list[ExperimentResult]:
    """Run the requested presets in the canonical order
    baseline / +cls / +ent / +cls+ent."""
    if presets is None:
        presets = list(ABLATION_PRESETS)
    unknown = [p for p in presets if p not in ABLATION_PRESETS]
    if unknown:
        raise ConfigError(f"unknown ablation presets: {unknown}")
    ordered = [p for p in ABLATION_PRESETS if p in presets]
    return [run_preset_experiment(p, cases_weak, cases_strong, exp) for p in ordered]
