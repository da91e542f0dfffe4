"""Command-line surface.

Subcommands: ``generate-phantoms``, ``train``, ``infer``, ``evaluate``,
``ablate``, ``report``.  Every run writes its artifacts under ``--out``
together with a ``run_meta.yaml`` (config snapshot, seed, version,
timestamps) from which the run can be reproduced.

Exit codes: 0 success, 1 validation error (bad flags/config/manifest),
2 runtime failure (divergence, IO, grid mismatch).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .cases import CaseRecord, ManifestEntry, load_case, load_manifest, save_manifest
from .config import (
    build_loss_weights,
    build_model_config,
    get_section,
    load_config,
    strict_kwargs,
)
from .errors import ConfigError
from .evaluation import BENCHMARK_ABLATION, BENCHMARK_MAIN, aggregate_cases, evaluate_case
from .inference import (
    extract_lesions,
    patient_score,
    predict_case,
    predict_volume,
    select_decision_threshold,
    write_candidates_csv,
    write_montage,
)
from .losses import ABLATION_PRESETS
from .model import load_checkpoint, save_checkpoint
from .patches import PatchSpec
from .phantom import PhantomSpec, generate_dataset
from .reporting import ReportRow, parse_csv, write_report
from .training import (
    ExperimentConfig,
    TrainConfig,
    run_ablation,
    train_stage,
    write_loss_log,
    _normalized_cases,
)
from .volio import load_volume, save_label, save_mask, save_volume
from .volumes import Volume3D, normalize_intensity

OUT_ROOT_ENV = "ECHODETECT_OUT_ROOT"


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through ConfigError
    # instead so usage problems consistently map to exit code 1.
    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="echodetect", description=__doc__)
    parser.add_argument("--version", action="version", version=f"echodetect {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="YAML experiment config")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<command>-<timestamp>)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="internal parallelism (torch threads)")
        p.add_argument("--device", default="cpu", help="compute device (this build supports cpu)")

    add_common(sub.add_parser("generate-phantoms", help="write a synthetic phantom cohort"))
    add_common(sub.add_parser("train", help="run one training stage"))
    add_common(sub.add_parser("infer", help="whole-volume prediction for a manifest split"))
    add_common(sub.add_parser("evaluate", help="lesion/patient-level metric panels"))
    add_common(sub.add_parser("ablate", help="run the ablation preset grid"))
    report = sub.add_parser("report", help="merge run panels into one comparison table")
    add_common(report, needs_config=False)
    report.add_argument("runs", nargs="*", help="run directories containing metrics.csv")
    return parser


def _resolve_out(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"--out not given and ${OUT_ROOT_ENV} is unset")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(root) / f"{args.command}-{stamp}"


def _apply_runtime(args, config: dict) -> int:
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    workers = args.workers if args.workers is not None else config.get("workers")
    if workers:
        torch.set_num_threads(int(workers))
    if args.device != "cpu":
        raise ConfigError(f"unsupported device {args.device!r}: this build runs on cpu")
    return seed


def _write_meta(out: Path, args, config: dict, seed: int, started: float, extra: dict | None = None) -> None:
    meta = {
        "command": args.command,
        "version": __version__,
        "seed": seed,
        "argv": sys.argv[1:],
        "config": config,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    if extra:
        meta.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_meta.yaml").write_text(yaml.safe_dump(meta, sort_keys=False))


def _fmt_suffix(fmt: str) -> str:
    if fmt in ("nii.gz", "nii", "raw"):
        return "." + fmt
    raise ConfigError(f"unsupported volume format {fmt!r} (expected nii.gz, nii, or raw)")


def _cmd_generate_phantoms(args, config: dict, seed: int) -> None:
    section = get_section(config, "phantom")
    spec_map = strict_kwargs(PhantomSpec, section.get("spec") or {}, "phantom spec")
    for key in ("shape", "prostate_semiaxes", "spacing"):
        if key in spec_map and spec_map[key] is not None:
            spec_map[key] = tuple(spec_map[key])
    for key in spec_map:
        if key.endswith("_range") and spec_map[key] is not None:
            spec_map[key] = tuple(spec_map[key])
    try:
        spec = PhantomSpec(**spec_map)
    except ValueError as exc:
        raise ConfigError(f"phantom spec: {exc}") from exc
    n_cases = int(section.get("n_cases", 56))
    positive_fraction = float(section.get("positive_fraction", 0.5))
    split_counts = section.get("split_counts")
    if split_counts is not None:
        split_counts = tuple(int(c) for c in split_counts)
    suffix = _fmt_suffix(section.get("format", "nii.gz"))

    out = _resolve_out(args)
    case_dir = out / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)
    cases = generate_dataset(n_cases, positive_fraction, spec, seed, split_counts)

    entries = []
    report_lines = ["case_id,split,positive,lesion_fraction,confounder_count"]
    for gen in cases:
        rec = gen.record
        paths = {
            "image": f"cases/{rec.case_id}_image{suffix}",
            "prostate": f"cases/{rec.case_id}_prostate{suffix}",
            "strong": f"cases/{rec.case_id}_label_strong{suffix}",
            "weak": f"cases/{rec.case_id}_label_weak{suffix}",
        }
        save_volume(out / paths["image"], rec.volume)
        save_mask(out / paths["prostate"], rec.prostate)
        save_label(out / paths["strong"], rec.label)
        save_label(out / paths["weak"], gen.weak_label)
        if section.get("save_confounders", False):
            save_mask(out / f"cases/{rec.case_id}_confounders{suffix}", gen.confounders)
        for prov, label_path in (("weak", paths["weak"]), ("strong", paths["strong"])):
            entries.append(
                ManifestEntry(rec.case_id, paths["image"], paths["prostate"], label_path, prov, rec.split)
            )
        report_lines.append(
            f"{rec.case_id},{rec.split},{int(rec.is_positive)},{gen.lesion_fraction:.5f},{gen.confounder_count}"
        )
    save_manifest(out / "manifest.csv", entries)
    (out / "generation_report.csv").write_text("\n".join(report_lines) + "\n")


def _load_cases(manifest_path: Path, provenance: str, splits=None) -> list[CaseRecord]:
    entries = load_manifest(manifest_path)
    root = manifest_path.parent
    picked = [
        e for e in entries
        if e.provenance == provenance and (splits is None or e.split in splits)
    ]
    return [load_case(e, root) for e in picked]


def _cmd_train(args, config: dict, seed: int) -> dict:
    section = get_section(config, "train")
    if "manifest" not in section:
        raise ConfigError("train section needs a 'manifest' path")
    stage = section.get("stage", "finetune")
    flags = {"use_cls": True, "use_ent": True, "use_pretrained": stage == "finetune"}
    preset = section.get("preset")
    if preset is not None:
        if preset not in ABLATION_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {list(ABLATION_PRESETS)}")
        flags = dict(ABLATION_PRESETS[preset])
    for key in flags:
        if key in section:
            flags[key] = bool(section[key])

    model_cfg = build_model_config(section.get("model"))
    weights = build_loss_weights(section.get("loss"))
    train_cfg = TrainConfig(
        stage=stage,
        model=model_cfg,
        epochs=int(section.get("epochs", 10)),
        patches_per_case=int(section.get("patches_per_case", 8)),
        batch_size=int(section.get("batch_size", 4)),
        learning_rate=section.get("learning_rate"),
        seed=seed,
        weights=weights,
        use_cls=flags["use_cls"],
        use_ent=flags["use_ent"],
        use_pretrained=flags["use_pretrained"],
        positive_bias=float(section.get("positive_bias", 0.5)),
        patch_class_min_voxels=int(section.get("patch_class_min_voxels", 32)),
        val_every=int(section.get("val_every", 1)),
        allow_provenance_mismatch=bool(section.get("allow_provenance_mismatch", False)),
    )

    manifest_path = Path(section["manifest"])
    provenance = "weak" if stage == "pretrain" else "strong"
    cases = _load_cases(manifest_path, provenance, splits=("train", "val"))

    initial_state = None
    if section.get("initial_checkpoint"):
        ckpt = load_checkpoint(section["initial_checkpoint"])
        if ckpt.config != model_cfg:
            raise ConfigError("initial checkpoint architecture does not match the configured model")
        initial_state = ckpt.params
    result = train_stage(train_cfg, cases, initial_state=initial_state)

    # Decision threshold from the validation split, stored with the
    # checkpoint so downstream inference needs no free parameters.
    threshold, youden = 0.5, math.nan
    val_cases = _normalized_cases([c for c in cases if c.split == "val"])
    if val_cases:
        spec = PatchSpec(size=model_cfg.patch_size)
        probs = []
        for c in val_cases:
            prob, _ = predict_volume(result.model, c.volume, c.prostate, spec)
            probs.append((c.case_id, prob, c.label, c.prostate))
        threshold, youden = select_decision_threshold(probs, int(section.get("min_lesion_voxels", 20)))

    out = _resolve_out(args)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out / "checkpoint.pt",
        result.model,
        stage=result.stage_tag,
        seed=seed,
        metadata={
            "best_val_auc": result.best_val_auc,
            "decision_threshold": threshold,
            "youden_j": youden,
            "flags": flags,
        },
    )
    write_loss_log(out / "loss_log.csv", result.log)
    return {"best_val_auc": result.best_val_auc, "decision_threshold": threshold}


def _unique_case_entries(entries, split: str):
    seen = {}
    for e in entries:
        if e.split != split:
            continue
        # prefer the strong row when a case appears with both provenances
        if e.case_id not in seen or e.provenance == "strong":
            seen[e.case_id] = e
    return list(seen.values())


def _cmd_infer(args, config: dict, seed: int) -> dict:
    section = get_section(config, "infer")
    for key in ("manifest", "checkpoint"):
        if key not in section:
            raise ConfigError(f"infer section needs a '{key}' path")
    ckpt = load_checkpoint(section["checkpoint"])
    model = ckpt.build_model()
    threshold = section.get("threshold")
    if threshold is None:
        threshold = ckpt.metadata.get("decision_threshold")
    if threshold is None:
        raise ConfigError("no threshold in config or checkpoint metadata")
    threshold = float(threshold)
    min_size = int(section.get("min_lesion_voxels", 20))
    blend = section.get("blend", "gaussian")
    suffix = _fmt_suffix(section.get("format", "nii.gz"))
    split = section.get("split", "test")

    manifest_path = Path(section["manifest"])
    entries = _unique_case_entries(load_manifest(manifest_path), split)
    if not entries:
        raise ConfigError(f"manifest has no cases in split {split!r}")

    out = _resolve_out(args)
    out.mkdir(parents=True, exist_ok=True)
    spec = PatchSpec(size=model.config.patch_size)
    for entry in entries:
        case = load_case(entry, manifest_path.parent)
        vol = normalize_intensity(case.volume, case.prostate)
        result = predict_case(model, vol, case.prostate, threshold, spec, min_size, blend)
        save_volume(out / f"{case.case_id}_prob{suffix}", result.probability)
        save_volume(out / f"{case.case_id}_entropy{suffix}", result.entropy)
        write_candidates_csv(out / "candidates.csv", case.case_id, result.candidates)
        if section.get("montage", False):
            write_montage(out / f"{case.case_id}_montage.png", vol, result.probability, result.entropy, case.label)
    (out / "threshold.yaml").write_text(
        yaml.safe_dump({"threshold": threshold, "min_lesion_voxels": min_size, "split": split})
    )
    return {"threshold": threshold, "cases": len(entries)}


def _find_prob_volume(pred_dir: Path, case_id: str) -> Volume3D:
    for suffix in (".nii.gz", ".nii", ".raw"):
        path = pred_dir / f"{case_id}_prob{suffix}"
        if path.exists():
            return load_volume(path)
    raise ConfigError(f"no probability volume for case {case_id} under {pred_dir}")


def _cmd_evaluate(args, config: dict, seed: int) -> dict:
    section = get_section(config, "evaluate")
    for key in ("manifest", "predictions"):
        if key not in section:
            raise ConfigError(f"evaluate section needs a '{key}' path")
    manifest_path = Path(section["manifest"])
    pred_dir = Path(section["predictions"])
    split = section.get("split", "test")
    threshold = section.get("threshold")
    min_size = section.get("min_lesion_voxels")
    if threshold is None or min_size is None:
        meta_path = pred_dir / "threshold.yaml"
        if not meta_path.exists():
            raise ConfigError(f"evaluate needs a threshold: set it in config or provide {meta_path}")
        meta = yaml.safe_load(meta_path.read_text())
        threshold = meta["threshold"] if threshold is None else threshold
        min_size = meta["min_lesion_voxels"] if min_size is None else min_size
    threshold = float(threshold)
    min_size = int(min_size)
    overlap = float(section.get("min_overlap_fraction", 0.1))

    cases = _load_cases(manifest_path, "strong", splits=(split,))
    if not cases:
        raise ConfigError(f"manifest has no strong-label cases in split {split!r}")

    evaluations = []
    per_case_lines = ["case_id,tp,fp,fn,tn,region_fp,patient_score,patient_label"]
    for case in cases:
        prob = _find_prob_volume(pred_dir, case.case_id)
        candidates = extract_lesions(prob, case.prostate, threshold, min_size)
        ev = evaluate_case(
            case.case_id, prob.data, case.label, case.prostate, candidates,
            patient_score(candidates), overlap,
        )
        evaluations.append(ev)
        m = ev.match
        per_case_lines.append(
            f"{case.case_id},{m.tp},{m.fp},{m.fn},{m.tn},{m.region_fp},{ev.patient_score:.6f},{ev.patient_label}"
        )
    lesion_panel, patient_panel = aggregate_cases(evaluations)

    out = _resolve_out(args)
    out.mkdir(parents=True, exist_ok=True)
    name = section.get("name") or out.name
    write_report(out, [ReportRow(name, "run", lesion_panel, patient_panel)])
    (out / "per_case.csv").write_text("\n".join(per_case_lines) + "\n")
    return {"lesion_roc_auc": lesion_panel.roc_auc, "patient_roc_auc": patient_panel.roc_auc}


def _cmd_ablate(args, config: dict, seed: int) -> dict:
    section = get_section(config, "ablate")
    if "manifest" not in section:
        raise ConfigError("ablate section needs a 'manifest' path")
    manifest_path = Path(section["manifest"])
    presets = section.get("presets")
    model_cfg = build_model_config(section.get("model"))
    weights = build_loss_weights(section.get("loss"))
    exp = ExperimentConfig(
        model=model_cfg,
        pretrain_epochs=int(section.get("pretrain_epochs", 6)),
        finetune_epochs=int(section.get("finetune_epochs", 6)),
        patches_per_case=int(section.get("patches_per_case", 8)),
        batch_size=int(section.get("batch_size", 4)),
        lr_pretrain=float(section.get("lr_pretrain", 1e-4)),
        lr_finetune=float(section.get("lr_finetune", 1e-5)),
        seed=seed,
        weights=weights,
        positive_bias=float(section.get("positive_bias", 0.5)),
        patch_class_min_voxels=int(section.get("patch_class_min_voxels", 32)),
        min_lesion_voxels=int(section.get("min_lesion_voxels", 20)),
        val_every=int(section.get("val_every", 1)),
        blend=section.get("blend", "gaussian"),
    )
    cases_weak = _load_cases(manifest_path, "weak")
    cases_strong = _load_cases(manifest_path, "strong")
    results = run_ablation(presets, cases_weak, cases_strong, exp)

    out = _resolve_out(args)
    rows = []
    for res in results:
        run_dir = out / res.preset.replace("+", "plus_")
        run_dir.mkdir(parents=True, exist_ok=True)
        write_loss_log(run_dir / "loss_log_finetune.csv", res.finetune_log)
        if res.pretrain_log:
            write_loss_log(run_dir / "loss_log_pretrain.csv", res.pretrain_log)
        row = ReportRow(res.preset, "run", res.lesion_panel, res.patient_panel)
        write_report(run_dir, [row])
        rows.append(row)
    if section.get("include_reference", True):
        rows += [ReportRow(n, "published-reference", l, p) for n, l, p in BENCHMARK_ABLATION]
    write_report(out, rows, stem="ablation_metrics")
    return {"presets": [r.preset for r in results]}


def _cmd_report(args, config: dict, seed: int) -> dict:
    section = get_section(config, "report", required=False) if config else {}
    run_dirs = list(args.runs) + [str(r) for r in section.get("runs", [])]
    if not run_dirs:
        raise ConfigError("report needs at least one run directory (positional or in config)")
    rows = []
    for run in run_dirs:
        candidates = [Path(run) / "metrics.csv", Path(run) / "ablation_metrics.csv"]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise ConfigError(f"no metrics.csv in run directory {run}")
        for row in parse_csv(path.read_text()):
            if row.source == "run":
                rows.append(row)
    if section.get("include_reference", True):
        rows += [ReportRow(n, "published-reference", l, p) for n, l, p in BENCHMARK_MAIN]
    out = _resolve_out(args)
    write_report(out, rows, stem="report")
    return {"rows": len(rows)}


_COMMANDS = {
    "generate-phantoms": _cmd_generate_phantoms,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config) if args.config else {}
        seed = _apply_runtime(args, config)
        args.out = str(_resolve_out(args))  # pin one directory for the whole run
        started = time.time()
        extra = _COMMANDS[args.command](args, config, seed) or {}
        _write_meta(Path(args.out), args, config, seed, started, extra)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
