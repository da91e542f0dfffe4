"""
Miniature two-stage experiment
==============================

A small but complete run of the pipeline: phantom cohort, weak-label
pretraining, strong-label fine-tuning, threshold selection, tiled
inference, and the lesion/patient-level panel -- side by side with the
ablation baseline that skips pretraining and both false-positive
reduction terms.  Takes a few minutes on a laptop CPU.
"""

import numpy as np

from echodetect import (
    ExperimentConfig,
    ModelConfig,
    PhantomSpec,
    generate_dataset,
    run_preset_experiment,
)
from echodetect.cases import CaseRecord
from echodetect.inference import write_montage
from echodetect.reporting import ReportRow, render_text

#%%
# A compact cohort: 20 train / 4 val / 6 test at 48^3.

spec = PhantomSpec(shape=(48, 48, 48), prostate_semiaxes=(17.0, 14.0, 12.0))
generated = generate_dataset(30, 0.5, spec, master_seed=7, split_counts=(20, 4, 6))
cases_weak = [
    CaseRecord(g.record.case_id, g.record.volume, g.record.prostate, g.weak_label, g.record.split)
    for g in generated
]
cases_strong = [g.record for g in generated]
print("cohort:", len(cases_strong), "cases,",
      sum(c.is_positive for c in cases_strong), "positive")

#%%
# Shared hyperparameters; only the preset flags differ between runs.

exp = ExperimentConfig(
    model=ModelConfig(levels=4, base_channels=8, num_scales=3, patch_size=(32, 32, 32)),
    pretrain_epochs=4,
    finetune_epochs=4,
    patches_per_case=6,
    batch_size=4,
    lr_pretrain=3e-4,
    lr_finetune=1e-4,
    seed=0,
    val_every=2,
)

rows = []
for preset in ("baseline", "+cls+ent"):
    result = run_preset_experiment(preset, cases_weak, cases_strong, exp)
    fp = sum(ev.match.fp for ev in result.case_evaluations)
    print(f"{preset}: threshold={result.threshold:.2f}  test FP candidates={fp}  "
          f"runtime={result.runtime_s:.0f}s")
    rows.append(ReportRow(preset, "run", result.lesion_panel, result.patient_panel))

#%%
# The comparison table (same layout the CLI's `report` command writes).

print(render_text(rows))

#%%
# Qualitative look at one test case from the last run.

case = next(c for c in cases_strong if c.split == "test" and c.is_positive)
pred = result.predictions[case.case_id]
write_montage("desk_experiment_montage.png", case.volume, pred.probability, pred.entropy, case.label)
print("wrote desk_experiment_montage.png")
