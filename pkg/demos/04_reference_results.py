"""
Reference results
=================

Prints the held-out table for the reference runs: the model trained with
internal detail enhancement against the one trained on degraded
conditions only, for each ablation seed, plus the prompted-colour check.
Everything is read from the experiment cache; missing entries are trained
first, which takes hours on one CPU core.
"""

import numpy as np

from iide_lab.experiments import Reference
from iide_lab.metrics import format_table

ref = Reference()
s = ref.setup
main = ref.heldout_report(s.p_iide, 0)
print(f"{s.steps}-step model: PSNR {main.mean_psnr:.2f} dB vs degraded {main.mean_input_psnr:.2f} dB\n")

rows = []
for seed in s.ablation_seeds:
    rows.append((f"w/o IIDE, seed {seed}", ref.heldout_report(1.0, seed, s.ablation_steps)))
    rows.append((f"w/ IIDE, seed {seed}", ref.heldout_report(s.p_iide, seed, s.ablation_steps)))
print(format_table(rows))

cases = ref.hue_cases()
hits = np.mean([c["distance"] <= 30 for c in cases])
print(f"\nprompted colour reached (within 30 deg) in {hits:.0%} of {len(cases)} grayscale inputs")
