"""
Synthetic old-photo degradations
================================

Renders a few toy shape images, degrades each at increasing severity and
reports how far the degraded copy drifts from the clean one. A contact
sheet is written to ``degradations.png``.
"""

import sys
from pathlib import Path

import numpy as np

from iide_lab.data import ShapesDatasetConfig, render_shape_image, write_png
from iide_lab.degradation import apply, sample_spec
from iide_lab.metrics import psnr, ssim

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("degradations.png")
cfg = ShapesDatasetConfig()
severities = [0.0, 0.3, 0.5, 0.7, 1.0]
rows = []
for seed in range(4):
    hq, _, caption = render_shape_image(cfg, seed)
    row = []
    for s in severities:
        spec = sample_spec(seed, s)
        pair = apply(hq, spec)
        row.append(pair.lq)
        print(f"{caption:16s} severity {s:.1f}: PSNR {psnr(pair.lq, hq):6.2f} dB, SSIM {ssim(pair.lq, hq):.3f}, "
              f"grayscale {spec.color_fade.grayscale}, scratch cover {pair.scratch_mask.mean():.3f}")
    rows.append(np.concatenate(row, axis=2))

# one row per image, one column per severity
write_png(out, np.concatenate(rows, axis=1))
print("wrote", out)
