"""
A short masked-autoencoder pretraining run
==========================================

Pretrain the small early-fusion UNet on a handful of phantoms, then ask it to
fill in masked PET patches while the CT stays visible.  A slice triptych
(masked | reconstruction | original) is written as a PGM image.
"""
import os

import numpy as np

from petmae.harmonize import harmonize_case
from petmae.masking import PatchMask, expand_mask, impute_zero, make_grid, sample_mask
from petmae.phantom import generate_cases
from petmae.trainer import TrainConfig, model_from_checkpoint, pretrain

corpus = [harmonize_case(ct, pet, lab).image for ct, pet, lab in generate_cases(8, seed=5)]
cfg = TrainConfig(epochs=10, batch_size=2, lr0=1e-3, seed=1)
ckpt, rows = pretrain(corpus, cfg)
print(f"{len(rows)} steps, loss {rows[0].loss:.3f} -> {rows[-1].loss:.3f}")

model = model_from_checkpoint(ckpt)
grid = make_grid(cfg.crop_shape, cfg.patch_shape)
bits = sample_mask(grid, 0.5, seed=2).bits.copy()
bits[0] = False  # keep all of CT visible
m = expand_mask(PatchMask(bits, 0.5, 2), grid)

v = corpus[0].data
start = [(n - c) // 2 for n, c in zip(v.shape[1:], cfg.crop_shape)]
x = v[:, start[0]:start[0] + 24, start[1]:start[1] + 32, start[2]:start[2] + 32]
rec = model(impute_zero(x, m)[None]).value[0]
err = ((rec[1] - x[1]) ** 2 * m[1]).sum() / ((x[1] ** 2) * m[1]).sum()
print(f"masked-PET error relative to predicting zero: {err:.3f}")

z = 12
lo, hi = x[1, z].min(), x[1, z].max()
panels = [np.clip((p - lo) / (hi - lo), 0, 1) * 255 for p in (impute_zero(x, m)[1, z], rec[1, z], x[1, z])]
img = np.concatenate(panels, axis=1).astype(np.uint8)
out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "pet_triptych.pgm")
with open(out, "wb") as fh:
    fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
print("wrote", out)
