"""Shared harness for the phantom training studies used by the acceptance suite.

Everything is derived from fixed seeds so each study is reproducible; the
knobs live in ``StudyConfig`` so the same code drives calibration runs.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from petmae import seeding
from petmae.autonet import Fusion, UNetConfig
from petmae.harmonize import harmonize_case
from petmae.infer import segment
from petmae.masking import PatchMask, expand_mask, impute_zero, make_grid, sample_mask
from petmae.metrics import dice
from petmae.phantom import PhantomConfig, generate_cases, generate_phantom
from petmae.trainer import (
    Objective,
    TrainConfig,
    finetune,
    linear_probe,
    model_from_checkpoint,
    pretrain,
    split_train_val,
)
from petmae.volume import random_crop

DATA = os.path.join(os.path.dirname(__file__), "data")
CORPUS_RECORD = os.path.join(DATA, "pretrain_corpus.json")

PRETRAIN_SEED = 7  # phantom corpus seed
CROP = (24, 32, 32)
PATCH = (6, 8, 8)


@dataclass(frozen=True)
class StudyConfig:
    pretrain_steps: int = 200
    train_seed: int = seeding.DEFAULT_SEED
    downstream_cases: int = 20
    downstream_shape: tuple = (24, 32, 32)
    downstream_crop: tuple = (12, 16, 16)
    finetune_epochs: int = 100
    finetune_lr: float = 1e-4
    probe_epochs: int = 700
    probe_lr: float = 1e-3
    probe_k: int = 5
    repetitions: int = 5
    recovery_cases: int = 5


def pretrain_corpus(n: int = 64):
    cases = generate_cases(n, PRETRAIN_SEED)
    return cases, [harmonize_case(ct, pet, lab).image for ct, pet, lab in cases]


def corpus_digest(cases) -> list[str]:
    """sha256 of each raw (ct, pet, label) triple, in case order."""
    out = []
    for triple in cases:
        h = hashlib.sha256()
        for v in triple:
            h.update(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        out.append(h.hexdigest())
    return out


def committed_digest() -> dict:
    with open(CORPUS_RECORD) as fh:
        return json.load(fh)


def pretrain_config(study: StudyConfig, fusion: Fusion = Fusion.EARLY_CONCAT) -> TrainConfig:
    return TrainConfig(
        epochs=200,
        batch_size=2,
        lr0=1e-4,
        crop_shape=CROP,
        patch_shape=PATCH,
        seed=study.train_seed,
        model=UNetConfig(fusion=fusion, seed=study.train_seed),
        max_steps=study.pretrain_steps,
    )


def run_pretrain(corpus, study: StudyConfig, fusion: Fusion = Fusion.EARLY_CONCAT):
    return pretrain(corpus, pretrain_config(study, fusion))


def smoothed_ratio(rows, window: int = 10) -> float:
    losses = np.array([r.loss for r in rows])
    return float(losses[-window:].mean() / losses[:window].mean())


def downstream_data(study: StudyConfig):
    cfg = PhantomConfig(shape=study.downstream_shape)
    cases = generate_cases(study.downstream_cases, seeding.derive_seed(study.train_seed, 11), cfg)
    harmonized = [harmonize_case(ct, pet, lab) for ct, pet, lab in cases]
    images = [h.image for h in harmonized]
    labels = [h.label for h in harmonized]
    train, val = split_train_val(len(images), study.train_seed)
    return [images[i] for i in train], [labels[i] for i in train], [images[i] for i in val], [labels[i] for i in val]


def val_dice(ckpt, images, labels, window) -> float:
    model = model_from_checkpoint(ckpt)
    return float(np.mean([dice(segment(model, v, window), lab.data[0] > 0.5) for v, lab in zip(images, labels)]))


def _downstream_cfg(study: StudyConfig, rep: int, epochs: int, lr: float) -> TrainConfig:
    return TrainConfig(
        epochs=epochs,
        batch_size=2,
        lr0=lr,
        crop_shape=study.downstream_crop,
        patch_shape=tuple(c // 2 for c in study.downstream_crop),
        seed=seeding.derive_seed(study.train_seed, 12, rep),
        objective=Objective.DICE_CE,
        model=UNetConfig(seed=seeding.derive_seed(study.train_seed, 13, rep)),
    )


def finetune_pair(study: StudyConfig, data, mae_ckpt, rep: int) -> dict:
    tr_img, tr_lab, va_img, va_lab = data
    cfg = _downstream_cfg(study, rep, study.finetune_epochs, study.finetune_lr)
    out = {}
    for name, init in (("mae", mae_ckpt), ("scratch", None)):
        ck, _ = finetune(tr_img, tr_lab, cfg, init=init, fraction=1.0)
        out[name] = val_dice(ck, va_img, va_lab, study.downstream_crop)
    return out


def probe_triple(study: StudyConfig, data, early_ckpt, separate_ckpt, rep: int) -> dict:
    tr_img, tr_lab, va_img, va_lab = data
    cfg = _downstream_cfg(study, rep, study.probe_epochs, study.probe_lr)
    out = {}
    for name, init in (("mae_concat", early_ckpt), ("scratch", None), ("mae_separate", separate_ckpt)):
        ck, _ = linear_probe(tr_img, tr_lab, cfg, init=init, k=study.probe_k)
        out[name] = val_dice(ck, va_img, va_lab, study.downstream_crop)
    return out


def recovery_ratio(study: StudyConfig, ckpt, rep: int) -> float:
    """Masked-PET reconstruction MSE over the zero-prediction MSE, CT fully visible."""
    model = model_from_checkpoint(ckpt)
    grid = make_grid(CROP, PATCH)
    err = base = 0.0
    for i in range(study.recovery_cases):
        seed = seeding.derive_seed(study.train_seed, 14, rep, i)
        ct, pet, lab = generate_phantom(PhantomConfig(rho=0.8), seed)
        x = random_crop(harmonize_case(ct, pet, lab).image, CROP, seeding.rng(seed, seeding.CROP)).data
        bits = sample_mask(grid, 0.5, seed).bits.copy()
        bits[0] = False  # CT stays visible
        m = expand_mask(PatchMask(bits, 0.5, seed), grid)
        rec = model(impute_zero(x, m)[None]).value[0]
        err += float(((rec[1] - x[1]) ** 2 * m[1]).sum())
        base += float((x[1] ** 2 * m[1]).sum())
    return err / base
