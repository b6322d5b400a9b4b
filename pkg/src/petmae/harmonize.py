"""Per-case harmonization: crop, optional registration, resample, normalize.

Order of operations for one CT/PET(/label) case:

1. optional rigid PET -> CT registration (PET resampled onto the CT grid),
2. CT blank-boundary crop applied to every companion,
3. trilinear resampling to the target spacing (labels re-binarized at 0.5),
4. per-modality z-score normalization of the cropped, resampled volume.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .nifti_io import atomic_write_bytes, read_nifti, write_nifti
from .register import MiConfig, apply_rigid, register_report
from .volume import (
    DEFAULT_BLANK_MARGIN,
    DEFAULT_BLANK_THRESHOLD_HU,
    TARGET_SPACING,
    Channel,
    Volume,
    concat_channels,
    crop_blank_boundary,
    resample_trilinear,
    zscore_normalize,
)


@dataclass
class HarmonizedCase:
    image: Volume  # 2 channels, CT then PET
    label: Volume | None
    transform: dict | None = None


def _relabel(v: Volume, label: Channel) -> Volume:
    return Volume(v.data, v.spacing, v.origin, (label,))


def harmonize_case(
    ct: Volume,
    pet: Volume,
    label: Volume | None = None,
    spacing=TARGET_SPACING,
    register: bool = False,
    threshold_hu: float = DEFAULT_BLANK_THRESHOLD_HU,
    margin: int = DEFAULT_BLANK_MARGIN,
    mi_config: MiConfig | None = None,
) -> HarmonizedCase:
    ct = _relabel(ct, Channel.CT)
    pet = _relabel(pet, Channel.PET)
    transform = None
    if register:
        report = register_report(ct, pet, mi_config)
        pet = apply_rigid(pet, report.transform, ct)
        transform = {
            "rotation": list(report.transform.rotation),
            "translation": list(report.transform.translation),
            "mi_initial": report.mi_initial,
            "mi_final": report.mi_final,
        }
    companions = [pet] + ([label] if label is not None else [])
    cropped = crop_blank_boundary(ct, companions, threshold_hu, margin)
    ct, pet = cropped[0], cropped[1]
    ct = zscore_normalize(resample_trilinear(ct, spacing))
    pet = zscore_normalize(resample_trilinear(pet, spacing))
    out_label = None
    if label is not None:
        lab = resample_trilinear(cropped[2], spacing)
        out_label = lab.with_data((lab.data >= 0.5).astype(np.float64))
    return HarmonizedCase(concat_channels(ct, pet), out_label, transform)


def harmonize_corpus(corpus_dir, out_dir, spacing=TARGET_SPACING, register=False,
                     threshold_hu=DEFAULT_BLANK_THRESHOLD_HU, margin=DEFAULT_BLANK_MARGIN) -> dict:
    """Harmonize every case listed in ``corpus_dir/corpus.json`` into ``out_dir``.

    Writes ``ct_*.nii``, ``pet_*.nii`` and ``label_*.nii`` plus a
    ``corpus.json`` with the same case list layout as the input.
    """
    with open(os.path.join(corpus_dir, "corpus.json")) as fh:
        manifest = json.load(fh)
    os.makedirs(out_dir, exist_ok=True)
    cases = []
    for case in manifest["cases"]:
        ct = read_nifti(os.path.join(corpus_dir, case["ct"]))
        pet = read_nifti(os.path.join(corpus_dir, case["pet"]))
        label = read_nifti(os.path.join(corpus_dir, case["label"])) if case.get("label") else None
        h = harmonize_case(ct, pet, label, spacing, register, threshold_hu, margin)
        entry = dict(case)
        write_nifti(h.image.channel(0), os.path.join(out_dir, case["ct"]))
        write_nifti(h.image.channel(1), os.path.join(out_dir, case["pet"]))
        if h.label is not None:
            write_nifti(h.label, os.path.join(out_dir, case["label"]))
        entry["shape"] = list(h.image.shape)
        if h.transform is not None:
            entry["registration"] = h.transform
        cases.append(entry)
    out = {
        **{k: v for k, v in manifest.items() if k != "cases"},
        "harmonization": {
            "spacing_zyx": list(spacing),
            "register": bool(register),
            "threshold_hu": threshold_hu,
            "margin": margin,
        },
        "cases": cases,
    }
    atomic_write_bytes(os.path.join(out_dir, "corpus.json"), json.dumps(out, indent=2).encode())
    return out


def load_harmonized(corpus_dir) -> tuple[list[Volume], list[Volume | None], dict]:
    """Read a harmonized corpus back as 2-channel images and label volumes."""
    with open(os.path.join(corpus_dir, "corpus.json")) as fh:
        manifest = json.load(fh)
    images, labels = [], []
    for case in manifest["cases"]:
        ct = _relabel(read_nifti(os.path.join(corpus_dir, case["ct"])), Channel.CT)
        pet = _relabel(read_nifti(os.path.join(corpus_dir, case["pet"])), Channel.PET)
        images.append(concat_channels(ct, pet))
        path = os.path.join(corpus_dir, case["label"]) if case.get("label") else None
        labels.append(read_nifti(path) if path and os.path.exists(path) else None)
    return images, labels, manifest
