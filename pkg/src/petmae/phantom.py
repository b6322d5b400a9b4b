"""Seeded synthetic PET/CT phantoms with lesion labels.

Each phantom is an ellipsoidal body with a bone shell in CT.  PET mixes a
blurred copy of the CT body mask (weight ``rho``) with a smooth random field
restricted to the body (weight ``1 - rho``), then adds hot spherical lesions
that are invisible in CT.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import seeding
from .errors import BadConfig
from .nifti_io import atomic_write_bytes, write_nifti
from .volume import Channel, Volume

BLUR_KERNEL = (0.25, 0.5, 0.25)


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (48, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 2.0, 2.0)
    body_hu: float = 40.0
    body_noise_hu: float = 10.0
    air_hu: float = -1000.0
    bone_hu: float = 300.0
    bone_shell: tuple[float, float] = (0.82, 0.9)  # normalised ellipsoid radius band
    body_fraction: tuple[float, float] = (0.6, 0.85)  # semi-axis / half extent
    pet_background: float = 1.0
    lesion_count: tuple[int, int] = (1, 4)
    lesion_radius_mm: tuple[float, float] = (3.0, 8.0)
    lesion_uptake: tuple[float, float] = (4.0, 8.0)
    rho: float = 0.8
    body_blur_passes: int = 2
    noise_blur_passes: int = 6

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        for name in ("bone_shell", "body_fraction", "lesion_count", "lesion_radius_mm", "lesion_uptake"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.shape) != 3 or min(self.shape) < 4 or min(self.spacing) <= 0:
            raise BadConfig(f"bad phantom geometry {self.shape} @ {self.spacing}")
        if not 0.0 <= self.rho <= 1.0:
            raise BadConfig(f"rho {self.rho} outside [0, 1]")
        lo, hi = self.body_fraction
        if not 0 < lo <= hi <= 0.95:
            raise BadConfig("body must fit inside the volume (fraction <= 0.95)")
        if not 0 < self.lesion_radius_mm[0] <= self.lesion_radius_mm[1]:
            raise BadConfig("lesion radii must be positive and ordered")
        if not 0 <= self.lesion_count[0] <= self.lesion_count[1]:
            raise BadConfig("lesion count range must be ordered and non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def blur(a: np.ndarray, passes: int) -> np.ndarray:
    """Repeated separable [1, 2, 1] / 4 smoothing with edge replication."""
    out = np.asarray(a, dtype=np.float64)
    k0, k1, k2 = BLUR_KERNEL
    for _ in range(passes):
        for axis in range(out.ndim):
            p = np.pad(out, [(1, 1) if i == axis else (0, 0) for i in range(out.ndim)], mode="edge")
            n = out.shape[axis]
            lo = np.take(p, np.arange(0, n), axis=axis)
            mid = np.take(p, np.arange(1, n + 1), axis=axis)
            hi = np.take(p, np.arange(2, n + 2), axis=axis)
            out = k0 * lo + k1 * mid + k2 * hi
    return out


def _coords(shape, spacing):
    """Physical coordinates (mm) relative to the volume centre, one array per axis."""
    return np.meshgrid(
        *[(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(shape, spacing)], indexing="ij"
    )


def generate_phantom(cfg: PhantomConfig | None = None, seed: int = 0):
    """Return ``(ct, pet, labels)`` single-channel volumes for one phantom."""
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    half = np.array(cfg.shape) * np.array(cfg.spacing) / 2.0
    semi = rng.uniform(*cfg.body_fraction, size=3) * half
    slack = half - semi
    centre = rng.uniform(-0.5, 0.5, size=3) * np.minimum(slack, 0.05 * 2 * half)
    zz, yy, xx = _coords(cfg.shape, cfg.spacing)
    rel = [(c - m) / a for c, m, a in zip((zz, yy, xx), centre, semi)]
    radius = np.sqrt(rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2)
    body = radius <= 1.0
    shell = body & (radius >= cfg.bone_shell[0]) & (radius <= cfg.bone_shell[1])

    ct = np.full(cfg.shape, cfg.air_hu)
    ct[body] = cfg.body_hu + cfg.body_noise_hu * rng.standard_normal(int(body.sum()))
    ct[shell] = cfg.bone_hu

    field = blur(rng.standard_normal(cfg.shape), cfg.noise_blur_passes)
    field = (field - field.mean()) / max(field.std(), 1e-12)
    structured = blur(body.astype(np.float64), cfg.body_blur_passes)
    independent = body * (1.0 + field)
    pet = cfg.pet_background * np.clip(cfg.rho * structured + (1.0 - cfg.rho) * independent, 0.0, None)

    labels = np.zeros(cfg.shape, dtype=bool)
    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    for _ in range(n_lesions):
        # Lesion centres sit well inside the body ellipsoid.
        while True:
            u = rng.uniform(-0.7, 0.7, size=3)
            if np.sqrt((u**2).sum()) <= 0.7:
                break
        c = centre + u * semi
        r = rng.uniform(*cfg.lesion_radius_mm)
        uptake = rng.uniform(*cfg.lesion_uptake)
        sphere = ((zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r * r) & body
        pet[sphere] = np.maximum(pet[sphere], uptake * cfg.pet_background)
        labels |= sphere

    origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(cfg.shape, cfg.spacing))
    return (
        Volume(ct, cfg.spacing, origin, (Channel.CT,)),
        Volume(pet, cfg.spacing, origin, (Channel.PET,)),
        Volume(labels.astype(np.float64), cfg.spacing, origin, (Channel.GENERIC,)),
    )


def case_seed(seed: int, index: int) -> int:
    return seeding.derive_seed(seed, seeding.CASE, index)


def generate_cases(n: int, seed: int, cfg: PhantomConfig | None = None):
    """In-memory corpus: list of ``(ct, pet, labels)`` triples."""
    return [generate_phantom(cfg, case_seed(seed, i)) for i in range(n)]


def generate_corpus(n: int, seed: int, out_dir, cfg: PhantomConfig | None = None) -> dict:
    """Write ``n`` phantoms as NIfTI triples plus ``corpus.json``; return the manifest."""
    if n < 1:
        raise BadConfig("corpus size must be >= 1")
    cfg = cfg or PhantomConfig()
    os.makedirs(out_dir, exist_ok=True)
    cases = []
    for i in range(n):
        s = case_seed(seed, i)
        ct, pet, lab = generate_phantom(cfg, s)
        names = {k: f"{k}_{i:04d}.nii" for k in ("ct", "pet", "label")}
        for key, vol in zip(("ct", "pet", "label"), (ct, pet, lab)):
            write_nifti(vol, os.path.join(out_dir, names[key]))
        mask = lab.data[0] > 0
        body = ct.data[0] > -500
        cases.append(
            {
                "id": f"case_{i:04d}",
                "seed": s,
                **names,
                "lesion_voxels": int(mask.sum()),
                "lesion_mean_pet": float(pet.data[0][mask].mean()) if mask.any() else 0.0,
                "background_mean_pet": float(pet.data[0][body & ~mask].mean()),
            }
        )
    manifest = {"format": "petmae-corpus/1", "seed": int(seed), "n": n, "config": cfg.to_dict(), "cases": cases}
    atomic_write_bytes(os.path.join(out_dir, "corpus.json"), json.dumps(manifest, indent=2).encode())
    return manifest
