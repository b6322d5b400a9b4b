"""Rigid PET-to-CT registration by mutual-information coordinate descent."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstantImage
from .volume import Volume, trilinear_sample

DEFAULT_SCHEDULE = ((4.0, 0.04), (1.0, 0.01), (0.25, 0.0025))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (rx, ry, rz) radians applied as Rz @ Ry @ Rx about the reference
    centre, followed by a translation (tz, ty, tx) in mm."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", tuple(float(r) for r in self.rotation))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        values = self.rotation + self.translation
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite transform {values}")

    def matrix_zyx(self) -> np.ndarray:
        """3x3 rotation acting on (z, y, x) coordinate vectors."""
        rx, ry, rz = self.rotation
        cx, sx, cy, sy, cz, sz = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry), math.cos(rz), math.sin(rz)
        rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        r_xyz = rot_z @ rot_y @ rot_x
        perm = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]])  # xyz <-> zyx
        return perm @ r_xyz @ perm

    def params(self) -> np.ndarray:
        return np.array(self.translation + self.rotation)

    @classmethod
    def from_params(cls, p) -> "RigidTransform":
        return cls(rotation=tuple(p[3:6]), translation=tuple(p[0:3]))

    def inverse(self) -> "RigidTransform":
        r_zyx = self.matrix_zyx()
        perm = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]])
        rt = perm @ r_zyx.T @ perm  # inverse rotation in xyz form
        ry = -math.asin(max(-1.0, min(1.0, rt[2, 0])))
        rx = math.atan2(rt[2, 1], rt[2, 2])
        rz = math.atan2(rt[1, 0], rt[0, 0])
        t = -(r_zyx.T @ np.array(self.translation))
        return RigidTransform((rx, ry, rz), tuple(t))


@dataclass(frozen=True)
class MiConfig:
    bins: int = 32
    max_iters: int = 50
    step_schedule: tuple = field(default=DEFAULT_SCHEDULE)

    def __post_init__(self):
        if self.bins < 2 or self.max_iters < 1:
            raise ValueError("bins must be >= 2 and max_iters >= 1")
        steps = [tuple(float(v) for v in s) for s in self.step_schedule]
        if not steps or any(t <= 0 or r <= 0 for t, r in steps):
            raise ValueError("steps must be positive")
        for (t0, r0), (t1, r1) in zip(steps, steps[1:]):
            if t1 >= t0 or r1 >= r0:
                raise ValueError("step schedule must decrease coarse to fine")
        object.__setattr__(self, "step_schedule", tuple(steps))


def _bin(a: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    idx = np.floor((a - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _mi_arrays(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    a = a.ravel()
    b = b.ravel()
    if a.max() == a.min() or b.max() == b.min():
        return 0.0
    joint = np.bincount(_bin(a, bins) * bins + _bin(b, bins), minlength=bins * bins).reshape(bins, bins)
    p = joint / a.size
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(pa, pb)
    return float(max(0.0, (p[nz] * np.log(p[nz] / outer[nz])).sum()))


def mutual_information(fixed: Volume, moving: Volume, bins: int = 32) -> float:
    """MI in nats over a hard-binned joint histogram of min-max scaled intensities.

    A constant image has no information; the result is 0 in that case.
    """
    if fixed.shape != moving.shape:
        raise ValueError(f"MI needs aligned grids: {fixed.shape} vs {moving.shape}")
    return _mi_arrays(fixed.data[0], moving.data[0], bins)


def entropy(v: Volume, bins: int = 32) -> float:
    a = v.data[0].ravel()
    p = np.bincount(_bin(a, bins), minlength=bins) / a.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _centre(v: Volume) -> np.ndarray:
    return np.array(v.origin) + (np.array(v.shape) - 1) / 2.0 * np.array(v.spacing)


def apply_rigid(moving: Volume, t: RigidTransform, reference: Volume) -> Volume:
    """Resample ``moving`` onto the ``reference`` grid through the inverse of ``t``.

    ``t`` maps moving-space points to reference space:
    ``p = R (q - c) + c + translation`` with ``c`` the reference centre.
    """
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in reference.shape], indexing="ij")
    pts = np.stack([o + g * s for g, o, s in zip(grids, reference.origin, reference.spacing)])
    c = _centre(reference)
    r = t.matrix_zyx()
    rel = pts.reshape(3, -1) - (c + np.array(t.translation))[:, None]
    q = r.T @ rel + c[:, None]
    idx = (q - np.array(moving.origin)[:, None]) / np.array(moving.spacing)[:, None]
    data = trilinear_sample(moving.data.astype(np.float64, copy=False), idx.reshape((3,) + reference.shape))
    return Volume(data, reference.spacing, reference.origin, moving.channel_labels)


@dataclass
class RegistrationResult:
    transform: RigidTransform
    mi_initial: float
    mi_final: float
    evaluations: int


def rigid_register(fixed: Volume, moving: Volume, cfg: MiConfig | None = None) -> RigidTransform:
    """Best rigid transform taking ``moving`` (PET) onto ``fixed`` (CT)."""
    return register_report(fixed, moving, cfg).transform


def register_report(fixed: Volume, moving: Volume, cfg: MiConfig | None = None) -> RegistrationResult:
    """Coordinate descent over (tz, ty, tx, rx, ry, rz), coarse to fine.

    Each sweep tries +step and -step on every parameter and keeps a move only
    if MI strictly increases; a level ends when a sweep changes nothing or
    after ``max_iters`` sweeps.
    """
    cfg = cfg or MiConfig()
    for v, name in ((fixed, "fixed"), (moving, "moving")):
        if v.data.max() == v.data.min():
            raise ConstantImage(f"{name} image has zero intensity range")
    target = fixed.data[0]

    def score(p):
        warped = apply_rigid(moving, RigidTransform.from_params(p), fixed)
        return _mi_arrays(target, warped.data[0], cfg.bins)

    best = np.zeros(6)
    best_mi = score(best)
    mi0 = best_mi
    evals = 1
    for t_step, r_step in cfg.step_schedule:
        steps = np.array([t_step] * 3 + [r_step] * 3)
        for _ in range(cfg.max_iters):
            improved = False
            for k in range(6):
                for sign in (1.0, -1.0):
                    trial = best.copy()
                    trial[k] += sign * steps[k]
                    if abs(trial[k]) > math.pi and k >= 3:
                        continue
                    mi = score(trial)
                    evals += 1
                    if mi > best_mi:
                        best, best_mi, improved = trial, mi, True
                        break
            if not improved:
                break
    return RegistrationResult(RigidTransform.from_params(best), mi0, best_mi, evals)
