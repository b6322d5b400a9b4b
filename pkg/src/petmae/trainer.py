"""Training loops: masked-autoencoder pretraining, fine-tuning, linear probing.

All three share one loop: per epoch, a seeded permutation of the training
cases is cut into batches, one random crop is taken per case, the objective
is evaluated, and Adam updates every unfrozen parameter with a per-step
cosine learning rate.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import seeding
from .autonet import Tensor, UNet, UNetConfig, backward
from .errors import (
    BadConfig,
    BlobOutOfBounds,
    CorruptManifest,
    EmptyCorpus,
    LabelMismatch,
    ShapeMismatch,
    VersionMismatch,
)
from .losses import DEFAULT_LAMBDA, dice_ce_loss, recon_loss
from .masking import expand_mask, impute_zero, make_grid, sample_mask
from .volume import Volume, random_crop

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
# Weight scale of the freshly initialised downstream projection; a small start
# keeps the initial logits near zero so the frozen-body probe is well posed.
HEAD_INIT_STD = 0.01
FEATURE_CACHE_SIZE = 256


class Objective(str, enum.Enum):
    MAE = "mae"
    DICE_CE = "dice_ce"


class FreezeSpec(str, enum.Enum):
    NONE = "none"
    ALL_BUT_LAST_DECODER_LAYER = "all_but_last_decoder_layer"
    ALL = "all"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr0: float = 1e-4
    lr_min: float = 0.0
    mask_ratio: float = 0.5
    lam: float = DEFAULT_LAMBDA
    crop_shape: tuple[int, int, int] = (24, 32, 32)
    patch_shape: tuple[int, int, int] = (6, 8, 8)
    seed: int = seeding.DEFAULT_SEED
    freeze_spec: FreezeSpec = FreezeSpec.NONE
    objective: Objective = Objective.MAE
    model: UNetConfig = field(default_factory=UNetConfig)
    max_steps: int | None = None
    save_every: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "freeze_spec", FreezeSpec(self.freeze_spec))
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "crop_shape", tuple(int(c) for c in self.crop_shape))
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", UNetConfig(**self.model))
        if self.epochs < 0 or self.batch_size < 1 or self.lr0 <= 0 or self.lr_min < 0:
            raise BadConfig(f"invalid schedule settings in {self}")
        if not 0.0 <= self.mask_ratio <= 1.0 or self.lam < 0:
            raise BadConfig("mask_ratio must be in [0, 1] and lambda >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise BadConfig("max_steps must be >= 0")
        make_grid(self.crop_shape, self.patch_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_spec"] = self.freeze_spec.value
        d["objective"] = self.objective.value
        d["model"] = self.model.to_dict()
        d["crop_shape"] = list(self.crop_shape)
        d["patch_shape"] = list(self.patch_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = UNetConfig(**d["model"]) if isinstance(d.get("model"), dict) else d.get("model", UNetConfig())
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: AdamState = field(default_factory=AdamState)
    meta: dict = field(default_factory=dict)


@dataclass
class CurveRow:
    step: int
    epoch: int
    loss: float
    lr: float


# ------------------------------------------------------------------ schedule


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total < 1 or not 0 <= t <= total:
        raise ValueError(f"need 0 <= t <= T and T >= 1, got t={t}, T={total}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float, names=None) -> AdamState:
    """Bias-corrected Adam update of ``params`` in place for the given ``names``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name in names if names is not None else list(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g if m is not None else (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g if v is not None else (1.0 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


# ----------------------------------------------------------------- checkpoints


def _tensor_table(ckpt: Checkpoint):
    items = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    items += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.m.items()]
    items += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    return items


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``manifest.json`` + ``params.bin`` into directory ``path`` atomically."""
    path = os.fspath(path)
    blob = io.BytesIO()
    table = []
    for name, arr in _tensor_table(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": blob.tell(), "length": len(data)})
        blob.write(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "adam_step": ckpt.optimizer.step,
        "meta": ckpt.meta,
        "tensors": table,
    }
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".ckpt-", dir=parent)
    with open(os.path.join(tmp, BLOB_NAME), "wb") as fh:
        fh.write(blob.getvalue())
    with open(os.path.join(tmp, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1)
    if os.path.isdir(path):
        old = tempfile.mkdtemp(prefix=".ckpt-old-", dir=parent)
        os.rename(path, os.path.join(old, "x"))
        os.rename(tmp, path)
        shutil.rmtree(old)
    else:
        os.rename(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    try:
        with open(os.path.join(path, MANIFEST_NAME)) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptManifest(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CorruptManifest(f"{path}: manifest lacks format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {manifest['format_version']}, expected {FORMAT_VERSION}")
    with open(os.path.join(path, BLOB_NAME), "rb") as fh:
        blob = fh.read()
    ckpt = Checkpoint(params={}, optimizer=AdamState(step=int(manifest.get("adam_step", 0))), meta=manifest.get("meta", {}))
    seen = set()
    try:
        for entry in manifest["tensors"]:
            name, off, length = entry["name"], int(entry["offset"]), int(entry["length"])
            shape = tuple(int(s) for s in entry["shape"])
            if name in seen:
                raise CorruptManifest(f"duplicate tensor {name}")
            seen.add(name)
            if off < 0 or length < 0 or off + length > len(blob):
                raise BlobOutOfBounds(f"{name}: [{off}, {off + length}) outside blob of {len(blob)} bytes")
            if length != 8 * math.prod(shape):
                raise CorruptManifest(f"{name}: length {length} does not match shape {shape}")
            arr = np.frombuffer(blob, dtype="<f8", count=length // 8, offset=off).reshape(shape).astype(np.float64)
            kind, _, key = name.partition("/")
            target = {"param": ckpt.params, "adam.m": ckpt.optimizer.m, "adam.v": ckpt.optimizer.v}.get(kind)
            if target is None:
                raise CorruptManifest(f"unknown tensor kind in {name}")
            target[key] = arr
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CorruptManifest):
            raise
        raise CorruptManifest(f"{path}: malformed tensor table ({exc})") from exc
    return ckpt


def write_curve(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss", "lr"])
    for r in rows:
        w.writerow([r.step, r.epoch, repr(r.loss), repr(r.lr)])
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def model_from_checkpoint(ckpt: Checkpoint) -> UNet:
    cfg = UNetConfig(**ckpt.meta["model"])
    return UNet(cfg, ckpt.params)


# -------------------------------------------------------------------- loops


def _trainable(model: UNet, spec: FreezeSpec) -> list[str]:
    if spec is FreezeSpec.NONE:
        return list(model.params)
    if spec is FreezeSpec.ALL_BUT_LAST_DECODER_LAYER:
        return model.head_names()
    return []


def total_steps(cfg: TrainConfig, n_cases: int) -> int:
    steps = cfg.epochs * math.ceil(n_cases / cfg.batch_size)
    return steps if cfg.max_steps is None else min(steps, cfg.max_steps)


def _crop_batch(volumes, case_ids, cfg: TrainConfig, first_crop: int) -> list[np.ndarray]:
    out = []
    for j, i in enumerate(case_ids):
        crop_rng = seeding.rng(cfg.seed, seeding.CROP, first_crop + j)
        out.append(random_crop(volumes[i], cfg.crop_shape, crop_rng).data)
    return out


def _run(model, volumes, cfg: TrainConfig, step_loss, opt: AdamState, trainable, on_epoch=None):
    """Shared optimisation loop; ``step_loss(batch, first_crop)`` returns a loss node."""
    n = len(volumes)
    steps = total_steps(cfg, n)
    rows: list[CurveRow] = []
    frozen = [name for name in model.params if name not in set(trainable)]
    for name in frozen:
        model.params[name].requires_grad = False
    values = {name: t.value for name, t in model.params.items()}
    step = 0
    crop_index = 0
    try:
        for epoch in range(cfg.epochs):
            if step >= steps:
                break
            order = seeding.rng(cfg.seed, seeding.ORDER, epoch).permutation(n)
            for start in range(0, n, cfg.batch_size):
                if step >= steps:
                    break
                ids = order[start : start + cfg.batch_size]
                batch = _crop_batch(volumes, ids, cfg, crop_index)
                loss = step_loss(batch, crop_index)
                crop_index += len(ids)
                lr = cosine_lr(step, steps, cfg.lr0, cfg.lr_min)
                if trainable:
                    grads = backward(loss, {k: model.params[k] for k in trainable})
                    adam_step(values, grads, opt, lr, names=trainable)
                rows.append(CurveRow(step, epoch, float(loss.value), lr))
                step += 1
            if on_epoch is not None:
                on_epoch(epoch + 1, rows)
    finally:
        for name in frozen:
            model.params[name].requires_grad = True
    return rows


def mae_batch(batch: list[np.ndarray], cfg: TrainConfig, first_crop: int):
    """Stack crops and build their masks; returns ``(x, x_masked, M)``."""
    grid = make_grid(cfg.crop_shape, cfg.patch_shape)
    mask_base = seeding.derive_seed(cfg.seed, seeding.MASK)
    x = np.stack(batch)
    masks = np.stack(
        [expand_mask(sample_mask(grid, cfg.mask_ratio, mask_base + first_crop + j), grid) for j in range(len(batch))]
    )
    return x, impute_zero(x, masks), masks


def _checkpoint(model: UNet, opt: AdamState, cfg: TrainConfig, rows, **extra) -> Checkpoint:
    meta = {
        "config": cfg.to_dict(),
        "model": model.cfg.to_dict(),
        "epoch": rows[-1].epoch + 1 if rows else 0,
        "steps": len(rows),
        "loss_history": [r.loss for r in rows],
        **extra,
    }
    opt_copy = AdamState({k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()}, opt.step)
    return Checkpoint(model.state(), opt_copy, meta)


def pretrain(corpus: list[Volume], cfg: TrainConfig, save_dir=None, init: Checkpoint | None = None):
    """Masked-autoencoder pretraining; returns ``(checkpoint, curve_rows)``."""
    if not corpus:
        raise EmptyCorpus("pretraining corpus is empty")
    if cfg.objective is not Objective.MAE:
        raise BadConfig("pretrain requires objective MAE")
    for v in corpus:
        if v.channels != cfg.model.in_channels:
            raise BadConfig(f"corpus volume has {v.channels} channels, model expects {cfg.model.in_channels}")
    model = UNet(cfg.model, init.params if init is not None else None)
    opt = AdamState()

    def step_loss(batch, first_crop):
        x, xm, m = mae_batch(batch, cfg, first_crop)
        return recon_loss(model(xm), x, m, cfg.lam).node

    def on_epoch(epoch, rows):
        if save_dir and cfg.save_every and epoch % cfg.save_every == 0:
            save_checkpoint(_checkpoint(model, opt, cfg, rows), os.path.join(save_dir, f"epoch_{epoch:04d}"))

    rows = _run(model, corpus, cfg, step_loss, opt, _trainable(model, cfg.freeze_spec), on_epoch)
    ckpt = _checkpoint(model, opt, cfg, rows, objective=Objective.MAE.value)
    if save_dir:
        save_checkpoint(ckpt, os.path.join(save_dir, "final"))
        write_curve(rows, os.path.join(save_dir, "loss_curve.csv"))
    return ckpt, rows


def shuffled_order(n: int, seed: int) -> np.ndarray:
    return seeding.rng(seed, seeding.SUBSET).permutation(n)


def split_train_val(n: int, seed: int, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Fixed split of ``range(n)`` by a seeded shuffle; the tail goes to validation."""
    order = seeding.rng(seed, seeding.SPLIT).permutation(n)
    n_val = int(math.floor(val_fraction * n + 0.5))
    return sorted(int(i) for i in order[: n - n_val]), sorted(int(i) for i in order[n - n_val :])


def _check_labels(corpus, labels):
    if not corpus:
        raise EmptyCorpus("fine-tuning corpus is empty")
    if len(labels) != len(corpus):
        raise LabelMismatch(f"{len(labels)} label volumes for {len(corpus)} images")
    for v, lab in zip(corpus, labels):
        if lab.shape != v.shape or lab.channels != 1:
            raise LabelMismatch(f"label {lab.shape}x{lab.channels} not aligned with image {v.shape}")
        if not np.isin(lab.data, (0.0, 1.0)).all():
            raise LabelMismatch("labels must be binary")


def _downstream(corpus, labels, cfg: TrainConfig, init: Checkpoint | None, n_train: int, save_dir=None):
    _check_labels(corpus, labels)
    if cfg.objective is not Objective.DICE_CE:
        raise BadConfig("fine-tuning requires objective DICE_CE")
    if init is not None:
        model_cfg = UNetConfig(**init.meta["model"]) if "model" in init.meta else cfg.model
        model = UNet(model_cfg, init.params)
    else:
        model = UNet(cfg.model)
    model.reset_head(seeding.derive_seed(cfg.seed, seeding.HEAD), out_channels=2, std=HEAD_INIT_STD)
    order = shuffled_order(len(corpus), cfg.seed)
    cases = [int(i) for i in order[:n_train]]
    # Labels ride along as a third channel so image and label crops coincide.
    joined = [
        Volume(np.concatenate([corpus[i].data, labels[i].data]), corpus[i].spacing, corpus[i].origin)
        for i in cases
    ]
    n_img = corpus[0].channels
    opt = AdamState()
    head_only = set(_trainable(model, cfg.freeze_spec)) <= set(model.head_names())
    cache: dict[bytes, np.ndarray] = {}

    def body(crop: np.ndarray) -> np.ndarray:
        # The frozen body is a fixed function, so features of a repeated crop
        # are looked up instead of recomputed.
        key = hashlib.sha1(crop.tobytes()).digest()
        if key in cache:
            return cache[key]
        feats = model.features(crop[None]).value[0]
        if len(cache) < FEATURE_CACHE_SIZE:
            cache[key] = feats
        return feats

    def step_loss(batch, first_crop):
        x = np.stack(batch)
        if head_only:
            feats = Tensor(np.stack([body(b[:n_img]) for b in batch]))
            logits = model.project(feats)
        else:
            logits = model(x[:, :n_img])
        return dice_ce_loss(logits, x[:, n_img] > 0.5)

    run_cfg = replace(cfg, model=model.cfg)
    rows = _run(model, joined, run_cfg, step_loss, opt, _trainable(model, cfg.freeze_spec))
    ckpt = _checkpoint(
        model,
        opt,
        run_cfg,
        rows,
        objective=Objective.DICE_CE.value,
        training_cases=cases,
        n_training_cases=len(cases),
        init="checkpoint" if init is not None else "scratch",
    )
    if save_dir:
        save_checkpoint(ckpt, os.path.join(save_dir, "final"))
        write_curve(rows, os.path.join(save_dir, "loss_curve.csv"))
    return ckpt, rows


def finetune(corpus, labels, cfg: TrainConfig, init: Checkpoint | None = None, fraction: float = 1.0, save_dir=None):
    """Supervised DiceCE training on the first ``round(fraction * N)`` shuffled cases."""
    if not 0.0 < fraction <= 1.0:
        raise BadConfig(f"fraction {fraction} outside (0, 1]")
    n_train = max(1, int(math.floor(fraction * len(corpus) + 0.5)))
    return _downstream(corpus, labels, cfg, init, n_train, save_dir)


def linear_probe(corpus, labels, cfg: TrainConfig, init: Checkpoint | None = None, k: int = 5, save_dir=None):
    """Train only the final 1x1x1 projection on ``k`` labelled cases."""
    if k < 1 or k > len(corpus):
        raise BadConfig(f"K={k} must be in [1, {len(corpus)}]")
    cfg = replace(cfg, freeze_spec=FreezeSpec.ALL_BUT_LAST_DECODER_LAYER)
    return _downstream(corpus, labels, cfg, init, k, save_dir)
