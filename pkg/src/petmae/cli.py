"""Command-line entry point: ``petmae <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 for data errors.
Every command writes the resolved configuration as JSON next to its outputs.
Spatial triples on the command line are (x, y, z), matching NIfTI pixdim
order; internally everything is (z, y, x).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import seeding
from .autonet import Fusion, UNetConfig
from .errors import PetMaeError
from .harmonize import harmonize_corpus, load_harmonized
from .infer import DEFAULT_OVERLAP, sliding_infer
from .masking import expand_mask, impute_zero, make_grid, sample_mask
from .metrics import score
from .nifti_io import atomic_write_bytes, read_nifti, write_nifti
from .phantom import PhantomConfig, generate_corpus
from .trainer import (
    Objective,
    TrainConfig,
    finetune,
    linear_probe,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    split_train_val,
)
from .volume import Volume, pad_to_shape


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _zyx(xyz):
    return tuple(reversed([v for v in xyz]))


def _write_config(path, command: str, config: dict) -> None:
    blob = json.dumps({"command": command, **config}, indent=2, sort_keys=True).encode()
    atomic_write_bytes(path, blob)


# ------------------------------------------------------------------ commands


def cmd_phantom(args) -> dict:
    cfg = PhantomConfig(shape=_zyx(args.shape), spacing=_zyx(args.spacing), rho=args.rho)
    generate_corpus(args.n, args.seed, args.out, cfg)
    return {"n": args.n, "seed": args.seed, "out": args.out, "phantom": cfg.to_dict()}


def cmd_harmonize(args) -> dict:
    spacing = _zyx(args.spacing)
    harmonize_corpus(args.input, args.out, spacing=spacing, register=args.register,
                     threshold_hu=args.threshold_hu, margin=args.margin)
    return {"input": args.input, "out": args.out, "spacing_xyz": list(args.spacing),
            "register": args.register, "threshold_hu": args.threshold_hu, "margin": args.margin}


def _train_config(args, objective: Objective, **extra) -> TrainConfig:
    model = UNetConfig(levels=args.levels, base_features=args.features, fusion=Fusion(args.fusion), seed=args.seed)
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr0=args.lr,
        lr_min=args.lr_min,
        crop_shape=_zyx(args.crop),
        patch_shape=_zyx(args.patch),
        seed=args.seed,
        objective=objective,
        model=model,
        max_steps=args.max_steps,
        **extra,
    )


def cmd_pretrain(args) -> dict:
    images, _, _ = load_harmonized(args.corpus)
    cfg = _train_config(args, Objective.MAE, mask_ratio=args.mask_ratio, lam=args.lam, save_every=args.save_every)
    ckpt, rows = pretrain(images, cfg, save_dir=args.out)
    return {"corpus": args.corpus, "out": args.out, "train": cfg.to_dict(),
            "final_loss": rows[-1].loss if rows else None}


def _downstream_data(args):
    images, labels, _ = load_harmonized(args.corpus)
    if any(lab is None for lab in labels):
        raise PetMaeError("every case needs a label volume for supervised training")
    train_ids, val_ids = split_train_val(len(images), args.seed)
    init = load_checkpoint(args.init) if args.init else None
    return [images[i] for i in train_ids], [labels[i] for i in train_ids], train_ids, val_ids, init


def cmd_finetune(args) -> dict:
    images, labels, train_ids, val_ids, init = _downstream_data(args)
    cfg = _train_config(args, Objective.DICE_CE)
    ckpt, _ = finetune(images, labels, cfg, init=init, fraction=args.fraction, save_dir=args.out)
    used = [train_ids[i] for i in ckpt.meta["training_cases"]]
    return {"corpus": args.corpus, "out": args.out, "init": args.init, "fraction": args.fraction,
            "train": cfg.to_dict(), "training_cases": used, "validation_cases": val_ids}


def cmd_probe(args) -> dict:
    images, labels, train_ids, val_ids, init = _downstream_data(args)
    cfg = _train_config(args, Objective.DICE_CE)
    ckpt, _ = linear_probe(images, labels, cfg, init=init, k=args.k, save_dir=args.out)
    used = [train_ids[i] for i in ckpt.meta["training_cases"]]
    return {"corpus": args.corpus, "out": args.out, "init": args.init, "k": args.k,
            "train": cfg.to_dict(), "training_cases": used, "validation_cases": val_ids}


def _window(ckpt, args):
    if args.window:
        return _zyx(args.window)
    return tuple(ckpt.meta["config"]["crop_shape"])


def cmd_infer(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    window = _window(ckpt, args)
    segmenting = ckpt.meta.get("objective") == Objective.DICE_CE.value
    images, _, manifest = load_harmonized(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for case, image in zip(manifest["cases"], images):
        out = sliding_infer(model, image, window, args.overlap)
        if segmenting:
            mask = (out.data[1] > out.data[0]).astype(np.float64)[None]
            name = f"pred_{case['id']}.nii"
            write_nifti(Volume(mask, image.spacing, image.origin), os.path.join(args.out, name))
            outputs.append(name)
        else:
            for c, tag in enumerate(("ct", "pet")):
                name = f"recon_{tag}_{case['id']}.nii"
                write_nifti(out.channel(c), os.path.join(args.out, name))
                outputs.append(name)
    return {"checkpoint": args.checkpoint, "corpus": args.corpus, "out": args.out,
            "window_zyx": list(window), "overlap": args.overlap,
            "mode": "segment" if segmenting else "reconstruct", "outputs": outputs}


def cmd_eval(args) -> dict:
    _, labels, manifest = load_harmonized(args.corpus)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "dice", "hd95_mm", "n_pred", "n_ref"])
    wanted = set(args.cases) if args.cases else None
    for case, ref in zip(manifest["cases"], labels):
        if ref is None or (wanted is not None and case["id"] not in wanted):
            continue
        pred = read_nifti(os.path.join(args.pred, f"pred_{case['id']}.nii"))
        s = score(pred.data[0] > 0.5, ref.data[0] > 0.5, ref.spacing)
        writer.writerow([case["id"], repr(s.dice), repr(s.hd95_mm), s.n_pred, s.n_ref])
    atomic_write_bytes(args.out, buf.getvalue().encode())
    return {"pred": args.pred, "corpus": args.corpus, "out": args.out, "cases": args.cases}


def _pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes()


def _to_gray(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    return np.clip(np.floor(scaled * 255.0 + 0.5), 0, 255)


def cmd_recon_demo(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    train = ckpt.meta["config"]
    crop = tuple(train["crop_shape"])
    images, _, manifest = load_harmonized(args.corpus)
    if not 0 <= args.case < len(images):
        raise PetMaeError(f"case index {args.case} outside corpus of {len(images)}")
    image = pad_to_shape(images[args.case], crop)
    # Centre crop, so the demo is a pure function of the checkpoint and case.
    start = [(n - c) // 2 for n, c in zip(image.shape, crop)]
    x = image.data[(slice(None),) + tuple(slice(s, s + c) for s, c in zip(start, crop))]
    grid = make_grid(crop, tuple(train["patch_shape"]))
    mask = expand_mask(sample_mask(grid, args.mask_ratio, args.seed), grid)
    masked = impute_zero(x, mask)
    rec = model(masked[None]).value[0]
    os.makedirs(args.out, exist_ok=True)
    z = crop[0] // 2 if args.slice is None else args.slice
    written = []
    for c, tag in enumerate(("ct", "pet")):
        lo, hi = float(x[c].min()), float(x[c].max())
        panels = [_to_gray(v[c, z], lo, hi) for v in (masked, rec, x)]
        gap = np.full((crop[1], 2), 255.0)
        row = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
        name = f"{tag}_case{args.case:04d}_z{z:03d}.pgm"
        atomic_write_bytes(os.path.join(args.out, name), _pgm(row))
        written.append(name)
    masked_mse = float(((rec - x) ** 2 * mask).sum() / max(mask.sum(), 1.0))
    return {"checkpoint": args.checkpoint, "corpus": args.corpus, "case": manifest["cases"][args.case]["id"],
            "out": args.out, "mask_ratio": args.mask_ratio, "mask_seed": args.seed, "slice_z": z,
            "panels": ["masked", "reconstruction", "original"], "files": written, "masked_mse": masked_mse}


# -------------------------------------------------------------------- parser


def _triple(p, flag, default, help_text, kind=float):
    p.add_argument(flag, nargs=3, type=kind, default=list(default), metavar=("X", "Y", "Z"), help=help_text)


def _train_args(p, epochs, lr):
    p.add_argument("--corpus", required=True, help="harmonized corpus directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and curves")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=lr, help="initial learning rate (cosine annealed)")
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    _triple(p, "--crop", (32, 32, 24), "training crop in voxels", int)
    _triple(p, "--patch", (8, 8, 6), "mask patch in voxels", int)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--fusion", choices=[f.value for f in Fusion], default=Fusion.EARLY_CONCAT.value)


def build_parser(default_seed: int) -> argparse.ArgumentParser:
    parser = _Parser(prog="petmae", description="PET/CT masked-autoencoder pipeline")
    parser.add_argument("--threads", type=int, default=None, help="cap worker threads of the numeric backend")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("phantom", help="generate a synthetic PET/CT corpus")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--rho", type=float, default=0.8, help="share of PET structure derived from CT anatomy")
    _triple(p, "--shape", (64, 64, 48), "volume size in voxels", int)
    _triple(p, "--spacing", (2.0, 2.0, 3.0), "voxel spacing in mm")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("harmonize", help="crop, resample, normalize and pair CT/PET")
    p.add_argument("--in", dest="input", required=True, help="raw corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--register", action="store_true", help="rigidly register PET to CT first")
    _triple(p, "--spacing", (2.0, 2.0, 3.0), "target spacing in mm")
    p.add_argument("--threshold-hu", type=float, default=-900.0)
    p.add_argument("--margin", type=int, default=2)
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    _train_args(p, epochs=200, lr=1e-4)
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.2, help="weight of the visible-voxel term")
    p.add_argument("--save-every", type=int, default=None, help="also checkpoint every N epochs")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised segmentation fine-tuning")
    _train_args(p, epochs=100, lr=1e-4)
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--init", default=None, help="pretrained checkpoint directory (default: scratch)")
    p.add_argument("--fraction", type=float, default=1.0, help="share of the training split to use, e.g. 0.1")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("probe", help="few-shot linear probe of the final projection")
    _train_args(p, epochs=100, lr=1e-3)
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--init", default=None)
    p.add_argument("--k", type=int, default=5, help="number of labelled cases")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("infer", help="sliding-window inference over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=float, default=DEFAULT_OVERLAP)
    p.add_argument("--window", nargs=3, type=int, default=None, metavar=("X", "Y", "Z"),
                   help="window in voxels (default: training crop)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice / HD95 of predicted masks against labels")
    p.add_argument("--pred", required=True, help="directory with pred_<case>.nii files")
    p.add_argument("--corpus", required=True, help="harmonized corpus with labels")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--cases", nargs="*", default=None, help="restrict to these case ids")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("recon-demo", help="write masked / reconstructed / original slice images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--case", type=int, default=0, help="case index in the corpus")
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=default_seed, help="mask seed")
    p.add_argument("--slice", type=int, default=None, help="axial slice within the crop")
    p.set_defaults(func=cmd_recon_demo)
    return parser


def _config_path(args) -> str:
    if args.command == "eval":
        return f"{args.out}.config.json"
    return os.path.join(args.out, "config.json")


def main(argv=None) -> int:
    parser = build_parser(seeding.default_seed())
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                config = args.func(args)
        else:
            config = args.func(args)
        config["threads"] = args.threads
        _write_config(_config_path(args), args.command, config)
    except (PetMaeError, OSError, ValueError, KeyError) as exc:
        print(f"petmae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, **config}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
