"""Command-line entry points: pretext-train, finetune, evaluate, augment-preview,
ablate-lambda and make-synthetic."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import data as dat
from .frequency import (
    FrequencyFilterSpec,
    amplitude_phase,
    apply_frequency_filter,
    build_filter_mask,
    forward_dft,
    sample_crop_rect,
)
from .jigsaw import (
    GRID_SIZE,
    PatchBundle,
    assemble,
    partition_grid,
    select_focal_sets,
    transform_crosspatch,
    transform_jigsaw_baseline,
)
from .metrics import evaluate_model, render_overlay
from .training import (
    FinetuneConfig,
    PretextConfig,
    desk_finetune_config,
    desk_pretext_config,
    finetune_segmentation,
    load_checkpoint,
    pretext_train,
    rng_stream,
    save_segmentation_model,
    load_segmentation_model,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
OUTPUT_ENV = "SSLUS_OUTPUT_DIR"

ABLATION_LAMBDAS = (0.1, 0.25, 0.5, 0.75)
PREVIEW_FILTERS = (
    FrequencyFilterSpec(20.0, 30.0, 2.0, x_enabled=True),
    FrequencyFilterSpec(15.0, 40.0, 5.0, x_enabled=True),
    FrequencyFilterSpec(12.0, 50.0, 8.0, x_enabled=True),
)


class UsageError(Exception):
    """Bad flags, config files or output-directory state; exits with code 2."""


def _resolve_out(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ENV)
    if not root:
        raise UsageError(f"--out is required (or set {OUTPUT_ENV})")
    return Path(root) / command


def _check_clobber(out: Path, names: list[str], overwrite: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not overwrite:
        raise UsageError(
            f"refusing to overwrite existing outputs in {out}: {existing} "
            f"(pass --overwrite)"
        )


def _load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must contain a JSON object")
    return cfg


def _merge_config(cls, profile_base: dict, file_values: dict, flag_values: dict):
    """profile defaults < config file < explicit flags; unknown keys are usage errors."""
    allowed = {f.name for f in fields(cls)}
    unknown = set(file_values) - allowed
    if unknown:
        raise UsageError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    merged = dict(profile_base)
    merged.update(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}")


def _snapshot_config(cfg, out: Path, name: str) -> None:
    with open(out / name, "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _pretext_profile_base(profile: str) -> dict:
    if profile == "desk":
        return asdict(desk_pretext_config())
    return asdict(PretextConfig())


def _finetune_profile_base(profile: str) -> dict:
    if profile == "desk":
        return asdict(desk_finetune_config())
    return asdict(FinetuneConfig())


def _load_split(manifest, split: str, size: int, require_masks: bool = False):
    samples = dat.load_samples(manifest, split, size=(size, size), require_masks=require_masks)
    if not samples:
        raise UsageError(f"manifest has no {split!r} entries")
    return samples


def cmd_make_synthetic(args) -> int:
    out = _resolve_out(args, "make-synthetic")
    _check_clobber(out, ["manifest.csv"], args.overwrite)
    try:
        train_frac, val_frac = (float(x) for x in args.splits.split(","))
    except ValueError:
        raise UsageError(f"--splits must be 'train,val' fractions, got {args.splits!r}")
    if train_frac + val_frac >= 1.0:
        raise UsageError("train and val fractions must sum to < 1 to leave a test split")
    manifest_path = dat.write_synthetic_dataset(
        out, args.n, (args.size, args.size), args.seed, (train_frac, val_frac)
    )
    print(f"wrote {args.n} synthetic samples; manifest: {manifest_path}")
    return EXIT_OK


def cmd_pretext_train(args) -> int:
    out = _resolve_out(args, "pretext-train")
    file_values = _load_config_file(args.config) if args.config else {}
    flag_values = dict(
        method=args.method,
        pretext_task=args.task,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        lambda_weight=args.lambda_weight,
        negatives_per_anchor=args.negatives,
        seed=args.seed,
        literal_focal_flips=True if args.literal_focal_flips else None,
    )
    cfg = _merge_config(PretextConfig, _pretext_profile_base(args.profile), file_values, flag_values)
    _check_clobber(out, ["checkpoint.pt", "pretext_losses.csv", "pretext_config.json"], args.overwrite)

    manifest = dat.load_manifest(args.manifest)
    train = _load_split(manifest, "train", cfg.image_size)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out, "pretext_config.json")
    state = pretext_train(train, cfg, out_dir=out, resume_from=args.resume)
    final = state.loss_rows[-1].combined if state.loss_rows else float("nan")
    print(
        f"pretext training done: {cfg.epochs} epochs on {len(train)} images, "
        f"final combined loss {final:.6f}; checkpoint: {out / 'checkpoint.pt'}"
    )
    return EXIT_OK


def _write_val_curve(history, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "val_dsc"])
        for i, v in enumerate(history, start=1):
            writer.writerow([i, repr(float(v))])


def cmd_finetune(args) -> int:
    out = _resolve_out(args, "finetune")
    file_values = _load_config_file(args.config) if args.config else {}
    flag_values = dict(
        epochs=args.epochs,
        batch_size=args.batch_size,
        train_fraction=args.fraction,
        seed=args.seed,
    )
    cfg = _merge_config(FinetuneConfig, _finetune_profile_base(args.profile), file_values, flag_values)
    _check_clobber(out, ["model.pt", "val_curve.csv", "finetune_config.json"], args.overwrite)

    manifest = dat.load_manifest(args.manifest)
    n_train_full = len(manifest.split_entries("train"))
    manifest = dat.take_train_subset(manifest, dat.SubsetSpec(cfg.train_fraction, cfg.seed))
    train = _load_split(manifest, "train", cfg.image_size, require_masks=True)
    val = _load_split(manifest, "val", cfg.image_size, require_masks=True)
    print(
        f"fine-tuning on {len(train)}/{n_train_full} train entries "
        f"(fraction={cfg.train_fraction}), validating on {len(val)}"
    )

    init = None
    if args.init:
        if not os.path.exists(args.init):
            raise UsageError(f"checkpoint not found: {args.init}")
        init = load_checkpoint(args.init)
    else:
        print("no --init checkpoint: training the supervised baseline from scratch")

    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(cfg, out, "finetune_config.json")
    result = finetune_segmentation(train, val, cfg, init=init)
    save_segmentation_model(result, out / "model.pt")
    _write_val_curve(result.history, out / "val_curve.csv")
    print(
        f"fine-tuning done: best val DSC {result.best_val_dsc:.4f} at epoch "
        f"{result.best_epoch}/{len(result.history)}; model: {out / 'model.pt'}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _resolve_out(args, "evaluate")
    _check_clobber(out, ["metrics.csv"], args.overwrite)
    if not os.path.exists(args.model):
        raise UsageError(f"model file not found: {args.model}")
    model, payload = load_segmentation_model(args.model)
    cfg = FinetuneConfig(**json.loads(payload["config_json"]))
    manifest = dat.load_manifest(args.manifest)
    test = _load_split(manifest, args.split, cfg.image_size, require_masks=True)

    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(model, test, batch_size=cfg.batch_size)
    report.write_csv(out / "metrics.csv")
    if args.overlays:
        overlay_dir = out / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        from .training import batched, to_image_tensor

        i = 0
        for chunk in batched(test, cfg.batch_size):
            preds = model.predict_masks(to_image_tensor([s.image for s in chunk])).numpy()
            for pred, s in zip(preds, chunk):
                name = f"{i:04d}_{Path(s.id).stem}.png"
                dat.save_image(render_overlay(s.image, pred, s.mask) / 255.0, overlay_dir / name)
                i += 1
    mean = report.mean
    print(
        f"evaluated {len(report.per_image)} images: "
        + ", ".join(f"{k}={mean[k]:.4f}" for k in ("dsc", "jc", "hd", "ppv", "rec"))
    )
    print(f"report: {out / 'metrics.csv'}")
    return EXIT_OK


def _parse_filter_flag(text: str) -> FrequencyFilterSpec:
    values = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"bad --filter component {part!r}; expected inner=..,outer=..,x=..")
        key, _, val = part.partition("=")
        try:
            values[key.strip()] = float(val)
        except ValueError:
            raise UsageError(f"bad --filter value in {part!r}")
    unknown = set(values) - {"inner", "outer", "x"}
    if unknown:
        raise UsageError(f"unknown --filter keys: {sorted(unknown)}")
    if "inner" not in values or "outer" not in values:
        raise UsageError("--filter requires at least inner=.. and outer=..")
    x = values.get("x", 0.0)
    try:
        return FrequencyFilterSpec(
            band_inner_radius=values["inner"],
            band_outer_radius=values["outer"],
            x_thickness=x,
            x_enabled=x > 0,
        )
    except ValueError as exc:
        raise UsageError(f"invalid filter spec: {exc}")


def _log_amplitude_image(spectrum: np.ndarray) -> np.ndarray:
    amp, _ = amplitude_phase(spectrum)
    disp = np.log1p(amp)
    peak = disp.max()
    return disp / peak if peak > 0 else disp


def cmd_augment_preview(args) -> int:
    out = _resolve_out(args, "augment-preview")
    _check_clobber(out, ["frequency", "jigsaw"], args.overwrite)
    if not os.path.exists(args.image):
        print(f"error: image not found: {args.image}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        img = dat.load_image(args.image)
    except Exception as exc:
        print(f"error: could not read image {args.image}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    specs = [_parse_filter_flag(f) for f in args.filter] if args.filter else list(PREVIEW_FILTERS)
    rng = rng_stream(args.seed, "preview", os.path.basename(args.image))
    rect = sample_crop_rect(img.shape[:2], rng)
    top, left, ch, cw = rect

    freq_dir = out / "frequency"
    freq_dir.mkdir(parents=True, exist_ok=True)
    crop = img[top : top + ch, left : left + cw]
    dat.save_image(crop, freq_dir / "original.png")
    for i, spec in enumerate(specs, start=1):
        filtered = apply_frequency_filter(img, spec, rect)
        fcrop = filtered[top : top + ch, left : left + cw]
        dat.save_image(fcrop, freq_dir / f"filtered_{i}.png")
        masked = forward_dft(fcrop[:, :, 0].astype(np.float64))
        dat.save_image(
            np.repeat(_log_amplitude_image(masked)[:, :, None], 3, axis=2),
            freq_dir / f"spectrum_{i}.png",
        )

    jig_dir = out / "jigsaw"
    jig_dir.mkdir(parents=True, exist_ok=True)
    crop_sq = dat.resize_image(crop, (args.crop_size, args.crop_size))
    bundle = partition_grid(crop_sq)
    dat.save_image(_draw_grid(assemble(bundle), None, None), jig_dir / "grid.png")
    if args.task == "crosspatch":
        layout = select_focal_sets(rng)
        transformed = transform_crosspatch(bundle, layout, rng)
        dat.save_image(
            _draw_grid(assemble(bundle), layout.focal, layout.anchor), jig_dir / "focal.png"
        )
        dat.save_image(
            _draw_grid(assemble(transformed), layout.focal, None), jig_dir / "transformed.png"
        )
    else:
        transformed = transform_jigsaw_baseline(bundle, rng)
        dat.save_image(_draw_grid(assemble(bundle), None, None), jig_dir / "focal.png")
        dat.save_image(_draw_grid(assemble(transformed), None, None), jig_dir / "transformed.png")
    print(f"wrote previews under {out} (filters: {len(specs)})")
    return EXIT_OK


def _draw_grid(image: np.ndarray, focal, anchor) -> np.ndarray:
    """Crop with 6x6 cell borders; focal cells outlined blue, others red,
    the anchor cell filled blue."""
    out = image.copy()
    h = out.shape[0]
    t = h // GRID_SIZE
    red, blue = np.array([0.85, 0.1, 0.1]), np.array([0.1, 0.2, 0.9])
    for i in range(GRID_SIZE):
        for j in range(GRID_SIZE):
            cell = i * GRID_SIZE + j
            color = blue if (focal is not None and cell in focal) else red
            y0, x0 = i * t, j * t
            out[y0 : y0 + t, x0] = color
            out[y0 : y0 + t, x0 + t - 1] = color
            out[y0, x0 : x0 + t] = color
            out[y0 + t - 1, x0 : x0 + t] = color
            if anchor is not None and (i, j) == tuple(anchor):
                out[y0 : y0 + t, x0 : x0 + t] = 0.6 * out[y0 : y0 + t, x0 : x0 + t] + 0.4 * blue
    return out


def cmd_ablate_lambda(args) -> int:
    out = _resolve_out(args, "ablate-lambda")
    _check_clobber(out, ["lambda_ablation.csv"], args.overwrite)
    if args.method not in ("pirl_percep", "rcl_percep"):
        raise UsageError("--method must be pirl_percep or rcl_percep (combined-loss methods)")

    pre_file = _load_config_file(args.config) if args.config else {}
    pre_flags = dict(
        method=args.method,
        epochs=args.epochs,
        batch_size=args.batch_size,
        negatives_per_anchor=args.negatives,
        seed=args.seed,
    )
    ft_flags = dict(
        epochs=args.finetune_epochs,
        batch_size=args.batch_size,
        train_fraction=args.fraction,
        seed=args.seed,
    )
    manifest = dat.load_manifest(args.manifest)

    rows = []
    for lam in ABLATION_LAMBDAS:
        pre_cfg = _merge_config(
            PretextConfig,
            _pretext_profile_base(args.profile),
            pre_file,
            {**pre_flags, "lambda_weight": lam},
        )
        ft_cfg = _merge_config(
            FinetuneConfig, _finetune_profile_base(args.profile), {}, ft_flags
        )
        train = _load_split(manifest, "train", pre_cfg.image_size)
        state = pretext_train(train, pre_cfg)
        sub = dat.take_train_subset(manifest, dat.SubsetSpec(ft_cfg.train_fraction, ft_cfg.seed))
        ft_train = _load_split(sub, "train", ft_cfg.image_size, require_masks=True)
        ft_val = _load_split(sub, "val", ft_cfg.image_size, require_masks=True)
        result = finetune_segmentation(ft_train, ft_val, ft_cfg, init=state)
        rows.append((args.method, lam, result.best_val_dsc))
        print(f"lambda={lam}: best val DSC {result.best_val_dsc:.4f}")

    out.mkdir(parents=True, exist_ok=True)
    import csv

    with open(out / "lambda_ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "lambda", "dsc"])
        for method, lam, dsc in rows:
            writer.writerow([method, lam, repr(float(dsc))])
    print(f"ablation table: {out / 'lambda_ablation.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sslus",
        description="Self-supervised pretraining and lesion segmentation for B-mode ultrasound.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV}/<command>)")
        p.add_argument("--seed", type=int, default=42, help="master random seed")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")

    p = sub.add_parser("make-synthetic", help="generate a synthetic speckle-lesion dataset")
    common(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--splits", default="0.7,0.1", help="train,val fractions (rest is test)")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("pretext-train", help="run self-supervised pretext training")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--method", choices=("pirl", "pirl_percep", "rcl", "rcl_percep"))
    p.add_argument("--task", choices=("jigsaw", "jigsaw_freq", "crosspatch", "crosspatch_freq"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lambda_weight", type=float)
    p.add_argument("--negatives", type=int)
    p.add_argument("--literal-focal-flips", action="store_true")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretext_train)

    p = sub.add_parser("finetune", help="fine-tune segmentation from a checkpoint or scratch")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--init", help="pretext checkpoint; omit for the supervised baseline")
    p.add_argument("--fraction", type=float, help="train-label fraction (e.g. 1.0, 0.5, 0.2)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="compute segmentation metrics on a split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="fine-tuned model file")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--overlays", action="store_true", help="write one overlay PNG per image")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("augment-preview", help="visualize frequency filters and the patch task")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument(
        "--filter",
        action="append",
        help="filter spec 'inner=20,outer=30,x=2'; repeatable (default: three presets)",
    )
    p.add_argument("--task", choices=("crosspatch", "jigsaw"), default="crosspatch")
    p.add_argument("--crop-size", type=int, default=192)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("ablate-lambda", help="sweep the combined-loss weight")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", required=True, choices=("pirl_percep", "rcl_percep"))
    p.add_argument("--config", help="JSON config for the pretext stage")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--fraction", type=float)
    p.add_argument("--epochs", type=int, help="pretext epochs override")
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--negatives", type=int)
    p.set_defaults(func=cmd_ablate_lambda)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except dat.ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
