"""Command-line pipeline driver.

Subcommands: phantom, preprocess, make-masks, train, generate, evaluate.
Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint/fingerprint
error, 5 insufficient data.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import codec as codec_mod
from . import conditioning as cond_mod
from . import control as control_mod
from . import dataset as ds
from . import diffusion as diff
from . import metrics as metrics_mod
from . import preprocess as prep
from .config import PipelineConfig, load_pipeline_config
from .errors import (
    ConfigError,
    DataError,
    FingerprintError,
    InsufficientData,
    MissingFile,
    PcagenError,
)
from .nnutil import configure_threads

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_INSUFFICIENT = 5


def _fail_code(err: PcagenError) -> int:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, FingerprintError):
        return EXIT_CHECKPOINT
    if isinstance(err, InsufficientData):
        return EXIT_INSUFFICIENT
    return EXIT_DATA


def _stem(patient_id: str, slice_index: int) -> str:
    return f"{patient_id}_s{slice_index:03d}"


def _write_preview(plane: np.ndarray, path: Path) -> None:
    lo, hi = float(plane.min()), float(plane.max())
    scaled = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path)


# ---------------------------------------------------------------------------
# phantom

def cmd_phantom(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    try:
        b_values = [int(tok) for tok in args.b_values.split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse --b-values {args.b_values!r}") from e
    if not b_values:
        raise ConfigError("--b-values is empty")
    cfg = ds.PhantomConfig(
        height=args.height, width=args.width, b_values=tuple(b_values),
        lesion_present=not args.no_lesion,
    )
    out = Path(args.out)
    written: list[Path] = []
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(args.count):
            slc, masks = ds.generate_phantom(args.seed + i, cfg)
            stem = _stem(slc.patient_id, slc.slice_index)
            img_rel = f"images/{stem}.pcag"
            pro_rel = f"masks/{stem}_prostate.png"
            les_rel = f"masks/{stem}_lesion.png"
            ds.write_tensor(slc.pixels, out / img_rel)
            written.append(out / img_rel)
            ds.write_mask(masks.prostate, out / pro_rel)
            written.append(out / pro_rel)
            ds.write_mask(masks.lesion, out / les_rel)
            written.append(out / les_rel)
            entries.append({
                "patient_id": slc.patient_id,
                "slice_index": slc.slice_index,
                "image_path": img_rel,
                "prostate_mask_path": pro_rel,
                "lesion_mask_path": les_rel,
                "b_values": list(slc.b_values),
            })
        manifest = {"root_dir": ".", "entries": entries}
        with open(out / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(out / "manifest.json")
    except BaseException:
        for p in written:
            try:
                p.unlink()
            except OSError:
                pass
        raise
    print(f"wrote {args.count} phantoms to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess

def cmd_preprocess(args) -> int:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    manifest = ds.load_manifest(args.manifest)
    out = Path(args.out)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "geometry").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.entries:
        try:
            slc, masks = ds.read_slice(entry)
            sample, model_masks = prep.prepare_sample(slc, masks, cfg.preprocess)
        except PcagenError as e:
            raise type(e)(
                f"entry ({entry.patient_id}, {entry.slice_index}): {e}"
            ) from e
        stem = _stem(entry.patient_id, entry.slice_index)
        ds.write_tensor(sample.pixels, out / "samples" / f"{stem}.pcag")
        with open(out / "geometry" / f"{stem}.json", "w") as f:
            f.write(sample.geometry.to_json())
            f.write("\n")
        ds.write_mask(model_masks.prostate, out / "masks" / f"{stem}_prostate.png")
        ds.write_mask(model_masks.lesion, out / "masks" / f"{stem}_lesion.png")
        entries.append({
            "patient_id": entry.patient_id,
            "slice_index": entry.slice_index,
            "sample": f"samples/{stem}.pcag",
            "geometry": f"geometry/{stem}.json",
            "prostate_mask": f"masks/{stem}_prostate.png",
            "lesion_mask": f"masks/{stem}_lesion.png",
        })
    index = {
        "resolution": cfg.preprocess.target_resolution,
        "entries": entries,
    }
    with open(out / "samples.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"preprocessed {len(entries)} samples to {out}")
    return EXIT_OK


def _load_sample_index(directory: Path) -> dict:
    index_path = directory / "samples.json"
    if not index_path.exists():
        raise MissingFile(f"no samples.json under {directory}; run preprocess first")
    with open(index_path) as f:
        return json.load(f)


def _load_samples(directory: Path):
    """Returns (index, list of (entry, pixels, geometry, SegmentationPair))."""
    directory = Path(directory)
    index = _load_sample_index(directory)
    loaded = []
    for entry in index["entries"]:
        pixels = ds.read_tensor(directory / entry["sample"])
        with open(directory / entry["geometry"]) as f:
            geometry = prep.PadGeometry.from_json(f.read())
        masks = ds.SegmentationPair(
            prostate=ds.read_mask(directory / entry["prostate_mask"]),
            lesion=ds.read_mask(directory / entry["lesion_mask"]),
        )
        loaded.append((entry, pixels, geometry, masks))
    return index, loaded


# ---------------------------------------------------------------------------
# make-masks

def cmd_make_masks(args) -> int:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    data_dir = Path(args.data)
    index, loaded = _load_samples(data_dir)
    resolution = int(index["resolution"])
    params = cfg.conditioning_params(resolution)
    out = Path(args.out)
    (out / "cond").mkdir(parents=True, exist_ok=True)
    mode = {"full": "full", "simple": "simple", "soft": "soft_edge"}[args.mode]
    entries = []
    for entry, pixels, geometry, masks in loaded:
        sample = prep.PreprocessedSample(
            pixels=pixels,
            source=(entry["patient_id"], entry["slice_index"]),
            geometry=geometry,
        )
        if mode == "simple":
            cond = cond_mod.make_simple_condition(masks, params, geometry)
        else:
            cond = cond_mod.make_full_condition(sample, masks, params)
            if mode == "soft_edge":
                cond = cond_mod.soft_edge(cond, params.soft_sigma)
        stem = _stem(entry["patient_id"], entry["slice_index"])
        ds.write_tensor(cond.pixels, out / "cond" / f"{stem}.pcag")
        cond_mod.export_png(cond, out / "cond" / f"{stem}.png")
        entries.append({
            "patient_id": entry["patient_id"],
            "slice_index": entry["slice_index"],
            "tensor": f"cond/{stem}.pcag",
            "png": f"cond/{stem}.png",
        })
    with open(out / "masks.json", "w") as f:
        json.dump({"mode": mode, "resolution": resolution, "entries": entries},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(entries)} {mode} conditioning images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _write_curve(curve, path: Path) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for step, loss in curve:
            f.write(f"{step},{loss:.10g}\n")


def _sample_pixels(loaded) -> np.ndarray:
    return np.stack([pixels for _, pixels, _, _ in loaded])


def _latents_for(images: np.ndarray, codec_params) -> np.ndarray:
    return codec_mod.encode(codec_params, images)


def _load_codec_for_base(cfg: PipelineConfig, args) -> codec_mod.CodecParams:
    if cfg.codec.identity_codec:
        return codec_mod.identity_codec()
    codec_dir = Path(args.codec_checkpoint) if args.codec_checkpoint \
        else cfg.checkpoints_dir / "codec"
    return codec_mod.load_codec(codec_dir)


def cmd_train(args) -> int:
    cfg = load_pipeline_config(args.config)
    if args.seed is not None:
        cfg.codec.seed = cfg.base.seed = cfg.control.seed = args.seed
    data_dir = Path(args.data) if args.data else cfg.work_dir / "preprocessed"
    out_base = Path(args.out) if args.out else cfg.checkpoints_dir

    if args.stage == "codec":
        if cfg.codec.identity_codec:
            raise ConfigError("identity codec has no training stage")
        _, loaded = _load_samples(data_dir)
        images = _sample_pixels(loaded)
        params, curve = codec_mod.train_codec(images, cfg.codec)
        ckpt_dir = out_base / "codec"
        codec_mod.save_codec(params, ckpt_dir)
        _write_curve(curve, ckpt_dir / "curve.csv")
        mse = codec_mod.reconstruction_mse(params, images)
        print(f"codec checkpoint at {ckpt_dir}; reconstruction PSNR "
              f"{codec_mod.psnr(mse):.2f} dB")
        return EXIT_OK

    if args.stage == "base":
        index, loaded = _load_samples(data_dir)
        images = _sample_pixels(loaded)
        codec_params = _load_codec_for_base(cfg, args)
        latents = _latents_for(images, codec_params)
        den, prompt, curve = diff.train_base(latents, cfg.base)
        ckpt_dir = out_base / "base"
        diff.save_base(
            den, prompt, cfg.base, ckpt_dir,
            extra_meta={
                "image_size": int(index["resolution"]),
                "identity_codec": cfg.codec.identity_codec,
                "codec_fingerprint": codec_params.fingerprint,
            },
        )
        _write_curve(curve, ckpt_dir / "curve.csv")
        print(f"base checkpoint at {ckpt_dir}; final loss {curve[-1][1]:.4f}"
              if curve else f"base checkpoint at {ckpt_dir}")
        return EXIT_OK

    # control
    if not args.base_checkpoint:
        raise FingerprintError("--base-checkpoint is required for the control stage")
    base_dir = Path(args.base_checkpoint)
    if not (base_dir / "meta.json").exists():
        raise FingerprintError(f"no base checkpoint at {base_dir}")
    den, prompt, base_meta = diff.load_base(base_dir)
    _, loaded = _load_samples(data_dir)
    images = _sample_pixels(loaded)
    cfg.codec.identity_codec = bool(base_meta.get("identity_codec", cfg.codec.identity_codec))
    codec_params = _load_codec_for_base(cfg, args)
    stored_fp = base_meta.get("codec_fingerprint")
    if stored_fp and stored_fp != codec_params.fingerprint:
        raise FingerprintError("codec checkpoint does not match the base checkpoint")
    latents = _latents_for(images, codec_params)
    masks_dir = Path(args.masks) if args.masks else cfg.work_dir / "cond"
    masks_index_path = masks_dir / "masks.json"
    if not masks_index_path.exists():
        raise MissingFile(f"no masks.json under {masks_dir}; run make-masks first")
    with open(masks_index_path) as f:
        masks_index = json.load(f)
    conds = np.stack([
        ds.read_tensor(masks_dir / entry["tensor"]) for entry in masks_index["entries"]
    ])
    if conds.shape[0] != latents.shape[0]:
        raise DataError(
            f"{conds.shape[0]} conditioning images vs {latents.shape[0]} samples"
        )
    # schedule must match the base model's; take it from the base checkpoint
    base_cfg = base_meta["config"]
    cfg.control.T = int(base_cfg["T"])
    cfg.control.beta_start = float(base_cfg["beta_start"])
    cfg.control.beta_end = float(base_cfg["beta_end"])
    cfg.control.conditioning_mode = masks_index.get("mode", cfg.control.conditioning_mode)
    pairs = list(zip(latents, conds))
    control, curve = control_mod.train_control(den, prompt, pairs, cfg.control)
    ckpt_dir = out_base / "control"
    control_mod.save_control(control, cfg.control, ckpt_dir)
    _write_curve(curve, ckpt_dir / "curve.csv")
    print(f"control checkpoint at {ckpt_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate

def _collect_mask_files(args) -> list[Path]:
    if args.mask:
        p = Path(args.mask)
        if not p.exists():
            raise MissingFile(f"mask {p} does not exist")
        return [p]
    d = Path(args.mask_dir)
    if not d.is_dir():
        raise MissingFile(f"mask directory {d} does not exist")
    tensors = sorted(d.rglob("*.pcag"))
    stems = {p.with_suffix("").name for p in tensors}
    pngs = [p for p in sorted(d.rglob("*.png")) if p.with_suffix("").name not in stems]
    files = tensors + pngs
    if not files:
        raise MissingFile(f"no .pcag or .png conditioning files under {d}")
    return files


def _load_condition(path: Path, params, resolution: int) -> np.ndarray:
    if path.suffix == ".pcag":
        arr = ds.read_tensor(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[None], 3, axis=0)
        if arr.shape != (3, resolution, resolution):
            raise DataError(
                f"{path}: conditioning tensor {arr.shape} vs model resolution {resolution}"
            )
        return np.clip(arr, 0.0, 1.0)
    cond = cond_mod.load_hand_drawn(path, params, resolution, allow_resize=False)
    return cond.pixels


def cmd_generate(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    base_dir = Path(args.base)
    den, prompt, base_meta = diff.load_base(base_dir)
    resolution = int(base_meta.get("image_size", 0))
    if resolution < 16:
        raise DataError(f"base checkpoint at {base_dir} lacks a valid image_size")
    identity = bool(base_meta.get("identity_codec", True))
    if identity:
        codec_params = codec_mod.identity_codec()
    else:
        if not args.codec:
            raise ConfigError("--codec is required for a non-identity-codec base")
        codec_params = codec_mod.load_codec(Path(args.codec))
        stored_fp = base_meta.get("codec_fingerprint")
        if stored_fp and stored_fp != codec_params.fingerprint:
            raise FingerprintError("codec checkpoint does not match the base checkpoint")
    latent_res = resolution // codec_params.factor
    latent_shape = (den.config.in_channels, latent_res, latent_res)

    control = None
    conds: list[np.ndarray] | None = None
    if args.control:
        control = control_mod.load_control(Path(args.control), base=den)
        if not (args.mask or args.mask_dir):
            raise ConfigError("--mask or --mask-dir is required with --control")
        params = cond_mod.ConditioningParams.for_resolution(resolution)
        mask_files = _collect_mask_files(args)
        conds = [_load_condition(p, params, resolution) for p in mask_files]

    cfgd = base_meta["config"]
    schedule = diff.make_schedule(
        int(cfgd["T"]), float(cfgd["beta_start"]), float(cfgd["beta_end"])
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        if control is not None:
            x_m = conds[i % len(conds)]
            den_i = control_mod.controlled_denoiser(den, control)
            latent = diff.sample(den_i, schedule, prompt, x_m, latent_shape, args.seed + i)
        else:
            latent = diff.sample(den, schedule, prompt, None, latent_shape, args.seed + i)
        image = codec_mod.decode(codec_params, latent)
        ds.write_tensor(image, out / f"gen_{i:04d}.pcag")
        _write_preview(image.mean(axis=0), out / f"gen_{i:04d}.png")
    print(f"generated {args.count} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def _load_image_set(directory: Path):
    """Returns (images, geometry|None); accepts preprocess or generate layouts."""
    directory = Path(directory)
    if (directory / "samples.json").exists():
        _, loaded = _load_samples(directory)
        if not loaded:
            raise DataError(f"{directory}: empty sample index")
        images = [pixels for _, pixels, _, _ in loaded]
        geometry = loaded[0][2]
        return images, geometry
    files = sorted(directory.glob("*.pcag"))
    if not files:
        raise DataError(f"no images found under {directory}")
    return [ds.read_tensor(p) for p in files], None


def cmd_evaluate(args) -> int:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    real, real_geom = _load_image_set(Path(args.real_dir))
    gen, gen_geom = _load_image_set(Path(args.gen_dir))
    geometry = real_geom or gen_geom
    if cfg.evaluate.post_process and geometry is None:
        raise ConfigError(
            "post_process is enabled but neither directory carries pad geometry"
        )
    report = metrics_mod.evaluate_sets(real, gen, geometry, cfg.evaluate)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w") as f:
        f.write(report.to_json())
        f.write("\n")
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcagen",
        description="Anatomy-conditioned diffusion synthesis for prostate DWI",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--b-values", default="50", help="comma separated, e.g. 50,400,800")
    p.add_argument("--no-lesion", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="normalize and resize a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("make-masks", help="build conditioning images")
    p.add_argument("--data", required=True, help="preprocess output directory")
    p.add_argument("--mode", choices=("full", "simple", "soft"), required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("--stage", choices=("codec", "base", "control"), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="preprocess output directory (default from config)")
    p.add_argument("--masks", help="make-masks output directory (control stage)")
    p.add_argument("--base-checkpoint", help="base checkpoint (control stage)")
    p.add_argument("--codec-checkpoint", help="codec checkpoint (non-identity codec)")
    p.add_argument("--seed", type=int, help="override every stage seed")
    p.add_argument("--out", help="checkpoint root (default from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from a trained model")
    p.add_argument("--base", required=True, help="base checkpoint directory")
    p.add_argument("--control", help="control checkpoint directory")
    p.add_argument("--codec", help="codec checkpoint directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mask", help="single conditioning PNG (hand-drawn allowed)")
    g.add_argument("--mask-dir", help="directory of conditioning PNGs/tensors")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated images against reals")
    p.add_argument("--real-dir", required=True)
    p.add_argument("--gen-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    configure_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PcagenError as e:
        print(f"error: {e}", file=sys.stderr)
        return _fail_code(e)


if __name__ == "__main__":
    sys.exit(main())
