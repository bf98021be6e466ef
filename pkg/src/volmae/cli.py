"""Command-line surface: reproducible experiments over the library.

Subcommands: phantom, train, infer, subtract, eval. Every command accepts
`--config FILE` (JSON) for defaults, with explicit flags taking precedence,
and writes its fully-resolved configuration as `run_config.json` next to its
outputs — re-running from that file reproduces the outputs bit-exactly.

Exit codes: 0 ok; 2 configuration/contract errors; 3 I/O, format, or data
errors; 4 numeric failures (NaN loss); 5 undefined metrics.

The environment variable MAEMI_THREADS caps the inference worker pool
(default 1); results are independent of the worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, mae3d, ndnum
from .anomaly import (
    IdentityReconstructor,
    InferenceConfig,
    apply_tissue_mask,
    sliding_window_infer,
)
from .dcebaseline import DceSeries, subtraction_image
from .errors import ConfigError, DataError, NumericError, UndefinedMetricError, VolmaeError
from .evalmetrics import EvalReport, evaluate_cases
from .patchgrid import PatchSpec
from .phantom import PhantomConfig, generate_dataset
from .volio import (
    Volume,
    normalize,
    read_boxes,
    read_mvol,
    read_sidecar,
    write_mvol,
    write_sidecar,
)

_DESK_STRIDE = (24, 21, 4)
_PAPER_STRIDE = (64, 42, 2)
_DESK_EPOCHS = 150


# ---------------------------------------------------------------------------
# config resolution helpers


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return obj


def _pick(cli_value, file_cfg: dict, key: str, default):
    """CLI flag wins over config-file entry wins over default."""
    if cli_value is not None:
        return cli_value
    if key in file_cfg:
        value = file_cfg[key]
        return tuple(value) if isinstance(value, list) else value
    return default


def _write_run_config(out_dir: Path, resolved: dict) -> None:
    (out_dir / "run_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def _manifest_paths(manifest_path: Path, manifest: dict):
    """Resolve manifest-relative paths against the manifest's directory."""
    base = manifest_path.parent

    def fix(p):
        q = Path(p)
        return q if q.is_absolute() else base / q

    return fix


def _read_manifest(path_str: str) -> tuple[Path, dict]:
    p = Path(path_str)
    if not p.exists():
        raise DataError(f"manifest not found: {p}")
    try:
        manifest = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {p} is not valid JSON: {e}") from e
    for key in ("train", "val", "test"):
        if key not in manifest:
            raise DataError(f"manifest {p} lacks the '{key}' split")
    return p, manifest


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _pick(args.seed, file_cfg, "seed", 0)
    n_train = _pick(args.train, file_cfg, "train", 40)
    n_val = _pick(args.val, file_cfg, "val", 0)
    n_test = _pick(args.test, file_cfg, "test", 40)
    pcfg_json = dict(file_cfg.get("phantom", {}))
    if args.dims is not None:
        pcfg_json["dims"] = tuple(args.dims)
    if args.prevalence is not None:
        pcfg_json["prevalence"] = args.prevalence
    pcfg_json["seed"] = seed
    pcfg = PhantomConfig.from_json({**PhantomConfig().to_json(), **pcfg_json})

    out = _ensure_out(args.out)
    generate_dataset(pcfg, n_train, n_test, out, n_val_healthy=n_val)
    _write_run_config(
        out,
        {
            "command": "phantom",
            "seed": seed,
            "train": n_train,
            "val": n_val,
            "test": n_test,
            "phantom": pcfg.to_json(),
            "out": str(out),
        },
    )
    print(f"wrote {n_train} train / {n_val} val / {n_test} test cases to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _model_config(preset: str, mask_ratio: float | None, vit_patch=None) -> mae3d.MaeConfig:
    cfg = mae3d.desk_config() if preset == "desk" else mae3d.paper_config()
    if mask_ratio is not None:
        cfg = replace(cfg, mask_ratio=mask_ratio)
    if vit_patch is not None:
        cfg = replace(cfg, spec=PatchSpec(cfg.spec.mri_patch_dims, vit_patch, cfg.spec.channels))
    return cfg


def _load_train_volumes(manifest_path: Path, manifest: dict) -> list[Volume]:
    fix = _manifest_paths(manifest_path, manifest)
    vols = []
    for p in manifest["train"]:
        vols.append(normalize(read_mvol(fix(p))))
    if not vols:
        raise DataError("manifest train split is empty")
    return vols


def _train_model(
    model: mae3d.MaeModel,
    volumes,
    tcfg: mae3d.TrainConfig,
    log_path: Path,
    start_epoch: int = 0,
    opt_state=None,
) -> ndnum.AdamState:
    mode = "a" if start_epoch > 0 else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if start_epoch == 0:
            writer.writerow(["epoch", "lr", "mean_loss"])
        if opt_state is None:
            opt_state = ndnum.AdamState()
        for epoch in range(start_epoch, tcfg.epochs):
            loss = mae3d.train_epoch(model, volumes, tcfg, epoch, opt_state)
            lr = ndnum.lr_schedule(epoch, tcfg.base_lr, tcfg.warmup_epochs, tcfg.epochs)
            if not math.isfinite(loss):
                raise NumericError(
                    f"training loss became non-finite at epoch {epoch} (lr {lr:.3e})"
                )
            writer.writerow([epoch, f"{lr:.6e}", f"{loss:.8e}"])
            fh.flush()
    return opt_state


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    preset = _pick(args.preset, file_cfg, "preset", "desk")
    seed = _pick(args.seed, file_cfg, "seed", 0)
    epochs = _pick(args.epochs, file_cfg, "epochs", _DESK_EPOCHS if preset == "desk" else 1000)
    batch_size = _pick(args.batch_size, file_cfg, "batch_size", 6)
    lr = _pick(args.lr, file_cfg, "lr", 1e-3)
    warmup = _pick(args.warmup, file_cfg, "warmup", min(7, max(epochs - 1, 0)))
    mask_ratio = _pick(args.mask_ratio, file_cfg, "mask_ratio", None)
    loss_all = bool(_pick(args.loss_all_tokens or None, file_cfg, "loss_all_tokens", False))
    manifest_arg = _pick(args.manifest, file_cfg, "manifest", None)
    if manifest_arg is None:
        raise ConfigError("a manifest is required (--manifest)")

    manifest_path, manifest = _read_manifest(manifest_arg)
    volumes = _load_train_volumes(manifest_path, manifest)
    out = _ensure_out(args.out)
    ckpt_path = out / "model.ckpt"
    log_path = out / "loss_log.csv"

    tcfg = mae3d.TrainConfig(
        batch_size=batch_size,
        base_lr=lr,
        epochs=epochs,
        warmup_epochs=warmup,
        seed=seed,
        loss_all_tokens=loss_all,
    )
    start_epoch = 0
    opt_state = None
    if args.resume:
        model = mae3d.load_checkpoint(args.resume)
        opt_state = mae3d.load_opt_state(args.resume)
        if log_path.exists():
            with open(log_path) as fh:
                start_epoch = max(0, sum(1 for _ in fh) - 1)
        print(f"resuming at epoch {start_epoch}")
    else:
        mcfg = _model_config(preset, mask_ratio)
        model = mae3d.MaeModel(mcfg, init_seed=seed)

    _write_run_config(
        out,
        {
            "command": "train",
            "preset": preset,
            "manifest": str(manifest_path),
            "seed": seed,
            "epochs": epochs,
            "batch_size": batch_size,
            "lr": lr,
            "warmup": warmup,
            "mask_ratio": model.config.mask_ratio,
            "loss_all_tokens": loss_all,
            "out": str(out),
        },
    )
    opt_state = _train_model(model, volumes, tcfg, log_path, start_epoch, opt_state)
    mae3d.save_checkpoint(model, ckpt_path)
    mae3d.save_opt_state(opt_state, ckpt_path)
    print(f"checkpoint: {ckpt_path}")
    print(f"loss log: {log_path}")
    return 0


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args) -> int:
    file_cfg = _load_config_file(args.config)
    preset = _pick(args.preset, file_cfg, "preset", "desk")
    seed = _pick(args.seed, file_cfg, "seed", 0)
    repetitions = _pick(args.repetitions, file_cfg, "repetitions", 6)
    mask_ratio = _pick(args.mask_ratio, file_cfg, "mask_ratio", None)
    stride = _pick(
        tuple(args.stride) if args.stride else None,
        file_cfg,
        "stride",
        _DESK_STRIDE if preset == "desk" else _PAPER_STRIDE,
    )
    volume_arg = _pick(args.volume, file_cfg, "volume", None)
    if volume_arg is None:
        raise ConfigError("an input volume is required (--volume)")

    if args.identity_stub:
        base = _model_config(preset, mask_ratio)
        model = IdentityReconstructor(base)
        ckpt_ref = "identity-stub"
    else:
        ckpt = _pick(args.checkpoint, file_cfg, "checkpoint", None)
        if ckpt is None:
            raise ConfigError("a checkpoint is required unless --identity-stub is given")
        model = mae3d.load_checkpoint(ckpt)
        ckpt_ref = str(ckpt)

    ratio = mask_ratio if mask_ratio is not None else model.config.mask_ratio
    icfg = InferenceConfig(
        stride=tuple(stride),
        repetitions=repetitions,
        mask_ratio=ratio,
        seed=seed,
        include_visible=bool(args.error_on_visible),
    )
    volume = normalize(read_mvol(volume_arg))
    result = sliding_window_infer(model, volume, icfg)
    if args.tissue_mask:
        fused = apply_tissue_mask(result.fused, read_mvol(args.tissue_mask))
    else:
        fused = result.fused

    out = _ensure_out(args.out)
    stem = Path(volume_arg).stem
    fused_path = out / f"{stem}_anomaly.mvol"
    seq_path = out / f"{stem}_errors.mvol"
    side_cfg = {
        "stride": list(icfg.stride),
        "repetitions": icfg.repetitions,
        "mask_ratio": icfg.mask_ratio,
        "seed": icfg.seed,
    }
    write_mvol(fused, fused_path)
    write_sidecar(
        fused_path,
        role="anomaly_map",
        extra={"model_checkpoint": ckpt_ref, "config": side_cfg},
    )
    write_mvol(result.error_maps, seq_path)
    write_sidecar(
        seq_path,
        sequences=["NFS", "FS"][: result.error_maps.n_channels],
        role="error_maps",
        extra={"model_checkpoint": ckpt_ref, "config": side_cfg},
    )
    _write_run_config(
        out,
        {
            "command": "infer",
            "preset": preset,
            "volume": str(volume_arg),
            "checkpoint": ckpt_ref,
            "tissue_mask": str(args.tissue_mask) if args.tissue_mask else None,
            "stride": list(icfg.stride),
            "repetitions": repetitions,
            "mask_ratio": ratio,
            "seed": seed,
            "error_on_visible": bool(args.error_on_visible),
            "out": str(out),
        },
    )
    print(f"model forwards: {result.n_forwards}")
    print(f"uncovered voxels: {result.uncovered_voxels}")
    print(f"anomaly map: {fused_path}")
    return 0


# ---------------------------------------------------------------------------
# subtract


def cmd_subtract(args) -> int:
    pre = read_mvol(args.pre)
    posts = tuple(read_mvol(p) for p in args.post)
    series = DceSeries(pre, posts)
    sub = subtraction_image(series, filter_per_term=args.filter_per_term)
    out = _ensure_out(args.out)
    stem = Path(args.pre).stem
    sub_path = out / f"{stem}_subtraction.mvol"
    write_mvol(sub, sub_path)
    write_sidecar(
        sub_path,
        role="subtraction",
        extra={"filter_per_term": bool(args.filter_per_term), "n_posts": len(posts)},
    )
    _write_run_config(
        out,
        {
            "command": "subtract",
            "pre": str(args.pre),
            "post": [str(p) for p in args.post],
            "filter_per_term": bool(args.filter_per_term),
            "out": str(out),
        },
    )
    print(f"subtraction map: {sub_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _print_report(report: EvalReport) -> None:
    rows = [
        ("auroc", f"{report.auroc:.6f}"),
        ("ap", f"{report.ap:.6f}"),
        ("ap_baseline", f"{report.ap_baseline:.6f}"),
        ("n_pos", str(report.n_pos)),
        ("n_neg", str(report.n_neg)),
        ("n_excluded", str(report.n_excluded)),
        ("n_cases", str(len(report.cases))),
    ]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key:<{width}}  {value}")


def _manifest_eval_cases(manifest_path: Path, manifest: dict, maps_dir: Path, suffix: str):
    """(map, boxes, mask) triples for every test case that has boxes."""
    fix = _manifest_paths(manifest_path, manifest)
    cases, skipped = [], 0
    for entry in manifest["test"]:
        image_path = fix(entry["image"])
        boxes = read_boxes(image_path)
        if not boxes:
            skipped += 1
            continue
        map_path = maps_dir / f"{image_path.stem}{suffix}.mvol"
        if not map_path.exists():
            raise DataError(f"anomaly map not found: {map_path}")
        cases.append((read_mvol(map_path), boxes, read_mvol(fix(entry["mask"]))))
    return cases, skipped


def cmd_eval(args) -> int:
    if args.sweep:
        return _run_sweep(args)
    if args.manifest:
        manifest_path, manifest = _read_manifest(args.manifest)
        if not args.maps_dir:
            raise ConfigError("--maps-dir is required with --manifest")
        cases, skipped = _manifest_eval_cases(
            manifest_path, manifest, Path(args.maps_dir), args.map_suffix
        )
        if not cases:
            raise UndefinedMetricError("no test cases with bounding boxes to evaluate")
        report = evaluate_cases(cases)
        if skipped:
            print(f"skipped {skipped} test cases without boxes")
    else:
        if not (args.map and args.mask and args.boxes_from):
            raise ConfigError("--map, --mask and --boxes-from are required without --manifest")
        boxes = read_boxes(args.boxes_from)
        if not boxes:
            raise UndefinedMetricError(f"no bounding boxes in sidecar of {args.boxes_from}")
        report = evaluate_cases([(read_mvol(args.map), boxes, read_mvol(args.mask))])
    _print_report(report)
    if args.out:
        out = _ensure_out(args.out)
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
        _write_run_config(
            out,
            {
                "command": "eval",
                "manifest": args.manifest,
                "maps_dir": args.maps_dir,
                "map": args.map,
                "mask": args.mask,
                "boxes_from": args.boxes_from,
                "map_suffix": args.map_suffix,
                "out": str(out),
            },
        )
        print(f"report: {out / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# sweep (ablation machinery)


def _parse_sweep(spec_str: str):
    try:
        key, raw = spec_str.split("=", 1)
    except ValueError:
        raise ConfigError(f"sweep must look like key=v1,v2,... got {spec_str!r}") from None
    key = key.strip()
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if key == "mask_ratio":
        return key, [float(v) for v in values]
    if key == "vit_patch":
        out = []
        for v in values:
            parts = v.split("x")
            if len(parts) != 3:
                raise ConfigError(f"vit_patch values look like 6x6x2, got {v!r}")
            out.append(tuple(int(p) for p in parts))
        return key, out
    raise ConfigError(f"unknown sweep key {key!r} (use mask_ratio or vit_patch)")


def run_detection_experiment(
    manifest_path: Path,
    manifest: dict,
    mask_ratio: float | None,
    vit_patch,
    epochs: int,
    seed: int,
    repetitions: int,
    stride,
) -> EvalReport:
    """Train a fresh desk model and score it on the manifest's lesioned
    test cases — one point of an ablation curve."""
    volumes = _load_train_volumes(manifest_path, manifest)
    mcfg = _model_config("desk", mask_ratio, vit_patch)
    model = mae3d.MaeModel(mcfg, init_seed=seed)
    tcfg = mae3d.TrainConfig(
        epochs=epochs, warmup_epochs=min(7, max(epochs - 1, 0)), seed=seed
    )
    mae3d.train(model, volumes, tcfg)
    icfg = InferenceConfig(
        stride=tuple(stride),
        repetitions=repetitions,
        mask_ratio=model.config.mask_ratio,
        seed=seed,
    )
    fix = _manifest_paths(manifest_path, manifest)
    cases = []
    for entry in manifest["test"]:
        image_path = fix(entry["image"])
        boxes = read_boxes(image_path)
        if not boxes:
            continue
        volume = normalize(read_mvol(image_path))
        mask = read_mvol(fix(entry["mask"]))
        result = sliding_window_infer(model, volume, icfg)
        cases.append((apply_tissue_mask(result.fused, mask), boxes, mask))
    if not cases:
        raise UndefinedMetricError("no test cases with bounding boxes to evaluate")
    return evaluate_cases(cases)


def _run_sweep(args) -> int:
    if not args.manifest:
        raise ConfigError("--sweep requires --manifest")
    key, values = _parse_sweep(args.sweep)
    manifest_path, manifest = _read_manifest(args.manifest)
    epochs = args.epochs if args.epochs is not None else 100
    seed = args.seed if args.seed is not None else 0
    repetitions = args.repetitions if args.repetitions is not None else 6
    out = _ensure_out(args.out or ".")
    rows = []
    for value in values:
        report = run_detection_experiment(
            manifest_path,
            manifest,
            mask_ratio=value if key == "mask_ratio" else None,
            vit_patch=value if key == "vit_patch" else None,
            epochs=epochs,
            seed=seed,
            repetitions=repetitions,
            stride=_DESK_STRIDE,
        )
        label = value if key == "mask_ratio" else "x".join(map(str, value))
        rows.append((label, report.auroc, report.ap))
        print(f"{key}={label}: auroc {report.auroc:.4f} ap {report.ap:.4f}")
    sweep_path = out / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([key, "auroc", "ap"])
        for label, a, p in rows:
            writer.writerow([label, f"{a:.6f}", f"{p:.6f}"])
    _write_run_config(
        out,
        {
            "command": "eval",
            "sweep": args.sweep,
            "manifest": str(manifest_path),
            "epochs": epochs,
            "seed": seed,
            "repetitions": repetitions,
            "out": str(out),
        },
    )
    print(f"sweep table: {sweep_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volmae",
        description="Masked-autoencoder anomaly detection for multi-spectral volumes.",
        epilog="MAEMI_THREADS caps the inference worker pool (default 1).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=int, help="healthy training cases (default 40)")
    p.add_argument("--val", type=int, help="healthy validation cases (default 0)")
    p.add_argument("--test", type=int, help="mixed test cases, alternating healthy/lesioned (default 40)")
    p.add_argument("--dims", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--prevalence", type=float)
    p.add_argument("--config", help="JSON config file (flags override)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train the masked autoencoder on healthy cases")
    p.add_argument("--manifest", help="dataset manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--loss-all-tokens", action="store_true", dest="loss_all_tokens")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window anomaly inference")
    p.add_argument("--checkpoint")
    p.add_argument("--volume", help="input MVOL volume")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--stride", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--repetitions", type=int)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--tissue-mask", dest="tissue_mask", help="restrict the fused map to a mask")
    p.add_argument("--identity-stub", action="store_true", dest="identity_stub",
                   help="perfect-reconstruction stub instead of a checkpoint (null test)")
    p.add_argument("--error-on-visible", action="store_true", dest="error_on_visible",
                   help="also accumulate reconstruction error at visible tokens")
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("subtract", help="DCE subtraction baseline map")
    p.add_argument("--pre", required=True, help="pre-contrast MVOL")
    p.add_argument("--post", required=True, nargs="+", help="post-contrast MVOLs")
    p.add_argument("--out", required=True)
    p.add_argument("--filter-per-term", action="store_true", dest="filter_per_term",
                   help="min-filter each squared term before averaging")
    p.add_argument("--config")
    p.set_defaults(func=cmd_subtract)

    p = sub.add_parser("eval", help="mask-restricted AUROC / AP against box labels")
    p.add_argument("--map", help="anomaly map MVOL (single-case mode)")
    p.add_argument("--mask", help="tissue mask MVOL (single-case mode)")
    p.add_argument("--boxes-from", dest="boxes_from",
                   help="volume whose sidecar carries the boxes (single-case mode)")
    p.add_argument("--manifest", help="dataset manifest (multi-case mode)")
    p.add_argument("--maps-dir", dest="maps_dir", help="directory holding *_anomaly.mvol maps")
    p.add_argument("--map-suffix", dest="map_suffix", default="_anomaly")
    p.add_argument("--sweep", help="ablation sweep, e.g. mask_ratio=0.25,0.9,0.98 or vit_patch=6x6x2,6x6x4")
    p.add_argument("--epochs", type=int, help="training epochs per sweep point")
    p.add_argument("--seed", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except VolmaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
