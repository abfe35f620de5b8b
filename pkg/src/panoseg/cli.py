"""Command-line orchestration.

Every run writes a reproducibility record (resolved config + seed + code
version) beside its outputs, logs progress as JSON lines, and emits a
matplotlib figure next to each delimited report. Subcommands exit 0 on
success and non-zero with a one-line diagnostic on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import data as dat
from . import evalkit, report
from .adapt import AdaptConfig, adapt_loop, run_training
from .autodiff import AutodiffError
from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError
from .deform import offset_csv_rows
from .geometry import GeometryError, ProjectionSpec, cubemap_to_erp_lut, resample
from .model import ModelConfig, Segmenter, preset_config

_R_SWEEP = (1, 2, 4, 8, None)
_ALPHA_SWEEP = (0.0, 0.0001, 0.001, 0.01, 0.1)
_TEMP_SWEEP = (1.0, 5.0, 20.0, 35.0, 50.0)


def _add_common(p):
    p.add_argument("--config", help="model or run config JSON")
    p.add_argument("--manifest-source", help="source-domain manifest JSON")
    p.add_argument("--manifest-target", help="target-domain manifest JSON")
    p.add_argument("--out", required=True, help="output directory (or file for 'project')")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, help="optimizer iterations")
    p.add_argument("--preset", choices=("toy", "tiny", "small"), default="toy")
    p.add_argument("--decoder", choices=("v1", "v2"))
    p.add_argument("--patch-embed", choices=("standard", "deformable"), dest="patch_embed")
    p.add_argument("--r", help="offset restriction factor (integer or 'none')")
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--fovs", default="90,180,270,360", help="comma-separated FoV degrees")
    p.add_argument("--dirs", type=int, default=8, help="number of direction bands")
    p.add_argument("--checkpoint", help="model checkpoint (.t4p)")
    p.add_argument("--domain", default="target-panoramic", help="manifest domain to evaluate")
    p.add_argument("--split", default="val")
    p.add_argument("--index", type=int, default=0, help="sample index for 'visualize'")


def _parse_r(value):
    if value is None:
        return 4
    if str(value).lower() in ("none", "inf", "unrestricted"):
        return None
    return int(value)


def _model_config(args, num_classes):
    overrides = {}
    if args.decoder:
        overrides["decoder"] = args.decoder
    if args.patch_embed:
        overrides["patch_embed"] = args.patch_embed
    if args.r is not None:
        overrides["r"] = _parse_r(args.r)
    if args.config:
        cfg = ModelConfig.from_json(args.config)
        for key, value in overrides.items():
            setattr(cfg, key, value)
        return cfg
    return preset_config(args.preset, num_classes=num_classes, **overrides)


def _run_config(args, **defaults):
    cfg = AdaptConfig(**defaults)
    if args.config and _looks_like_run_config(args.config):
        cfg = AdaptConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iters is not None:
        cfg.max_iters = args.iters
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.temperature is not None:
        cfg.temperature = args.temperature
    if args.lam is not None:
        cfg.lam = args.lam
    return cfg


def _looks_like_run_config(path):
    with open(path, encoding="utf-8") as fh:
        keys = set(json.load(fh))
    return bool(keys & {"alpha", "max_iters", "refresh_period", "pseudo_threshold", "lr"})


def _write_record(outdir, args, extra=None):
    os.makedirs(outdir, exist_ok=True)
    record = {
        "command": args.command,
        "version": __version__,
        "seed": args.seed,
        "args": {k: v for k, v in vars(args).items() if k != "func" and v is not None},
    }
    if extra:
        record.update(extra)
    with open(os.path.join(outdir, "run_record.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, default=str)


def _jsonl_logger(path):
    fh = open(path, "w", encoding="utf-8")

    def log(row):
        line = json.dumps(row)
        fh.write(line + "\n")
        fh.flush()
        print(line)

    return log, fh


def _load_model(args, num_classes):
    cfg_path = None
    if args.checkpoint:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "model_config.json")
        if args.config and not _looks_like_run_config(args.config):
            cfg_path = args.config
        elif os.path.exists(sibling):
            cfg_path = sibling
    if cfg_path:
        cfg = ModelConfig.from_json(cfg_path)
    else:
        cfg = _model_config(args, num_classes)
    model = Segmenter(cfg, seed=args.seed)
    if args.checkpoint:
        model.load_state(load_checkpoint(args.checkpoint))
    return model


def _iou_fields(classes):
    return [f"iou_{name}" for name in classes]


def _metric_row(miou_val, ious, classes):
    row = {"miou": float(miou_val)}
    row.update({f"iou_{name}": float(v) for name, v in zip(classes, ious)})
    return row


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = dat.BenchmarkConfig(seed=args.seed)
    manifest = dat.gen_benchmark(args.out, cfg)
    _write_record(args.out, args, {"samples": len(manifest["samples"])})
    print(json.dumps({"root": args.out, "samples": len(manifest["samples"])}))
    return 0


def cmd_train(args):
    if not args.manifest_source:
        raise DataError("train requires --manifest-source")
    manifest = dat.load_manifest(args.manifest_source)
    classes = manifest["classes"]
    domain = args.domain if args.domain != "target-panoramic" else "source-pinhole"
    imgs, labs = dat.load_split(manifest, domain, "train")
    val = dat.load_split(manifest, domain, "val")

    model_cfg = _model_config(args, num_classes=len(classes))
    model = Segmenter(model_cfg, seed=args.seed)
    run_cfg = _run_config(args, max_iters=300, batch_size=4, eval_every=100)

    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args, {"model_config": os.path.join(args.out, "model_config.json")})
    log, fh = _jsonl_logger(os.path.join(args.out, "metrics.jsonl"))
    try:
        history = run_training(model, imgs, labs, run_cfg, val_samples=val, log=log)
    finally:
        fh.close()
    model.save(os.path.join(args.out, "checkpoint.t4p"),
               os.path.join(args.out, "model_config.json"))
    run_cfg.to_json(os.path.join(args.out, "run_config.json"))
    report.save_training_curves(os.path.join(args.out, "train_curves.png"), history)
    print(json.dumps({"checkpoint": os.path.join(args.out, "checkpoint.t4p"),
                      "final_loss": history[-1]["loss"]}))
    return 0


def cmd_adapt(args):
    if not (args.manifest_source and args.manifest_target):
        raise DataError("adapt requires --manifest-source and --manifest-target")
    src = dat.load_manifest(args.manifest_source)
    tgt = dat.load_manifest(args.manifest_target)
    classes = src["classes"]
    s_imgs, s_labs = dat.load_split(src, "source-pinhole", "train")
    t_imgs, _ = dat.load_split(tgt, "target-panoramic", "train")  # labels unused: unlabeled domain
    t_val = dat.load_split(tgt, "target-panoramic", "val")

    model = _load_model(args, num_classes=len(classes))
    run_cfg = _run_config(args, max_iters=500, batch_size=2, eval_every=100)

    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)
    log, fh = _jsonl_logger(os.path.join(args.out, "metrics.jsonl"))
    try:
        history = adapt_loop(model, s_imgs, s_labs, t_imgs, run_cfg,
                             val_samples=t_val, log=log)
    finally:
        fh.close()
    model.save(os.path.join(args.out, "checkpoint.t4p"),
               os.path.join(args.out, "model_config.json"))
    run_cfg.to_json(os.path.join(args.out, "run_config.json"))
    report.save_training_curves(os.path.join(args.out, "adapt_curves.png"), history)
    final_miou, _, _ = evalkit.evaluate_samples(model, *t_val)
    print(json.dumps({"checkpoint": os.path.join(args.out, "checkpoint.t4p"),
                      "target_val_miou": float(final_miou)}))
    return 0


def cmd_eval(args):
    manifest = dat.load_manifest(args.manifest_target or args.manifest_source)
    classes = manifest["classes"]
    imgs, labs = dat.load_split(manifest, args.domain, args.split)
    model = _load_model(args, num_classes=len(classes))

    mean, ious, conf = evalkit.evaluate_samples(model, imgs, labs)
    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)
    metrics = {"miou": float(mean), "pixel_accuracy": conf.pixel_accuracy(),
               "per_class_iou": {name: float(v) for name, v in zip(classes, ious)}}
    with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2)
    report.write_csv(os.path.join(args.out, "metrics.csv"),
                     ["miou"] + _iou_fields(classes), [_metric_row(mean, ious, classes)])
    print(json.dumps(metrics))
    return 0


def cmd_fov_sweep(args):
    manifest = dat.load_manifest(args.manifest_target or args.manifest_source)
    classes = manifest["classes"]
    imgs, labs = dat.load_split(manifest, args.domain, args.split)
    model = _load_model(args, num_classes=len(classes))
    fovs = [float(v) for v in args.fovs.split(",")]

    rows = evalkit.fov_sweep(model, imgs, labs, fovs)
    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)
    csv_rows = []
    for row in rows:
        out = {"fov_deg": row["fov_deg"]}
        out.update(_metric_row(row["miou"], row["ious"], classes))
        csv_rows.append(out)
    report.write_csv(os.path.join(args.out, "fov_sweep.csv"),
                     ["fov_deg", "miou"] + _iou_fields(classes), csv_rows)
    report.save_curve(os.path.join(args.out, "fov_sweep.png"),
                      [r["fov_deg"] for r in rows], {"mIoU": [r["miou"] for r in rows]},
                      "field of view (deg)", "mIoU")
    print(json.dumps({"rows": len(rows), "miou_at_360": rows[-1]["miou"] if rows else None}))
    return 0


def cmd_dir_miou(args):
    manifest = dat.load_manifest(args.manifest_target or args.manifest_source)
    classes = manifest["classes"]
    imgs, labs = dat.load_split(manifest, args.domain, args.split)
    model = _load_model(args, num_classes=len(classes))

    preds = []
    for i in range(0, len(imgs), 4):
        _, pred = model.segment(imgs[i : i + 4])
        preds.append(pred)
    preds = np.concatenate(preds, axis=0)
    scores, _ = evalkit.directional_miou(preds, labs, len(classes), n_dirs=args.dirs)
    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)
    report.write_csv(os.path.join(args.out, "dir_miou.csv"), ["direction", "miou"],
                     [{"direction": d, "miou": float(s)} for d, s in enumerate(scores)])
    report.save_polar_directions(os.path.join(args.out, "dir_miou.png"), scores)
    print(json.dumps({"directions": scores}))
    return 0


def cmd_project(args):
    faces = {}
    for key, path in zip(("F", "R", "B", "L", "U", "D"), args.faces):
        faces[key] = dat.load_image(path).astype(np.float64)
    face_size = faces["F"].shape[0]
    height = args.height or 2 * face_size
    spec = ProjectionSpec(erp_width=2 * height, erp_height=height, face_size=face_size)
    lut = cubemap_to_erp_lut(spec)
    erp = resample(faces, lut)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    dat.save_image(args.out, np.clip(erp, 0, 255).astype(np.uint8))
    print(json.dumps({"erp": args.out, "size": [int(spec.erp_height), int(spec.erp_width)]}))
    return 0


def cmd_visualize(args):
    manifest = dat.load_manifest(args.manifest_target or args.manifest_source)
    classes = manifest["classes"]
    imgs, labs = dat.load_split(manifest, args.domain, args.split)
    if not 0 <= args.index < len(imgs):
        raise DataError(f"--index {args.index} out of range (split has {len(imgs)} samples)")
    model = _load_model(args, num_classes=len(classes))

    x = imgs[args.index : args.index + 1]
    with_offsets = model.cfg.decoder_deformable
    logits, _ = model.forward(x, record=True)
    pred = logits.data.argmax(axis=1)[0].astype(np.uint8)

    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)
    rgb = ((x[0].transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)
    report.save_label_figure(os.path.join(args.out, "segmentation.png"), rgb,
                             labs[args.index], pred)

    if with_offsets:
        stage_offsets = []
        rows = []
        for l, stage in enumerate(model.decoder.stages):
            off = stage.embed.last_offsets[0]  # (taps, H_l, W_l, 2)
            taps = off.shape[0]
            # displacements relative to each location: learned + centered lattice
            lattice = _centered_lattice(stage.embed.patch_size)
            total = off + lattice.reshape(taps, 1, 1, 2)
            stage_offsets.append(total)
            rows.extend(offset_csv_rows(l + 1, off, base=lattice))
        report.write_csv(os.path.join(args.out, "offsets.csv"),
                         ["stage", "y", "x", "dy", "dx"],
                         [dict(zip(("stage", "y", "x", "dy", "dx"), r)) for r in rows])
        report.save_offset_overlay(os.path.join(args.out, "offsets.png"), rgb,
                                   stage_offsets, model.cfg.strides)
    print(json.dumps({"out": args.out}))
    return 0


def _centered_lattice(s):
    axis = np.arange(s) - s // 2
    dy, dx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=-1).astype(np.float64)


def cmd_ablate_r(args):
    if not args.manifest_source:
        raise DataError("ablate-r requires --manifest-source")
    src = dat.load_manifest(args.manifest_source)
    classes = src["classes"]
    s_imgs, s_labs = dat.load_split(src, "source-pinhole", "train")
    tgt = dat.load_manifest(args.manifest_target) if args.manifest_target else src
    t_val = dat.load_split(tgt, "target-panoramic", "val")

    iters = args.iters or 120
    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)
    rows = []
    for r in _R_SWEEP:
        cfg = preset_config(args.preset, num_classes=len(classes),
                            r=r, decoder=args.decoder or "v2")
        model = Segmenter(cfg, seed=args.seed)
        run_cfg = _run_config(args, max_iters=iters, batch_size=4, log_every=max(1, iters // 3))
        run_cfg.max_iters = iters
        run_training(model, s_imgs, s_labs, run_cfg)
        mean, _, _ = evalkit.evaluate_samples(model, *t_val)
        rows.append({"r": "none" if r is None else r, "miou": float(mean)})
        print(json.dumps(rows[-1]))
    report.write_csv(os.path.join(args.out, "ablate_r.csv"), ["r", "miou"], rows)
    report.save_curve(os.path.join(args.out, "ablate_r.png"),
                      list(range(len(rows))), {"mIoU": [r["miou"] for r in rows]},
                      "restriction factor index (1,2,4,8,none)", "target val mIoU")
    return 0


def cmd_ablate_hparams(args):
    if not (args.manifest_source and args.manifest_target):
        raise DataError("ablate-hparams requires --manifest-source and --manifest-target")
    src = dat.load_manifest(args.manifest_source)
    tgt = dat.load_manifest(args.manifest_target)
    classes = src["classes"]
    s_imgs, s_labs = dat.load_split(src, "source-pinhole", "train")
    t_imgs, _ = dat.load_split(tgt, "target-panoramic", "train")
    t_val = dat.load_split(tgt, "target-panoramic", "val")

    warm_iters = max(60, (args.iters or 100))
    adapt_iters = args.iters or 100
    os.makedirs(args.out, exist_ok=True)
    _write_record(args.out, args)

    cfg = preset_config(args.preset, num_classes=len(classes), decoder=args.decoder or "v2")
    base = Segmenter(cfg, seed=args.seed)
    warm_cfg = AdaptConfig(max_iters=warm_iters, batch_size=4, seed=args.seed, lr=1e-3)
    run_training(base, s_imgs, s_labs, warm_cfg)
    state = {name: p.data.copy() for name, p in base.named_parameters()}

    def adapted_miou(alpha, temperature):
        model = Segmenter(cfg, seed=args.seed)
        model.load_state(state)
        run_cfg = AdaptConfig(alpha=alpha, temperature=temperature, seed=args.seed,
                              max_iters=adapt_iters, batch_size=2, lr=5e-4)
        adapt_loop(model, s_imgs, s_labs, t_imgs, run_cfg)
        mean, _, _ = evalkit.evaluate_samples(model, *t_val)
        return float(mean)

    alpha_rows = []
    for alpha in _ALPHA_SWEEP:
        alpha_rows.append({"alpha": alpha, "miou": adapted_miou(alpha, 35.0)})
        print(json.dumps(alpha_rows[-1]))
    temp_rows = []
    for temp in _TEMP_SWEEP:
        temp_rows.append({"temperature": temp, "miou": adapted_miou(0.001, temp)})
        print(json.dumps(temp_rows[-1]))

    report.write_csv(os.path.join(args.out, "hparam_alpha.csv"), ["alpha", "miou"], alpha_rows)
    report.write_csv(os.path.join(args.out, "hparam_temperature.csv"),
                     ["temperature", "miou"], temp_rows)
    report.save_curve(os.path.join(args.out, "hparam_alpha.png"),
                      [r["alpha"] for r in alpha_rows], {"mIoU": [r["miou"] for r in alpha_rows]},
                      "alpha", "target val mIoU", logx=True)
    report.save_curve(os.path.join(args.out, "hparam_temperature.png"),
                      [r["temperature"] for r in temp_rows],
                      {"mIoU": [r["miou"] for r in temp_rows]},
                      "distillation temperature", "target val mIoU")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="panoseg",
                                     description="panoramic segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "adapt": cmd_adapt,
        "eval": cmd_eval,
        "fov-sweep": cmd_fov_sweep,
        "dir-miou": cmd_dir_miou,
        "project": cmd_project,
        "visualize": cmd_visualize,
        "ablate-r": cmd_ablate_r,
        "ablate-hparams": cmd_ablate_hparams,
    }
    for name, func in commands.items():
        p = sub.add_parser(name)
        if name == "project":
            p.add_argument("faces", nargs=6, metavar="FACE",
                           help="six face images in F R B L U D order")
            p.add_argument("--out", required=True, help="output ERP image (.ppm)")
            p.add_argument("--height", type=int, help="ERP height in pixels (default 2*face)")
            p.add_argument("--seed", type=int, default=0)
        else:
            _add_common(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AutodiffError, CheckpointError, DataError, GeometryError,
            ValueError, KeyError, OSError) as exc:
        print(f"panoseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
