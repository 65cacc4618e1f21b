"""Command-line entry points for the full build workflow.

Every subcommand reads one declarative config file plus any number of
`--set key=value` overrides, and operates inside the configured run
directory. LAYERLENS_THREADS caps the worker pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline as pl
from .config import RunConfig, apply_overrides, load_config, save_config


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        apply_overrides(cfg, args.set)
    return cfg


def _manifest_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.workdir, "manifest.json")


def _ingest(cfg: RunConfig) -> pl.DatasetManifest:
    m = pl.ingest(
        cfg.workdir,
        policy=cfg.split.policy,
        fraction=cfg.split.fraction,
        seed=cfg.seed,
        register_cfg=cfg.register,
    )
    m.save(_manifest_path(cfg))
    return m


def _load_manifest(cfg: RunConfig) -> pl.DatasetManifest:
    path = _manifest_path(cfg)
    if os.path.exists(path):
        return pl.DatasetManifest.load(path)
    return _ingest(cfg)


def _reports_dir(cfg: RunConfig) -> str:
    d = os.path.join(cfg.workdir, "reports")
    os.makedirs(d, exist_ok=True)
    return d


def cmd_synth(args) -> int:
    cfg = _build_config(args)
    paths = pl.build_synthetic(cfg)
    save_config(cfg, os.path.join(cfg.workdir, "config.yaml"))
    _log(f"wrote {len(paths)} plates under {cfg.workdir}/hr")
    return 0


def cmd_degrade(args) -> int:
    cfg = _build_config(args)
    manifest = _ingest(cfg)
    pl.build_degraded(cfg, manifest)
    manifest.save(_manifest_path(cfg))
    _log(f"degraded {len(manifest.layers)} plates into {cfg.workdir}/lr")
    return 0


def cmd_register(args) -> int:
    cfg = _build_config(args)
    from .imgcore import read_png
    from .register import hough_circles, inscribe_boxes

    if args.image:
        path = args.image
    else:
        manifest = _load_manifest(cfg)
        path = manifest.hr(manifest.layers[0].index)
    img = read_png(path)
    circles = hough_circles(img, cfg.register.r_min, cfg.register.r_max,
                            vote_threshold=cfg.register.vote_threshold)
    boxes = inscribe_boxes(circles, cfg.register.box_margin, img.shape)
    out = {
        "image": path,
        "circles": [{"cx": c.cx, "cy": c.cy, "r": c.r, "score": c.score}
                    for c in circles],
        "boxes": [{"part_id": b.part_id, "x0": b.x0, "y0": b.y0,
                   "x1": b.x1, "y1": b.y1} for b in boxes],
    }
    dest = os.path.join(_reports_dir(cfg), "register.json")
    with open(dest, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(f"found {len(circles)} parts; wrote {dest}")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _build_config(args)
    manifest = _load_manifest(cfg)
    save_config(cfg, os.path.join(cfg.workdir, "config.yaml"))
    paths = pl.run_train_ae(manifest, cfg)
    for name, path in paths.items():
        _log(f"{name}: {path}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _build_config(args)
    manifest = _load_manifest(cfg)
    save_config(cfg, os.path.join(cfg.workdir, "config.yaml"))
    path = pl.run_train_diffusion(manifest, cfg)
    _log(f"denoiser: {path}")
    return 0


def cmd_superres(args) -> int:
    cfg = _build_config(args)
    manifest = _load_manifest(cfg)
    paths = pl.run_superres(manifest, cfg, which=args.which)
    _log(f"restored {len(paths)} plates under {cfg.workdir}/sr")
    return 0


def cmd_segment(args) -> int:
    cfg = _build_config(args)
    from .imgcore import read_png, write_png
    from .segment import ReferenceSegmenter, adaptive_segment

    img = read_png(args.image)
    result = adaptive_segment(
        img, args.ref_area, ReferenceSegmenter(),
        seed=cfg.seed,
        max_iter=cfg.segment.max_iter,
        band=(cfg.segment.band_lo, cfg.segment.band_hi),
        window=cfg.segment.window,
        min_confidence=cfg.segment.min_confidence,
        min_stability=cfg.segment.min_stability,
    )
    if args.out:
        write_png(args.out, result.mask.astype(float), bits=8)
    _log(json.dumps({
        "area": result.area,
        "ref_area": result.ref_area,
        "iterations": result.iterations,
        "anomaly": result.anomaly,
        "mask": args.out,
    }, sort_keys=True))
    return 2 if result.anomaly else 0


def cmd_reconstruct(args) -> int:
    cfg = _build_config(args)
    manifest = _load_manifest(cfg)
    report = pl.reconstruct_and_compare(manifest, cfg, which=args.which)
    dest = os.path.join(_reports_dir(cfg), "reconstruct.json")
    with open(dest, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(f"compared {len(report['parts'])} parts; wrote {dest}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _build_config(args)
    manifest = _load_manifest(cfg)
    report = pl.evaluate(manifest, cfg, which=args.which)
    rdir = _reports_dir(cfg)
    report.save_csv(os.path.join(rdir, "eval.csv"))
    report.save_json(os.path.join(rdir, "eval.json"))
    for label, cols in sorted(report.aggregates().items()):
        parts = ", ".join(f"{k}={m:.4g}±{s:.2g}"
                          for k, (m, s) in sorted(cols.items()))
        _log(f"{label}: {parts}")
    _log(f"wrote {rdir}/eval.csv and eval.json")
    return 0


def cmd_report(args) -> int:
    cfg = _build_config(args)
    rdir = _reports_dir(cfg)
    summary: dict = {}
    for name in ("eval", "reconstruct", "register"):
        path = os.path.join(rdir, f"{name}.json")
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                summary[name] = json.load(fh)
    if args.latency:
        summary["latency"] = pl.latency_report()
    dest = os.path.join(rdir, "summary.json")
    with open(dest, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_summary_md(os.path.join(rdir, "summary.md"), summary)
    _log(f"wrote {dest} and summary.md")
    return 0


def _write_summary_md(path: str, summary: dict) -> None:
    lines = ["# Run summary", ""]
    ev = summary.get("eval")
    if ev:
        lines += ["## Image metrics (mean ± std)", "",
                  "| pair | mae | psnr | ssim | cvd | ncvd |",
                  "|---|---|---|---|---|---|"]
        for label, cols in sorted(ev["aggregates"].items()):
            cells = [label.replace("|", "\\|")]
            for key in ("mae", "psnr", "ssim", "cvd", "ncvd"):
                c = cols.get(key)
                cells.append(f"{c['mean']:.4g} ± {c['std']:.2g}" if c else "-")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    rc = summary.get("reconstruct")
    if rc:
        lines += ["## Volume comparison", "",
                  "| part | route | IoU | Hausdorff (µm) | V |",
                  "|---|---|---|---|---|"]
        for p in rc["parts"]:
            for route in ("sr", "lr"):
                v = p["volume"][route]
                lines.append(
                    f"| {p['part']} | {route} | {v['iou']:.4f} "
                    f"| {v['hausdorff']:.2f} | {v['v']:.4f} |"
                )
        lines.append("")
        rough = [p for p in rc["parts"] if "roughness" in p]
        if rough:
            lines += ["## Roughness (µm)", "",
                      "| part | route | Ra | Rq | Rz |",
                      "|---|---|---|---|---|"]
            for p in rough:
                for route in ("hr", "sr", "lr"):
                    r = p["roughness"][route]
                    lines.append(
                        f"| {p['part']} | {route} | {r['ra']:.2f} "
                        f"| {r['rq']:.2f} | {r['rz']:.2f} |"
                    )
            lines.append("")
        if rc.get("excluded"):
            lines.append(f"Excluded: {rc['excluded']}")
            lines.append("")
    lat = summary.get("latency")
    if lat:
        lines += ["## Generation latency", "",
                  f"- compressed codes: {lat['latent_s_per_sample']:.4f} s/sample",
                  f"- raw pixels ({lat['pixel_size']}²): "
                  f"{lat['pixel_s_per_sample']:.4f} s/sample",
                  f"- batch {lat['batch']}, {lat['t_steps']} steps", ""]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="layerlens",
        description="Layerwise powder-bed image enhancement and metrology.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="YAML config file (defaults apply when absent)")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config entry")
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, "generate a synthetic build")
    add("degrade", cmd_degrade, "simulate low-detail acquisitions")

    p = add("register", cmd_register, "detect circular parts on a plate")
    p.add_argument("--image", default=None,
                   help="plate image (default: first layer of the manifest)")

    add("train-ae", cmd_train_ae, "train the two patch autoencoders")
    add("train-diffusion", cmd_train_diffusion,
        "train the conditional denoiser")

    p = add("superres", cmd_superres, "restore degraded plates")
    p.add_argument("--which", default="test",
                   choices=("test", "train", "all"))

    p = add("segment", cmd_segment, "segment one part in one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ref-area", type=float, required=True,
                   dest="ref_area", help="expected part area in pixels")
    p.add_argument("--out", default=None, help="mask PNG destination")

    p = add("reconstruct", cmd_reconstruct,
            "build and compare per-part volumes")
    p.add_argument("--which", default="test",
                   choices=("test", "train", "all"))

    p = add("evaluate", cmd_evaluate, "image metrics for both routes")
    p.add_argument("--which", default="test",
                   choices=("test", "train", "all"))

    p = add("report", cmd_report, "merge reports into one summary")
    p.add_argument("--latency", action="store_true",
                   help="include the generation latency benchmark")

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
