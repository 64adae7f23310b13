"""Command-line entry point wiring the pipeline stages.

Subcommands: synth, train-flow, score, heatmap, bins, train-extractor,
embed. Each run writes its outputs plus a ``run.json`` provenance record
(resolved config, seeds, version, timings) into the output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Failures print one machine-parsable line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import config as cfgmod
from .data import generate_synthetic_corpus, load_dataset
from .errors import ConfigError, DataError, FlowgrainError, NumericError
from .extractor import (
    embed as embed_crops,
    export_scatter,
    load_extractor_checkpoint,
    save_extractor_checkpoint,
    teacher_loglik,
    train_extractor,
)
from .heatmap import (
    bin_images,
    compute_scale,
    export_index_html,
    export_report,
    image_stats,
    render_overlay,
    sweep_loglik,
)
from .training import (
    load_flow_checkpoint,
    sample_crops,
    save_flow_checkpoint,
    train_flow,
)


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory '{path}': {exc}") from exc
    return path


def _write_run_record(out_dir, command, argv, raw_config, values, seeds,
                      started, outputs):
    record = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "started": started.isoformat(),
        "duration_s": round(time.time() - started.timestamp(), 3),
        "seeds": seeds,
        "config_overrides": raw_config,
        "config_resolved": {k: str(v) for k, v in sorted(values.items())},
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "run.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_split(manifest, split):
    records = load_dataset(manifest)
    if split != "all":
        records = [r for r in records if r.split == split]
    if not records:
        raise DataError(f"no images for split '{split}' in '{manifest}'")
    return records


def _read_crop_file(path, crop_size):
    if not os.path.exists(path):
        raise DataError(f"crop file missing: '{path}'")
    if path.endswith(".npy"):
        raw = np.load(path)
    else:
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
    want = crop_size * crop_size * 3
    if raw.ndim != 2 or raw.shape[1] != want:
        raise DataError(
            f"crop rows must have {want} values for crop size {crop_size}, "
            f"got shape {raw.shape}")
    return raw.astype(np.float64)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    synth = cfgmod.synth_config(values)
    if args.seed is not None:
        synth.seed = args.seed
    rows = generate_synthetic_corpus(synth, out)
    outputs = [os.path.join(out, "manifest.tsv")] + \
        [os.path.join(out, rel) for rel, _, _ in rows]
    _write_run_record(out, "synth", sys.argv[1:], raw, values,
                      {"synth.seed": synth.seed}, started, outputs)
    print(f"synth: wrote {len(rows)} images under {out}")
    return 0


def cmd_train_flow(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    records = _load_split(args.data, "train")
    tc = cfgmod.train_config(values)
    fc = cfgmod.flow_config(values)
    trained = train_flow(records, tc, fc)
    ckpt = os.path.join(out, "flow.fgck")
    save_flow_checkpoint(ckpt, trained)
    _write_run_record(out, "train-flow", sys.argv[1:], raw, values,
                      {"train.seed": tc.seed}, started, [ckpt])
    best = trained.history.best_epoch
    val = trained.history.val_nll[best] if trained.history.val_nll else float("nan")
    print(f"train-flow: checkpoint {ckpt} (best epoch {best}, val NLL {val:.4f})")
    return 0


def cmd_score(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    trained = load_flow_checkpoint(args.checkpoint)
    crops = _read_crop_file(args.crops, trained.crop_size)
    ll = trained.score_crops(crops)
    path = os.path.join(out, "scores.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("index,log_likelihood\n")
        for i, v in enumerate(ll):
            fh.write(f"{i},{v!r}\n")
    _write_run_record(out, "score", sys.argv[1:], raw, values, {}, started,
                      [path])
    print(f"score: wrote {len(ll)} log-likelihoods to {path}")
    return 0


def _sweep_all(trained, records, values):
    window = values["heatmap.window"]
    stride = values["heatmap.stride"]
    grids = []
    for rec in records:
        grids.append(sweep_loglik(trained, rec, window=window, stride=stride))
    return grids


def cmd_heatmap(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    trained = load_flow_checkpoint(args.checkpoint)
    records = _load_split(args.data, values["heatmap.split"])
    grids = _sweep_all(trained, records, values)
    _ensure_dir(os.path.join(out, "grids"))
    _ensure_dir(os.path.join(out, "overlays"))
    outputs = []
    for grid in grids:
        gpath = os.path.join(out, "grids", f"{grid.image_id}.npy")
        np.save(gpath, grid.values)
        outputs.append(gpath)
    lo, hi = compute_scale(grids)
    stats = [image_stats(g) for g in grids]
    report = bin_images(stats, lo, hi, width=values["heatmap.bin_width"])
    by_id = {rec.id: rec for rec in records}
    overlay_rel = {}
    for grid in grids:
        opath = os.path.join(out, "overlays", f"{grid.image_id}.png")
        render_overlay(by_id[grid.image_id], grid, opath, lo, hi,
                       alpha=values["heatmap.alpha"])
        outputs.append(opath)
        overlay_rel[grid.image_id] = os.path.join("overlays",
                                                  f"{grid.image_id}.png")
    csv_path = export_report(stats, report, os.path.join(out, "report.csv"))
    html_path = export_index_html(report, os.path.join(out, "index.html"),
                                  overlay_paths=overlay_rel)
    outputs += [csv_path, html_path]
    _write_run_record(out, "heatmap", sys.argv[1:], raw, values, {}, started,
                      outputs)
    cells = sum(g.cells for g in grids)
    print(f"heatmap: {len(grids)} images, {cells} cells, report {csv_path}")
    return 0


def cmd_bins(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    grid_dir = args.grids
    if not os.path.isdir(grid_dir):
        raise DataError(f"grid directory missing: '{grid_dir}'")
    from .heatmap import HeatmapGrid

    grids = []
    for name in sorted(os.listdir(grid_dir)):
        if not name.endswith(".npy"):
            continue
        values_arr = np.load(os.path.join(grid_dir, name))
        grids.append(HeatmapGrid(image_id=name[:-4], window=0, stride=0,
                                 values=values_arr))
    if not grids:
        raise DataError(f"no grid files in '{grid_dir}'")
    lo, hi = compute_scale(grids)
    stats = [image_stats(g) for g in grids]
    report = bin_images(stats, lo, hi, width=values["heatmap.bin_width"])
    csv_path = export_report(stats, report, os.path.join(out, "bins.csv"))
    html_path = export_index_html(report, os.path.join(out, "index.html"))
    _write_run_record(out, "bins", sys.argv[1:], raw, values, {}, started,
                      [csv_path, html_path])
    print(f"bins: {len(grids)} images into {len(report.members)} bins, {csv_path}")
    return 0


def cmd_train_extractor(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    flow = load_flow_checkpoint(args.flow_checkpoint)
    records = _load_split(args.data, "train")
    cfg = cfgmod.extractor_config(values)
    trained = train_extractor(records, flow, cfg)
    ckpt = os.path.join(out, "extractor.fgck")
    save_extractor_checkpoint(ckpt, trained)
    _write_run_record(out, "train-extractor", sys.argv[1:], raw, values,
                      {"extractor.seed": cfg.seed}, started, [ckpt])
    best = min(trained.history.val_mse) if trained.history.val_mse else float("nan")
    print(f"train-extractor: checkpoint {ckpt} (best val MSE {best:.5f})")
    return 0


def cmd_embed(args, values, raw):
    out = _ensure_dir(args.out)
    started = datetime.now(timezone.utc)
    trained = load_extractor_checkpoint(args.checkpoint)
    records = _load_split(args.data, values["embed.split"])
    rng = np.random.default_rng(values["embed.seed"])
    s = trained.config.crop_size
    crops, pos = sample_crops(records, s, values["embed.count"], rng,
                              with_positions=True)
    crops = crops.reshape(-1, s, s, 3)
    provenance = [(records[i].id, r, c) for i, r, c in pos]
    teacher = None
    if args.flow_checkpoint:
        flow = load_flow_checkpoint(args.flow_checkpoint)
        teacher = teacher_loglik(flow, crops)
    points = embed_crops(trained, crops, provenance=provenance, teacher=teacher)
    csv_path = os.path.join(out, "scatter.csv")
    plot_path = os.path.join(out, "scatter.png") if args.plot else None
    export_scatter(points, csv_path, plot_path=plot_path)
    outputs = [csv_path] + ([plot_path] if plot_path else [])
    _write_run_record(out, "embed", sys.argv[1:], raw, values,
                      {"embed.seed": values["embed.seed"]}, started, outputs)
    print(f"embed: {len(points)} points to {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowgrain",
        description="Density-based image quality scoring with normalizing flows.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--seed", type=int, help="shortcut for synth.seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-flow", help="train a flow density model")
    common(p)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.set_defaults(fn=cmd_train_flow)

    p = sub.add_parser("score", help="log-likelihood for a list of crops")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--crops", required=True,
                   help="CSV or .npy of flattened raw crop rows")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("heatmap", help="sliding-window LL sweep and overlays")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("bins", help="re-bin saved heatmap grids")
    common(p)
    p.add_argument("--grids", required=True, help="directory of <id>.npy grids")
    p.set_defaults(fn=cmd_bins)

    p = sub.add_parser("train-extractor", help="train the embedding regressor")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--flow-checkpoint", required=True)
    p.set_defaults(fn=cmd_train_extractor)

    p = sub.add_parser("embed", help="export crop embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True, help="extractor checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--flow-checkpoint",
                   help="optional flow checkpoint for teacher LL values")
    p.add_argument("--plot", action="store_true",
                   help="also write a static scatter image")
    p.set_defaults(fn=cmd_embed)
    return parser


def dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values, raw = cfgmod.load_config(args.config, args.overrides)
        return args.fn(args, values, raw)
    except ConfigError as exc:
        print(f"flowgrain: error: config: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"flowgrain: error: data: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"flowgrain: error: numeric: {exc}", file=sys.stderr)
        return 4
    except FlowgrainError as exc:
        print(f"flowgrain: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"flowgrain: error: config: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
