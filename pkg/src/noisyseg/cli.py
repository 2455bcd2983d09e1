"""Command-line entry point: ``noisyseg <group> <action> [options]``.

Every command writes only under ``--out`` and prints a one-line JSON summary
as its last stdout line. Exit codes: 0 success, 1 runtime failure, 2 usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from noisyseg import evalreport, ingest
from noisyseg.geometry import miou
from noisyseg.records import InstanceAnnotation, LabelSet
from noisyseg.synthdata import (
    ShapeWorldConfig,
    band_offsets,
    generate_shape_world,
    inject_misalignment,
    select_instances,
    shift_instances,
)

log = logging.getLogger("noisyseg")


class UsageError(Exception):
    pass


def _ratios(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated fractions, got {text!r}") from exc


def _common(suppress: bool) -> argparse.ArgumentParser:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    p.add_argument("--config", default=d(None), help="YAML config file")
    p.add_argument("--out", default=d("out"), help="output directory (default ./out)")
    p.add_argument("--workers", type=int, default=d(1), help="worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    leaf = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="noisyseg", parents=[_common(suppress=False)],
                                     description="Segmentation from misaligned and partial labels.")
    groups = parser.add_subparsers(dest="group", required=True, metavar="command")

    def sub(parent, name, help_):
        return parent.add_parser(name, parents=[leaf], help=help_)

    dg = groups.add_parser("datagen", help="synthetic data").add_subparsers(dest="action", required=True)
    p = sub(dg, "synth", "generate a shape-world corpus")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--splits", type=_ratios, default=None, help="e.g. 0.8,0.2 or 0.6,0.2,0.2")

    ig = groups.add_parser("ingest", help="real-data adapters").add_subparsers(dest="action", required=True)
    p = sub(ig, "slice", "tile a raster and rasterize vector labels")
    p.add_argument("--raster", required=True)
    p.add_argument("--labels", required=True, help="GeoJSON polygons")
    p.add_argument("--tile", type=int, default=128)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--source-gsd", type=float, default=None)
    p.add_argument("--target-gsd", type=float, default=None)
    p.add_argument("--coverage", type=float, default=0.10, help="minimum labeled fraction (0 disables)")
    p.add_argument("--provenance", default="true")
    p = sub(ig, "erode", "filter small fields and erode the rest")
    p.add_argument("--labels", required=True)
    p.add_argument("--min-area", type=float, default=500.0)
    p.add_argument("--distance", type=float, default=5.0)
    p = sub(ig, "split", "assign train/val/test tags")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", type=_ratios, required=True)

    nz = groups.add_parser("noise", help="label-noise injection").add_subparsers(dest="action", required=True)
    p = sub(nz, "shift", "misalign every instance")
    p.add_argument("--manifest", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--shift-range", type=int)
    g.add_argument("--band", type=int, nargs=2, metavar=("LO", "HI"))
    p = sub(nz, "omit", "drop a fraction of instances")
    p.add_argument("--manifest", required=True)
    p.add_argument("--alpha", type=float, required=True)

    tr = groups.add_parser("train", help="train a network").add_subparsers(dest="action", required=True)
    for task in ("acn", "psn", "baseline"):
        p = sub(tr, task, f"train the {task} network")
        p.add_argument("--train", required=True, help="manifest; train/val split tags are used")
        p.add_argument("--val", default=None, help="separate validation manifest")

    p = sub(groups, "correct", "realign labels with a trained ACN")
    p.add_argument("--acn", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--truth", default=None)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub(groups, "segment", "prompted segmentation with a trained PSN")
    p.add_argument("--psn", required=True)
    p.add_argument("--manifest", required=True, help="instances whose centroids become prompts")
    p.add_argument("--strategy", default="centroid", choices=["centroid", "random-interior"])
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--threshold", type=float, default=0.5)

    ev = groups.add_parser("eval", help="metrics and tables").add_subparsers(dest="action", required=True)
    p = sub(ev, "miou", "mIOU between two manifests")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    for name in ("table2", "table3", "table4", "sizes"):
        sub(ev, name, f"desk-scale {name} experiment")
    p = sub(ev, "cdf", "instance-count CDF per split")
    p.add_argument("--manifest", required=True)

    rp = groups.add_parser("report", help="figures").add_subparsers(dest="action", required=True)
    p = sub(rp, "overlays", "contour overlays")
    p.add_argument("--manifest", required=True, help="truth manifest")
    p.add_argument("--noisy", default=None)
    p.add_argument("--corrected", default=None)
    p.add_argument("--pred", default=None)
    p.add_argument("--limit", type=int, default=None)
    return parser


# -- helpers ----------------------------------------------------------------------


def _load_yaml(path) -> dict:
    import yaml

    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def _rebase(manifest: ingest.DatasetManifest, out_dir: Path) -> ingest.DatasetManifest:
    """Same records with paths made relative to ``out_dir``."""
    from dataclasses import replace

    rel = lambda p: os.path.relpath(manifest.resolve(p), out_dir)
    records = [replace(r, image=rel(r.image), masks=tuple(replace(m, path=rel(m.path)) for m in r.masks))
               for r in manifest.records]
    return ingest.DatasetManifest(records, out_dir)


def _write_pairs(pairs, source: ingest.DatasetManifest, out_dir: Path) -> ingest.DatasetManifest:
    """Write new masks for ``pairs`` that reuse the source manifest's images and splits."""
    return ingest.write_corpus(pairs, out_dir, ingest.splits_of(source), image_paths=ingest.image_paths_of(source))


# -- commands ---------------------------------------------------------------------


def cmd_datagen_synth(a, out: Path) -> dict:
    params = _load_yaml(a.config) if a.config else {}
    if a.image_size is not None:
        params["image_size"] = a.image_size
        # keep the default shape sizes proportional to the frame
        params.setdefault("shape_size", (max(2, round(10 * a.image_size / 128)), max(2, round(40 * a.image_size / 128))))
    params["seed"] = a.seed
    cfg = ShapeWorldConfig(**params)
    pairs = generate_shape_world(cfg, a.n, a.workers)
    manifest = ingest.write_corpus(pairs, out, "train")
    if a.splits:
        manifest = ingest.split_dataset(manifest, a.splits, a.seed)
        ingest.write_manifest(manifest, out / "manifest.jsonl")
    return {"manifest": str(out / "manifest.jsonl"), "n_patches": len(manifest),
            "n_instances": sum(r.n_instances for r in manifest.records), "seed": a.seed}


def cmd_ingest_slice(a, out: Path) -> dict:
    raster = ingest.read_raster(a.raster)
    if (a.source_gsd is None) != (a.target_gsd is None):
        raise UsageError("--source-gsd and --target-gsd go together")
    gsd = a.source_gsd
    if a.source_gsd is not None:
        raster = ingest.resample_raster(raster, a.source_gsd, a.target_gsd)
        gsd = a.target_gsd
    polys, _ = ingest.read_geojson(a.labels)
    if a.source_gsd is not None:
        from shapely import affinity

        f = a.source_gsd / a.target_gsd
        polys = [affinity.scale(p, f, f, origin=(0, 0)) for p in polys]
    pairs = ingest.slice_raster(raster, polys, a.tile, a.stride, gsd=gsd, provenance=a.provenance)
    kept = [(p, l) for p, l in pairs if a.coverage <= 0 or ingest.coverage_filter(p, l, a.coverage)]
    ingest.write_corpus(kept, out, "train")
    return {"manifest": str(out / "manifest.jsonl"), "n_tiles": len(pairs), "n_kept": len(kept)}


def cmd_ingest_erode(a, out: Path) -> dict:
    polys, crs = ingest.read_geojson(a.labels)
    kept = ingest.filter_and_erode_fields(polys, a.min_area, a.distance, crs)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_geojson(out / "eroded.geojson", kept, crs)
    return {"geojson": str(out / "eroded.geojson"), "n_input": len(polys), "n_kept": len(kept)}


def cmd_ingest_split(a, out: Path) -> dict:
    manifest = ingest.split_dataset(ingest.read_manifest(a.manifest), a.ratios, a.seed)
    out.mkdir(parents=True, exist_ok=True)
    ingest.write_manifest(_rebase(manifest, out), out / "manifest.jsonl")
    counts = {s: len(manifest.split(s)) for s in ingest.SPLITS}
    return {"manifest": str(out / "manifest.jsonl"), **counts}


def cmd_noise_shift(a, out: Path) -> dict:
    src = ingest.read_manifest(a.manifest)
    rng = np.random.default_rng(a.seed)
    pairs = []
    for patch, labels in ingest.load_corpus(src):
        if a.band is not None:
            noisy = shift_instances(labels, band_offsets(labels.instance_count, a.band[0], a.band[1], rng))
        else:
            noisy = inject_misalignment(labels, a.shift_range, rng)
        pairs.append((patch, noisy))
    _write_pairs(pairs, src, out)
    return {"manifest": str(out / "manifest.jsonl"), "n_patches": len(pairs), "seed": a.seed}


def cmd_noise_omit(a, out: Path) -> dict:
    src = ingest.read_manifest(a.manifest)
    rng = np.random.default_rng(a.seed)
    pairs, kept = [], 0
    for patch, labels in ingest.load_corpus(src):
        sub = select_instances(labels, a.alpha, rng) if labels.instance_count else labels
        kept += sub.instance_count
        pairs.append((patch, sub))
    _write_pairs(pairs, src, out)
    return {"manifest": str(out / "manifest.jsonl"), "n_instances": kept, "seed": a.seed}


def cmd_train(a, out: Path) -> dict:
    from noisyseg.train import TrainConfig, save_checkpoint, train_acn, train_baseline, train_psn

    cfg = TrainConfig.from_file(a.config).replace(seed=a.seed)
    manifest = ingest.read_manifest(a.train)
    if a.val:
        train, val = ingest.load_corpus(manifest), ingest.load_corpus(ingest.read_manifest(a.val))
    else:
        train, val = ingest.load_corpus(manifest, "train"), ingest.load_corpus(manifest, "val")
    out.mkdir(parents=True, exist_ok=True)
    fn = {"acn": train_acn, "psn": train_psn, "baseline": train_baseline}[a.action]
    w = fn(train, val, cfg, log_path=out / f"{a.action}_log.csv")
    save_checkpoint(w, out / f"{a.action}.ckpt")
    return {"checkpoint": str(out / f"{a.action}.ckpt"), "best_epoch": w.meta["best_epoch"],
            "best_val_miou": w.meta["best_val_miou"], "seed": a.seed}


def cmd_correct(a, out: Path) -> dict:
    from noisyseg.pipeline import correct_corpus
    from noisyseg.train import load_checkpoint

    src = ingest.read_manifest(a.manifest)
    pairs = ingest.load_corpus(src)
    acn = load_checkpoint(a.acn, pairs[0][0].image.shape[2] + 1 if pairs else None)
    truth = None
    if a.truth:
        truth = {p.patch_id: l for p, l in ingest.load_corpus(ingest.read_manifest(a.truth))}
    fixed, report = correct_corpus(acn, pairs, a.threshold, truth)
    _write_pairs(fixed, src, out)
    summary = report.summary()
    (out / "correction.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return {"manifest": str(out / "manifest.jsonl"), **summary}


def cmd_segment(a, out: Path) -> dict:
    from noisyseg.pipeline import predict_corpus_psn
    from noisyseg.train import load_checkpoint

    src = ingest.read_manifest(a.manifest)
    pairs = ingest.load_corpus(src)
    psn = load_checkpoint(a.psn, pairs[0][0].image.shape[2] + 1 if pairs else None)
    rng = np.random.default_rng(a.seed)
    preds = predict_corpus_psn(psn, pairs, a.strategy, a.radius, a.threshold, rng)
    out_pairs = []
    for (patch, labels), pred in zip(pairs, preds):
        inst = [] if pred is None else [InstanceAnnotation(0, pred, "corrected")]
        out_pairs.append((patch, LabelSet(patch.patch_id, patch.shape, inst)))
    _write_pairs(out_pairs, src, out)
    return {"manifest": str(out / "manifest.jsonl"), "n_patches": len(out_pairs), "seed": a.seed}


def _unions(path) -> dict:
    m = ingest.read_manifest(path)
    return {p.patch_id: l.union() for p, l in ingest.load_corpus(m)}


def cmd_eval_miou(a, out: Path) -> dict:
    pred, truth = _unions(a.pred), _unions(a.truth)
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise ValueError(f"prediction manifest lacks {len(missing)} patches, e.g. {missing[0]}")
    metrics = miou([(pred[k], truth[k]) for k in sorted(truth)])
    out.mkdir(parents=True, exist_ok=True)
    (out / "miou.json").write_text(json.dumps({"miou": metrics.miou, "n_images": metrics.n_images}) + "\n")
    print(metrics.miou)
    return {"miou": metrics.miou, "n_images": metrics.n_images}


def cmd_eval_table(a, out: Path) -> dict:
    exp = evalreport.ExperimentConfig.from_file(a.config) if a.config else evalreport.ExperimentConfig()
    result = evalreport.run_experiment(a.action, exp, out, a.workers)
    return {"table": str(out / f"{a.action}.csv"), "rows": len(result["rows"]),
            "config_hash": evalreport.config_hash(exp.to_dict())}


def cmd_eval_cdf(a, out: Path) -> dict:
    manifest = ingest.read_manifest(a.manifest, check_files=False)
    cdf = evalreport.instance_cdf(evalreport.counts_by_split(manifest))
    rows = [{"split": s, "instances": int(v), "cdf": float(c)} for s in sorted(cdf) for v, c in zip(*cdf[s])]
    evalreport.write_table(rows, out / "cdf.csv", out / "cdf.md")
    evalreport.plot_cdf(cdf, out / "cdf.png")
    return {"table": str(out / "cdf.csv"), "plot": str(out / "cdf.png"), "splits": sorted(cdf)}


def cmd_report_overlays(a, out: Path) -> dict:
    truth_m = ingest.read_manifest(a.manifest)
    layers = {"noisy": a.noisy, "corrected": a.corrected, "predicted": a.pred}
    extra = {k: _unions(v) for k, v in layers.items() if v}
    items = []
    for patch, labels in ingest.load_corpus(truth_m)[: a.limit]:
        item = {"truth": labels.union()}
        for k, masks in extra.items():
            if patch.patch_id in masks:
                item[k] = masks[patch.patch_id]
        items.append((patch, item))
    paths = evalreport.emit_overlays(items, out / "overlays")
    return {"overlays": len(paths), "dir": str(out / "overlays")}


COMMANDS = {
    ("datagen", "synth"): cmd_datagen_synth,
    ("ingest", "slice"): cmd_ingest_slice,
    ("ingest", "erode"): cmd_ingest_erode,
    ("ingest", "split"): cmd_ingest_split,
    ("noise", "shift"): cmd_noise_shift,
    ("noise", "omit"): cmd_noise_omit,
    ("train", "acn"): cmd_train,
    ("train", "psn"): cmd_train,
    ("train", "baseline"): cmd_train,
    ("correct", None): cmd_correct,
    ("segment", None): cmd_segment,
    ("eval", "miou"): cmd_eval_miou,
    ("eval", "table2"): cmd_eval_table,
    ("eval", "table3"): cmd_eval_table,
    ("eval", "table4"): cmd_eval_table,
    ("eval", "sizes"): cmd_eval_table,
    ("eval", "cdf"): cmd_eval_cdf,
    ("report", "overlays"): cmd_report_overlays,
}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    a.action = getattr(a, "action", None)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if a.group == "train" and not a.config:
        parser.print_usage(sys.stderr)
        print(f"noisyseg: error: train {a.action} requires --config", file=sys.stderr)
        return 2
    out = Path(a.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[(a.group, a.action)](a, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"noisyseg: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported, not raised: the exit code carries failure
        log.debug("command failed", exc_info=True)
        print(f"noisyseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": f"{a.group} {a.action or ''}".strip(), "status": "ok", **summary},
                     sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
