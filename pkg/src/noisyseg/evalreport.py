"""Experiment harness: sweeps over shift range, alpha and ACN training size,
instance-count CDFs and contour overlays.

Every sweep cell (axis value, arm, seed) is stored as its own JSON file, so an
interrupted sweep resumes where it stopped and a rerun reproduces the same rows.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from noisyseg.geometry import miou
from noisyseg.pipeline import (
    correct_corpus,
    evaluate_baseline,
    predict_corpus_psn,
    run_sequential,
)
from noisyseg.synthdata import ShapeWorldConfig, band_offsets, generate_shape_world, inject_misalignment, shift_instances
from noisyseg.train import TrainConfig, load_checkpoint, save_checkpoint, train_acn, train_baseline, train_psn

log = logging.getLogger(__name__)

# Published reference values, kept as metadata next to desk-scale rows.
REFERENCE_SHIFT = {(0, 5): (0.63, 0.81), (5, 10): (0.40, 0.73), (10, 15): (0.26, 0.46), (15, 20): (0.18, 0.28)}
REFERENCE_ALPHA = {
    "1": {"psn-centroid": 0.90, "baseline": 0.85},
    "0.7": {"psn-centroid": 0.89, "psn-random": 0.83, "baseline": 0.53},
    "0.5": {"psn-centroid": 0.87, "baseline": 0.18},
    "het": {"psn-centroid": 0.87, "baseline": 0.71},
}
REFERENCE_CROP_ALPHA = {"1": {"psn-centroid": 0.92, "baseline": 0.75}, "0.75": {"psn-centroid": 0.91, "baseline": 0.69}}
REFERENCE_SIZES = {"before": 0.55, 240: 0.67, 400: 0.77, 800: 0.81}
SHIFT_BANDS = ((0, 5), (5, 10), (10, 15), (15, 20))
ARMS = ("psn-centroid", "psn-random", "baseline")


# -- hashing and cell storage ---------------------------------------------------------


def config_hash(obj) -> str:
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    elif hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def corpus_hash(pairs) -> str:
    h = hashlib.sha256()
    for patch, labels in pairs:
        h.update(patch.patch_id.encode())
        h.update(np.ascontiguousarray(patch.image).tobytes())
        for inst in labels.instances:
            h.update(str(inst.instance_id).encode())
            h.update(np.packbits(inst.mask).tobytes())
    return h.hexdigest()[:12]


class CellStore:
    """Atomic one-file-per-cell result store under ``root``."""

    def __init__(self, root):
        self.root = Path(root)
        self.touched: list[tuple[str, str]] = []  # ("cell" | "model", key) in access order

    def compute_seconds(self) -> float:
        """Total recorded compute time of every cell and model touched so far."""
        total = 0.0
        for kind, key in dict.fromkeys(self.touched):
            sec = self.seconds(key) if kind == "cell" else self.model_seconds(key)
            total += sec or 0.0
        return total

    def _path(self, key: str) -> Path:
        return self.root / "cells" / (hashlib.sha256(key.encode()).hexdigest()[:16] + ".json")

    def _read(self, key: str):
        p = self._path(key)
        if p.exists():
            data = json.loads(p.read_text())
            if data.get("key") == key:
                return data
        return None

    def get(self, key: str):
        data = self._read(key)
        return None if data is None else data["row"]

    def seconds(self, key: str) -> Optional[float]:
        """Wall time spent computing a cached cell (kept out of the row so tables stay byte-stable)."""
        data = self._read(key)
        return None if data is None else data.get("seconds")

    def put(self, key: str, row: dict, seconds: Optional[float] = None) -> dict:
        p = self._path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps({"key": key, "row": row, "seconds": seconds}, sort_keys=True, indent=1))
        tmp.replace(p)
        return row

    def _model_path(self, key: str) -> Path:
        return self.root / "models" / (hashlib.sha256(key.encode()).hexdigest()[:16] + ".ckpt")

    def model(self, key: str, build: Callable, in_channels: int):
        """Train-once cache for weights; training time goes to a JSON sidecar."""
        p = self._model_path(key)
        self.touched.append(("model", key))
        if p.exists():
            return load_checkpoint(p, in_channels)
        t0 = time.perf_counter()
        w = build()
        p.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(w, p)
        p.with_suffix(".json").write_text(json.dumps({"key": key, "seconds": time.perf_counter() - t0}))
        return w

    def model_seconds(self, key: str) -> Optional[float]:
        side = self._model_path(key).with_suffix(".json")
        return json.loads(side.read_text())["seconds"] if side.exists() else None


def _cell(store: Optional[CellStore], key: str, compute: Callable[[], dict]) -> dict:
    if store is not None:
        store.touched.append(("cell", key))
        row = store.get(key)
        if row is not None:
            return row
    t0 = time.perf_counter()
    row = compute()
    return store.put(key, row, time.perf_counter() - t0) if store is not None else row


@dataclass
class ExperimentGrid:
    axis: str
    values: list
    arms: list = field(default_factory=lambda: ["default"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.axis not in ("shift_range", "alpha", "train_size"):
            raise ValueError(f"unknown axis {self.axis!r}")
        if not self.values or not self.arms:
            raise ValueError("grid needs at least one axis value and one arm")
        if not self.seeds:
            raise ValueError("grid needs at least one seed")

    def cells(self):
        for v in self.values:
            for arm in self.arms:
                for s in self.seeds:
                    yield v, arm, s


# -- tables -----------------------------------------------------------------------


def median_by(rows: Sequence[dict], keys: Sequence[str], value: str) -> dict:
    """Median of ``value`` over rows grouped by ``keys`` (typically over seeds)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {k if len(keys) > 1 else k[0]: statistics.median(v) for k, v in groups.items()}


def write_table(rows: Sequence[dict], csv_path=None, md_path=None, columns=None) -> str:
    """CSV plus a Markdown mirror; returns the CSV text."""
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else ("" if v is None else str(v))
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    text = buf.getvalue()
    for path, content in ((csv_path, text), (md_path, _markdown(rows, columns, fmt))):
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(content)
            tmp.replace(path)
    return text


def _markdown(rows, columns, fmt) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(fmt(r.get(c)) for c in columns) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# -- shift sensitivity ------------------------------------------------------------


def _check_bands(ranges):
    for lo, hi in ranges:
        if lo < 0 or lo > hi:
            raise ValueError(f"bad shift range ({lo}, {hi})")


def shift_sensitivity(acn, corpus, ranges=SHIFT_BANDS, seed: int = 0, threshold: float = 0.5) -> list[dict]:
    """Before/after-correction corpus mIOU for each per-axis shift-magnitude band.

    ``corpus`` holds (Patch, true LabelSet) pairs; shifts are injected here.
    """
    _check_bands(ranges)
    rows = []
    for lo, hi in ranges:
        rng = np.random.default_rng([seed, lo, hi])
        noisy = [(p, shift_instances(l, band_offsets(l.instance_count, lo, hi, rng))) for p, l in corpus]
        truth = {p.patch_id: l for p, l in corpus}
        _, report = correct_corpus(acn, noisy, threshold, truth)
        rows.append({"range_lo": lo, "range_hi": hi, "miou_before": report.miou_before,
                     "miou_after": report.miou_after, "n_fallback": report.n_fallback, "seed": seed})
    return rows


def uniform_shift_eval(acn, corpus, shift_range: int, seed: int = 0, threshold: float = 0.5) -> dict:
    """Correction gain under the training-time noise model (uniform shifts)."""
    rng = np.random.default_rng([seed, 104_729, shift_range])
    noisy = [(p, inject_misalignment(l, shift_range, rng)) for p, l in corpus]
    _, report = correct_corpus(acn, noisy, threshold, {p.patch_id: l for p, l in corpus})
    return {"shift_range": shift_range, "miou_before": report.miou_before, "miou_after": report.miou_after,
            "n_fallback": report.n_fallback, "seed": seed}


# -- alpha sweep ------------------------------------------------------------------


def arm_config(cfg: TrainConfig, arm: str, alpha, seed: int) -> TrainConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    strategy = "random-interior" if arm == "psn-random" else "centroid"
    return cfg.replace(alpha_mode=alpha, point_strategy=strategy, seed=seed)


def evaluate_arm(w, arm: str, test, cfg: TrainConfig, seed: int) -> float:
    """All-instance prediction vs full truth; a random-interior arm is also
    prompted with random interior points at test time."""
    if arm == "baseline":
        return evaluate_baseline(w, test, cfg.threshold).miou
    strategy = "random-interior" if arm == "psn-random" else "centroid"
    rng = np.random.default_rng([seed, 3_571])
    preds = predict_corpus_psn(w, test, strategy, cfg.point_radius, cfg.threshold, rng)
    return miou([(p, l.union()) for p, (_, l) in zip(preds, test) if p is not None]).miou


def alpha_sweep(train, val, test, alphas, arms=ARMS, cfg: Optional[TrainConfig] = None, seeds=(0, 1, 2),
                store: Optional[CellStore] = None, cells=None) -> list[dict]:
    """Train each (alpha, arm, seed) cell and score all-instance predictions.

    ``cells`` optionally restricts the grid to explicit (alpha, arm) pairs.
    """
    cfg = cfg or TrainConfig()
    c_hash = corpus_hash(list(train) + list(val) + list(test))
    todo = cells if cells is not None else [(a, arm) for a in alphas for arm in arms]
    rows = []
    for alpha, arm in todo:
        for seed in seeds:
            run_cfg = arm_config(cfg, arm, alpha, seed)
            h = config_hash(run_cfg)
            key = f"alpha|{alpha}|{arm}|{seed}|{h}|{c_hash}"

            def compute(run_cfg=run_cfg, arm=arm, seed=seed, alpha=alpha, h=h):
                fn = train_baseline if arm == "baseline" else train_psn
                w = fn(train, val, run_cfg)
                return {"alpha": str(alpha), "arm": arm, "seed": seed,
                        "miou": evaluate_arm(w, arm, test, run_cfg, seed),
                        "best_epoch": w.meta["best_epoch"], "config_hash": h, "corpus_hash": c_hash}

            row = _cell(store, key, compute)
            log.info("alpha=%s %s seed=%d mIOU %.3f", alpha, arm, seed, row["miou"])
            rows.append(row)
    return rows


# -- ACN training size ------------------------------------------------------------


def train_size_sweep(pool, val, test, sizes, cfg: TrainConfig, seeds=(0, 1, 2),
                     store: Optional[CellStore] = None) -> list[dict]:
    """Train the ACN on the first ``n`` pool images for each size and report
    corrected test mIOU under uniform shifts of ``cfg.shift_range``."""
    for n in sizes:
        if n < 1:
            raise ValueError(f"training size must be >= 1, got {n}")
        if n > len(pool):
            raise ValueError(f"verified pool has {len(pool)} images, size {n} requested")
    c_hash = corpus_hash(list(pool) + list(val) + list(test))
    rows = []
    for n in sizes:
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            h = config_hash(run_cfg)
            key = f"size|{n}|{seed}|{h}|{c_hash}"

            def compute(n=n, run_cfg=run_cfg, seed=seed, h=h):
                acn = train_acn(pool[:n], val, run_cfg)
                r = uniform_shift_eval(acn, test, run_cfg.shift_range, seed, run_cfg.threshold)
                return {"train_size": n, **r, "config_hash": h, "corpus_hash": c_hash}

            rows.append(_cell(store, key, compute))
    return rows


# -- instance-count CDF -----------------------------------------------------------


def instance_cdf(groups: dict) -> dict:
    """Empirical CDF of per-patch instance counts.

    ``groups`` maps a split name to a sequence of instance counts; returns
    ``{split: (values, cumulative_fractions)}``.
    """
    if not groups or not any(len(v) for v in groups.values()):
        raise ValueError("no patches to count")
    out = {}
    for name, counts in groups.items():
        counts = np.asarray(counts, dtype=int)
        values, freq = np.unique(counts, return_counts=True)
        out[name] = (values, np.cumsum(freq) / counts.size)
    return out


def counts_by_split(manifest) -> dict:
    groups: dict = {}
    for rec in manifest.records:
        groups.setdefault(rec.split, []).append(rec.n_instances)
    return groups


def plot_cdf(cdf: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    for name in sorted(cdf):
        values, cum = cdf[name]
        ax.step(np.r_[0, values], np.r_[0, cum], where="post", label=name)
    ax.set_xlabel("instances per patch")
    ax.set_ylabel("fraction of patches")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


# -- overlays ---------------------------------------------------------------------

LAYER_COLORS = {"truth": (0, 0, 255), "noisy": (255, 0, 0), "corrected": (255, 0, 0), "predicted": (0, 255, 0)}


def _outline(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def render_overlay(patch, layers: dict, scale: int = 4) -> np.ndarray:
    """RGB uint8 image with each layer's mask outline drawn in its color."""
    img = np.clip(patch.image[..., :3] * 255 + 0.5, 0, 255).astype(np.uint8)
    img = img.repeat(scale, 0).repeat(scale, 1)
    for name in ("truth", "noisy", "corrected", "predicted"):
        mask = layers.get(name)
        if mask is None:
            continue
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != patch.shape:
            raise ValueError(f"{name} mask {mask.shape} does not match patch {patch.shape}")
        big = mask.repeat(scale, 0).repeat(scale, 1)
        img[_outline(big)] = LAYER_COLORS[name]
    return img


def emit_overlays(items, out_dir, scale: int = 4) -> list[Path]:
    """Write one PNG per item; ``items`` are ``(patch, {layer: mask})`` pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for patch, layers in items:
        path = out_dir / f"{patch.patch_id}.png"
        Image.fromarray(render_overlay(patch, layers, scale)).save(path, optimize=False)
        paths.append(path)
    return paths


# -- desk-scale setups ------------------------------------------------------------


@dataclass(frozen=True)
class DeskSetup:
    """A synthetic corpus partitioned into the disjoint pools the experiments use."""

    world: ShapeWorldConfig = ShapeWorldConfig()
    n_train: int = 1200
    n_val: int = 300
    n_test: int = 300
    n_verified: int = 480
    n_verified_val: int = 100

    def to_dict(self) -> dict:
        return asdict(self)

    def build(self, workers: int = 1) -> dict:
        sizes = [("train", self.n_train), ("val", self.n_val), ("test", self.n_test),
                 ("verified", self.n_verified), ("verified_val", self.n_verified_val)]
        data = generate_shape_world(self.world, sum(n for _, n in sizes), workers)
        out, start = {}, 0
        for name, n in sizes:
            out[name] = data[start : start + n]
            start += n
        return out


def acn_for_seed(setup_pools, cfg: TrainConfig, seed: int, n_images: int, store: Optional[CellStore] = None):
    pool = setup_pools["verified"][:n_images]
    run_cfg = cfg.replace(seed=seed)
    build = lambda: train_acn(pool, setup_pools["verified_val"], run_cfg)
    if store is None:
        return build()
    key = f"acn|{n_images}|{config_hash(run_cfg)}|{corpus_hash(pool + setup_pools['verified_val'])}"
    return store.model(key, build, pool[0][0].image.shape[2] + 1)


def table2(pools, acn_cfg: TrainConfig, n_images: int, seeds=(0, 1, 2), ranges=SHIFT_BANDS,
           store: Optional[CellStore] = None) -> list[dict]:
    """Per seed: train one ACN, then score the uniform-shift gain and each band."""
    test = pools["test"]
    c_hash = corpus_hash(pools["verified"][:n_images] + test)
    rows = []
    for seed in seeds:
        h = config_hash(acn_cfg.replace(seed=seed))
        key = f"table2|{n_images}|{seed}|{h}|{c_hash}|{list(ranges)}"

        acn = acn_for_seed(pools, acn_cfg, seed, n_images, store)

        def compute(seed=seed, h=h, acn=acn):
            out = [{"band": "uniform", **uniform_shift_eval(acn, test, acn_cfg.shift_range, seed)}]
            for r in shift_sensitivity(acn, test, ranges, seed, acn_cfg.threshold):
                out.append({"band": f"{r['range_lo']}-{r['range_hi']}", **r})
            return {"rows": [{**r, "config_hash": h, "corpus_hash": c_hash} for r in out]}

        rows += _cell(store, key, compute)["rows"]
    return rows


def table4(pools, acn_cfg: TrainConfig, psn_cfg: TrainConfig, n_verified: int, seeds=(0, 1, 2),
           store: Optional[CellStore] = None, out_dir=None, t1_shift_range: Optional[int] = None) -> list[dict]:
    """Sequential run per seed: misaligned T1 from the train pool, T2 from the ACN.

    T1 shifts are uniform in [-t1_shift_range, t1_shift_range] (default: the ACN's range).
    """
    t1_s = acn_cfg.shift_range if t1_shift_range is None else t1_shift_range
    c_hash = corpus_hash(pools["verified"][:n_verified] + pools["train"] + pools["test"])
    rows = []
    for seed in seeds:
        a_cfg, p_cfg = acn_cfg.replace(seed=seed), psn_cfg.replace(seed=seed, alpha_mode="het")
        h = config_hash({"acn": a_cfg.to_dict(), "psn": p_cfg.to_dict(), "t1_shift_range": t1_s})
        key = f"table4|{n_verified}|{seed}|{h}|{c_hash}"

        acn = acn_for_seed(pools, acn_cfg, seed, n_verified, store)

        def compute(seed=seed, a_cfg=a_cfg, p_cfg=p_cfg, h=h, acn=acn):
            rng = np.random.default_rng([seed, 8_191])
            t1 = [(p, inject_misalignment(l, t1_s, rng)) for p, l in pools["train"] + pools["val"]]
            truth = {p.patch_id: l for p, l in pools["train"] + pools["val"]}
            n = len(pools["train"])
            report = run_sequential(
                (pools["verified"][:n_verified], pools["verified_val"]), (t1[:n], t1[n:]), pools["test"],
                a_cfg, p_cfg, noisy_truth=truth,
                out_dir=None if out_dir is None else Path(out_dir) / f"seed{seed}",
                acn=acn,
            )
            return {**{k: v for k, v in report.to_dict().items() if k != "correction"},
                    **{f"correction_{k}": v for k, v in report.correction.items()},
                    "seed": seed, "config_hash": h, "corpus_hash": c_hash}

        rows.append(_cell(store, key, compute))
    return rows


DEFAULT_ALPHA_CELLS = (
    ("1", "psn-centroid"), ("1", "baseline"),
    ("0.7", "psn-centroid"), ("0.7", "psn-random"), ("0.7", "baseline"),
    ("0.5", "psn-centroid"), ("0.5", "baseline"),
    ("het", "psn-centroid"), ("het", "baseline"),
)


@dataclass
class ExperimentConfig:
    """Everything a desk-scale table needs; loadable from YAML."""

    setup: DeskSetup = DeskSetup()
    acn: TrainConfig = field(default_factory=TrainConfig)
    psn: TrainConfig = field(default_factory=lambda: TrainConfig(alpha_mode="het"))
    seeds: tuple = (0, 1, 2)
    acn_images: int = 400
    sizes: tuple = (120, 240, 480)
    alpha_cells: tuple = DEFAULT_ALPHA_CELLS
    shift_bands: tuple = SHIFT_BANDS
    t1_shift_range: Optional[int] = None

    def to_dict(self) -> dict:
        return {"setup": self.setup.to_dict(), "acn": self.acn.to_dict(), "psn": self.psn.to_dict(),
                "seeds": list(self.seeds), "acn_images": self.acn_images, "sizes": list(self.sizes),
                "alpha_cells": [list(c) for c in self.alpha_cells], "shift_bands": [list(b) for b in self.shift_bands],
                "t1_shift_range": self.t1_shift_range}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {"setup", "acn", "psn", "seeds", "acn_images", "sizes", "alpha_cells", "shift_bands",
                                 "t1_shift_range"}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        kw = {}
        if "setup" in d:
            s = dict(d["setup"])
            if "world" in s:
                s["world"] = ShapeWorldConfig(**s["world"])
            kw["setup"] = DeskSetup(**s)
        for k in ("acn", "psn"):
            if k in d:
                kw[k] = TrainConfig.from_dict(d[k])
        for k in ("seeds", "sizes"):
            if k in d:
                kw[k] = tuple(int(v) for v in d[k])
        if "acn_images" in d:
            kw["acn_images"] = int(d["acn_images"])
        if "alpha_cells" in d:
            kw["alpha_cells"] = tuple((str(a), str(arm)) for a, arm in d["alpha_cells"])
        if d.get("t1_shift_range") is not None:
            kw["t1_shift_range"] = int(d["t1_shift_range"])
        if "shift_bands" in d:
            kw["shift_bands"] = tuple((int(lo), int(hi)) for lo, hi in d["shift_bands"])
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        import yaml

        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data)


def _alpha_value(a: str):
    return "het" if a == "het" else float(a)


def run_alpha_table(exp: ExperimentConfig, pools, store: Optional[CellStore] = None) -> list[dict]:
    cells = [(_alpha_value(a), arm) for a, arm in exp.alpha_cells]
    return alpha_sweep(pools["train"], pools["val"], pools["test"], None, cfg=exp.psn, seeds=exp.seeds,
                       store=store, cells=cells)


def summarize_alpha(rows) -> list[dict]:
    med = median_by(rows, ["alpha", "arm"], "miou")
    return [{"alpha": a, "arm": arm, "miou_median": v,
             "reference": REFERENCE_ALPHA.get(a, {}).get(arm)} for (a, arm), v in med.items()]


def summarize_shift(rows) -> list[dict]:
    before = median_by(rows, ["band"], "miou_before")
    after = median_by(rows, ["band"], "miou_after")
    out = []
    for band in before:
        ref = None
        if band != "uniform":
            lo, hi = (int(v) for v in band.split("-"))
            ref = REFERENCE_SHIFT.get((lo, hi))
        out.append({"band": band, "miou_before": before[band], "miou_after": after[band],
                    "reference_before": ref[0] if ref else None, "reference_after": ref[1] if ref else None})
    return out


def summarize_sizes(rows) -> list[dict]:
    after = median_by(rows, ["train_size"], "miou_after")
    before = median_by(rows, ["train_size"], "miou_before")
    return [{"train_size": n, "miou_before": before[n], "miou_after": after[n]} for n in sorted(after)]


def summarize_sequential(rows) -> list[dict]:
    keys = ["t1_label_miou", "psn_t1", "baseline_t1", "t2_label_miou", "psn_t2", "baseline_t2"]
    med = {k: statistics.median(r[k] for r in rows) for k in keys}
    return [
        {"labels": "T1", "label_miou": med["t1_label_miou"], "psn": med["psn_t1"], "baseline": med["baseline_t1"]},
        {"labels": "T2", "label_miou": med["t2_label_miou"], "psn": med["psn_t2"], "baseline": med["baseline_t2"]},
    ]


def run_experiment(name: str, exp: ExperimentConfig, out_dir, workers: int = 1) -> dict:
    """Run one named table, write per-seed and median tables under ``out_dir``,
    and return ``{"rows": ..., "summary": ...}``."""
    out_dir = Path(out_dir)
    store = CellStore(out_dir)
    pools = exp.setup.build(workers)
    if name == "table2":
        rows = table2(pools, exp.acn, exp.acn_images, exp.seeds, exp.shift_bands, store)
        summary = summarize_shift(rows)
    elif name == "table3":
        rows = run_alpha_table(exp, pools, store)
        summary = summarize_alpha(rows)
    elif name == "table4":
        rows = table4(pools, exp.acn, exp.psn, exp.acn_images, exp.seeds, store,
                      t1_shift_range=exp.t1_shift_range)
        summary = summarize_sequential(rows)
    elif name == "sizes":
        rows = train_size_sweep(pools["verified"], pools["verified_val"], pools["test"], exp.sizes, exp.acn,
                                exp.seeds, store)
        summary = summarize_sizes(rows)
    else:
        raise ValueError(f"unknown experiment {name!r}")
    write_table(rows, out_dir / f"{name}_runs.csv", out_dir / f"{name}_runs.md")
    write_table(summary, out_dir / f"{name}.csv", out_dir / f"{name}.md")
    return {"rows": rows, "summary": summary, "compute_seconds": store.compute_seconds()}
