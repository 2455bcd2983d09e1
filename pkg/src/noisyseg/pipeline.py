"""Inference with trained ACN/PSN weights and the two-stage sequential run.

Stage 1 trains the ACN on a small verified set and uses it to realign a large
set of misaligned labels (T1), producing corrected labels (T2). Stage 2 trains
the PSN and the baseline on T1 and on T2 and scores all four on a clean test
set.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from noisyseg.geometry import Metrics, iou, miou
from noisyseg.netcore import ModelWeights, NetError, predict
from noisyseg.records import InstanceAnnotation, LabelSet, Patch, PointPrompt
from noisyseg.synthdata import build_point_channel, render_points

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A sequential-run stage failed; the message names the stage."""


def _stack(image, channel) -> np.ndarray:
    return np.concatenate([image, channel[..., None].astype(np.float32)], axis=-1)


def _check_channels(w: ModelWeights, patch: Patch, role: str) -> None:
    need = patch.image.shape[2] + 1
    if w.spec.in_channels != need:
        raise NetError(f"{role} weights take {w.spec.in_channels} channels; image plus mask needs {need}")


# -- label correction ----------------------------------------------------------------


@dataclass(frozen=True)
class InstanceCorrection:
    patch_id: str
    instance_id: int
    input_offset: Optional[tuple[int, int]]
    fallback: bool
    iou_before: Optional[float] = None
    iou_after: Optional[float] = None


@dataclass
class CorrectionReport:
    """Per-instance outcomes plus per-image union pairs for corpus mIOU.

    ``miou_before``/``miou_after`` are None unless truth was supplied.
    """

    instances: list[InstanceCorrection] = field(default_factory=list)
    before_pairs: list = field(default_factory=list, repr=False)
    after_pairs: list = field(default_factory=list, repr=False)

    @property
    def n_fallback(self) -> int:
        return sum(i.fallback for i in self.instances)

    @property
    def miou_before(self) -> Optional[float]:
        return miou(self.before_pairs).miou if self.before_pairs else None

    @property
    def miou_after(self) -> Optional[float]:
        return miou(self.after_pairs).miou if self.after_pairs else None

    def extend(self, other: "CorrectionReport") -> "CorrectionReport":
        self.instances += other.instances
        self.before_pairs += other.before_pairs
        self.after_pairs += other.after_pairs
        return self

    def summary(self) -> dict:
        return {"n_instances": len(self.instances), "n_fallback": self.n_fallback,
                "miou_before": self.miou_before, "miou_after": self.miou_after}


def correct_labels(
    acn: ModelWeights,
    patch: Patch,
    noisy: LabelSet,
    threshold: float = 0.5,
    truth: Optional[LabelSet] = None,
) -> tuple[LabelSet, CorrectionReport]:
    """Realign each instance independently.

    An instance whose binarized prediction is empty keeps its noisy mask
    (flagged as a fallback); empty input masks pass through the same way.
    """
    _check_channels(acn, patch, "ACN")
    report = CorrectionReport()
    todo = [i for i, inst in enumerate(noisy.instances) if inst.mask.any()]
    probs = predict(acn, np.stack([_stack(patch.image, noisy.instances[i].mask) for i in todo])) if todo else []
    pred = dict(zip(todo, probs))
    true_masks = truth.by_id() if truth is not None else {}
    out = []
    for i, inst in enumerate(noisy.instances):
        mask = pred[i] > threshold if i in pred else None
        fallback = mask is None or not mask.any()
        if fallback:
            mask = inst.mask.copy()
        out.append(InstanceAnnotation(inst.instance_id, mask, "corrected", inst.applied_offset))
        t = true_masks.get(inst.instance_id)
        report.instances.append(InstanceCorrection(
            patch.patch_id, inst.instance_id, inst.applied_offset, fallback,
            None if t is None else iou(inst.mask, t.mask),
            None if t is None else iou(mask, t.mask),
        ))
    corrected = noisy.with_instances(out)
    if truth is not None:
        report.before_pairs.append((noisy.union(), truth.union()))
        report.after_pairs.append((corrected.union(), truth.union()))
    return corrected, report


def correct_corpus(acn: ModelWeights, pairs, threshold: float = 0.5, truth: Optional[dict] = None):
    """Apply ``correct_labels`` over (patch, noisy) pairs; ``truth`` maps patch id to LabelSet."""
    report, out = CorrectionReport(), []
    for patch, noisy in pairs:
        t = truth.get(patch.patch_id) if truth is not None else None
        fixed, r = correct_labels(acn, patch, noisy, threshold, t)
        out.append((patch, fixed))
        report.extend(r)
    return out, report


# -- prompted segmentation ----------------------------------------------------------


def segment(psn: ModelWeights, patch: Patch, points: PointPrompt, threshold: float = 0.5) -> np.ndarray:
    """Binary mask of the prompted instances."""
    _check_channels(psn, patch, "PSN")
    if not points.points:
        raise ValueError(f"empty point prompt for {patch.patch_id}")
    if tuple(points.shape) != tuple(patch.shape):
        raise ValueError(f"prompt shape {points.shape} does not match patch {patch.shape}")
    return predict(psn, _stack(patch.image, points.channel)[None])[0] > threshold


def prompt_from_points(patch_id: str, points, shape, radius: int = 2) -> PointPrompt:
    pts = tuple((int(p[0]), int(p[1]), int(p[2]) if len(p) > 2 else -1) for p in points)
    return PointPrompt(patch_id, pts, render_points(pts, shape, radius))


def predict_corpus_psn(psn: ModelWeights, pairs, strategy="centroid", radius=2, threshold=0.5, rng=None):
    """Prompt every nonempty instance of each image; returns a list of masks
    (None for images without any instance to prompt)."""
    inputs, where = [], []
    for k, (patch, labels) in enumerate(pairs):
        _check_channels(psn, patch, "PSN")
        labels = labels.with_instances(i for i in labels.instances if i.mask.any())
        if labels.instance_count:
            prompt = build_point_channel(labels, strategy, radius, rng)
            inputs.append(_stack(patch.image, prompt.channel))
            where.append(k)
    out = [None] * len(pairs)
    if inputs:
        for k, p in zip(where, predict(psn, np.stack(inputs))):
            out[k] = p > threshold
    return out


def evaluate_psn(psn: ModelWeights, test, radius: int = 2, threshold: float = 0.5) -> Metrics:
    """mIOU of all-instance centroid-prompted predictions against full truth."""
    preds = predict_corpus_psn(psn, test, "centroid", radius, threshold)
    return miou([(p, l.union()) for p, (_, l) in zip(preds, test) if p is not None])


def evaluate_baseline(w: ModelWeights, test, threshold: float = 0.5) -> Metrics:
    probs = predict(w, np.stack([p.image for p, _ in test]))
    return miou([(pr > threshold, l.union()) for pr, (_, l) in zip(probs, test)])


def label_miou(pairs, truth: dict) -> float:
    """Agreement of a training label set with the true labels, per image."""
    return miou([(l.union(), truth[p.patch_id].union()) for p, l in pairs]).miou


# -- sequential run -----------------------------------------------------------------

REFERENCE_TABLE4 = {
    "T1": {"label_miou": 0.57, "psn": 0.54, "baseline": 0.17},
    "T2": {"label_miou": 0.81, "psn": 0.79, "baseline": 0.74},
}


@dataclass
class SequentialReport:
    t1_label_miou: float
    psn_t1: float
    baseline_t1: float
    t2_label_miou: float
    psn_t2: float
    baseline_t2: float
    correction: dict = field(default_factory=dict)
    seed: int = 0

    def rows(self) -> list[dict]:
        return [
            {"labels": "T1", "label_miou": self.t1_label_miou, "psn": self.psn_t1, "baseline": self.baseline_t1},
            {"labels": "T2", "label_miou": self.t2_label_miou, "psn": self.psn_t2, "baseline": self.baseline_t2},
        ]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["labels", "label_miou", "psn", "baseline", "seed"])
        for r in self.rows():
            writer.writerow([r["labels"], f"{r['label_miou']:.4f}", f"{r['psn']:.4f}", f"{r['baseline']:.4f}", self.seed])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_markdown(self) -> str:
        lines = ["| Training labels | Label mIOU | PSN | lightUNet |", "|---|---|---|---|"]
        for r in self.rows():
            lines.append(f"| {r['labels']} | {r['label_miou']:.2f} | {r['psn']:.2f} | {r['baseline']:.2f} |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return asdict(self)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise PipelineError(f"sequential stage '{name}' failed: {exc}") from exc


def run_sequential(
    verified: tuple[list, list],
    noisy: tuple[list, list],
    test: list,
    acn_cfg,
    psn_cfg,
    baseline_cfg=None,
    noisy_truth: Optional[dict] = None,
    out_dir=None,
    acn: Optional[ModelWeights] = None,
) -> SequentialReport:
    """Run both stages end to end.

    ``verified`` and ``noisy`` are (train, val) lists of (Patch, LabelSet);
    ``noisy_truth`` maps noisy patch ids to their true labels and is needed
    for the label-mIOU columns. With ``out_dir`` the ACN checkpoint and the
    corrected T2 corpus are written there. A pre-trained ``acn`` skips
    stage-1 training.
    """
    from noisyseg import ingest, train as trainer

    ids = [{p.patch_id for p, _ in part} for part in (verified[0] + verified[1], noisy[0] + noisy[1], test)]
    if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
        raise PipelineError("verified, noisy and test corpora must be disjoint")
    if noisy_truth is None:
        raise PipelineError("noisy_truth is required to score the training labels")
    baseline_cfg = baseline_cfg or psn_cfg
    out_dir = Path(out_dir) if out_dir is not None else None

    if acn is None:
        acn = _stage("train-acn", trainer.train_acn, verified[0], verified[1], acn_cfg)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        trainer.save_checkpoint(acn, out_dir / "acn.ckpt")
    t1_train, t1_val = noisy
    t2_train, rep = _stage("correct", correct_corpus, acn, t1_train, acn_cfg.threshold, noisy_truth)
    t2_val, _ = _stage("correct", correct_corpus, acn, t1_val, acn_cfg.threshold)
    if out_dir is not None:
        splits = {p.patch_id: "train" for p, _ in t2_train} | {p.patch_id: "val" for p, _ in t2_val}
        _stage("materialize-t2", ingest.write_corpus, t2_train + t2_val, out_dir / "t2", splits)

    scores = {}
    for tag, (tr, va) in {"T1": (t1_train, t1_val), "T2": (t2_train, t2_val)}.items():
        psn = _stage(f"train-psn-{tag}", trainer.train_psn, tr, va, psn_cfg)
        base = _stage(f"train-baseline-{tag}", trainer.train_baseline, tr, va, baseline_cfg)
        scores[tag] = (
            label_miou(tr, noisy_truth),
            _stage(f"eval-psn-{tag}", evaluate_psn, psn, test, psn_cfg.point_radius, psn_cfg.threshold).miou,
            _stage(f"eval-baseline-{tag}", evaluate_baseline, base, test, baseline_cfg.threshold).miou,
        )
        log.info("%s: labels %.3f psn %.3f baseline %.3f", tag, *scores[tag])
    report = SequentialReport(*scores["T1"], *scores["T2"], correction=rep.summary(), seed=psn_cfg.seed)
    if out_dir is not None:
        report.to_csv(out_dir / "table4.csv")
        (out_dir / "table4.md").write_text(report.to_markdown())
    return report
