"""Training loops for the baseline lightUNet, the alignment-correction network
(ACN) and the pointer segmentation network (PSN).

All randomness (sample order, shifts, alpha draws, prompt points, dropout)
derives from ``TrainConfig.seed``, so equal configs give equal runs.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import yaml

from noisyseg.geometry import miou, translate_mask
from noisyseg.netcore import (
    CheckpointError,
    ModelWeights,
    NetSpec,
    bce_loss,
    build_net,
    load_weights,
    predict,
    save_weights,
)
from noisyseg.records import LabelSet
from noisyseg.synthdata import (
    POINT_STRATEGIES,
    build_point_channel,
    parse_alpha_mode,
    sample_alpha,
    select_instances,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_miou", "wall_seconds")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer_kind: str = "adam"
    seed: int = 0
    alpha_mode: Union[float, str] = 1.0
    point_strategy: str = "centroid"
    point_radius: int = 2
    shift_range: int = 10
    patience: Optional[int] = None
    threshold: float = 0.5
    # network shape; input channels are fixed by the task
    filters: int = 48
    depth: int = 4
    kernel: int = 3
    dropout_rate: float = 0.25
    norm: bool = True
    convs_per_level: int = 2

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.shift_range < 0:
            raise ValueError("shift_range must be >= 0")
        if self.optimizer_kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer_kind!r}")
        if self.point_strategy not in POINT_STRATEGIES:
            raise ValueError(f"unknown point strategy {self.point_strategy!r}")
        self.alpha_mode = parse_alpha_mode(self.alpha_mode)

    def net_spec(self, in_channels: int) -> NetSpec:
        return NetSpec(in_channels, self.filters, self.depth, self.kernel,
                       self.dropout_rate, self.norm, self.convs_per_level)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a YAML (or JSON) mapping of TrainConfig fields."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(data)


# -- sample construction ---------------------------------------------------------


def stack_input(image: np.ndarray, extra: np.ndarray) -> np.ndarray:
    return np.concatenate([image, extra[..., None].astype(np.float32)], axis=-1)


def acn_epoch_samples(corpus, shift_range: int, rng: np.random.Generator):
    """One sample per (image, instance): [image | shifted mask] -> true mask.

    Returns ``(inputs, targets, offsets, skipped)``; instances that shift
    entirely out of frame are skipped and counted.
    """
    inputs, targets, offsets, skipped = [], [], [], 0
    for patch, labels in corpus:
        for inst in labels.instances:
            if not inst.mask.any():
                continue
            dx, dy = (int(v) for v in rng.integers(-shift_range, shift_range + 1, 2))
            shifted = translate_mask(inst.mask, dx, dy)
            if not shifted.any():
                skipped += 1
                continue
            inputs.append(stack_input(patch.image, shifted))
            targets.append(inst.mask)
            offsets.append((dx, dy))
    return inputs, targets, offsets, skipped


def nonempty(labels: LabelSet) -> LabelSet:
    return labels.with_instances(i for i in labels.instances if i.mask.any())


def psn_sample(patch, labels: LabelSet, cfg: TrainConfig, rng: np.random.Generator):
    """Draw alpha, keep that fraction of instances, prompt them, and target
    only their union. Returns ``(input, target, alpha, selected)``."""
    alpha = sample_alpha(cfg.alpha_mode, rng)
    sub = select_instances(labels, alpha, rng)
    prompt = build_point_channel(sub, cfg.point_strategy, cfg.point_radius, rng)
    return stack_input(patch.image, prompt.channel), sub.union(), alpha, sub


def baseline_sample(patch, labels: LabelSet, cfg: TrainConfig, rng: np.random.Generator):
    """Image in, union of the available (alpha-selected) instances as target."""
    alpha = sample_alpha(cfg.alpha_mode, rng)
    if labels.instance_count == 0:
        return patch.image, np.zeros(labels.shape, dtype=bool), alpha, labels
    sub = select_instances(labels, alpha, rng)
    return patch.image, sub.union(), alpha, sub


# -- validation ------------------------------------------------------------------


def full_prompt_inputs(corpus, radius: int = 2, strategy: str = "centroid", rng=None):
    """PSN inputs prompting every nonempty instance of each image."""
    kept, inputs = [], []
    for patch, labels in corpus:
        labels = nonempty(labels)
        if labels.instance_count == 0:
            continue
        prompt = build_point_channel(labels, strategy, radius, rng)
        inputs.append(stack_input(patch.image, prompt.channel))
        kept.append((patch, labels))
    return kept, inputs


def val_miou_baseline(w: ModelWeights, corpus, threshold: float = 0.5) -> float:
    probs = predict(w, np.stack([p.image for p, _ in corpus]))
    return miou([(pr > threshold, l.union()) for pr, (_, l) in zip(probs, corpus)]).miou


def val_miou_psn(w: ModelWeights, corpus, threshold: float = 0.5, radius: int = 2) -> float:
    kept, inputs = full_prompt_inputs(corpus, radius)
    probs = predict(w, np.stack(inputs))
    return miou([(pr > threshold, l.union()) for pr, (_, l) in zip(probs, kept)]).miou


def fixed_acn_val_set(corpus, shift_range: int, seed: int):
    """Deterministic shifted validation inputs grouped by image."""
    rng = np.random.default_rng([seed, 7_919])
    groups = []
    for patch, labels in corpus:
        inputs, targets, _, _ = acn_epoch_samples([(patch, labels)], shift_range, rng)
        if inputs:
            groups.append((np.stack(inputs), targets))
    return groups


def val_miou_acn(w: ModelWeights, groups, threshold: float = 0.5) -> float:
    pairs = []
    for inputs, targets in groups:
        probs = predict(w, inputs)
        pred = [pr > threshold if (pr > threshold).any() else x[..., -1] > 0.5
                for pr, x in zip(probs, inputs)]
        pairs.append((pred, targets))
    return miou(pairs).miou


# -- generic loop ----------------------------------------------------------------


def _optimizer(cfg: TrainConfig, params):
    if cfg.optimizer_kind == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)


def write_log(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"], f"{row['train_loss']:.8f}", f"{row['val_miou']:.8f}",
                             f"{row['wall_seconds']:.3f}"])


def fit(
    w: ModelWeights,
    cfg: TrainConfig,
    epoch_data: Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]],
    validate: Callable[[ModelWeights], float],
    task: str,
    log_path=None,
) -> ModelWeights:
    """Minibatch BCE training with best-validation-mIOU checkpointing.

    ``epoch_data(epoch, rng)`` returns this epoch's N x H x W x C inputs and
    N x H x W targets; the same ``rng`` then shuffles them.
    """
    history = []
    best_val, best_state, best_epoch = -math.inf, None, 0
    stale = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        opt = _optimizer(cfg, w.net.parameters())
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            x, y = epoch_data(epoch, rng)
            if len(x) == 0:
                raise ValueError(f"{task}: no training samples in epoch {epoch}")
            order = rng.permutation(len(x))
            w.net.train()
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb = torch.from_numpy(np.ascontiguousarray(x[idx].transpose(0, 3, 1, 2)))
                yb = torch.from_numpy(y[idx].astype(np.float32))
                opt.zero_grad()
                loss = bce_loss(torch.sigmoid(w.net(xb)), yb)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            w.net.eval()
            val = validate(w)
            history.append({"epoch": epoch, "train_loss": total / len(x), "val_miou": val,
                            "wall_seconds": time.perf_counter() - t0})
            log.info("%s epoch %d loss %.4f val mIOU %.4f", task, epoch, total / len(x), val)
            if log_path is not None:
                write_log(history, log_path)
            if val > best_val:
                best_val, best_epoch, stale = val, epoch, 0
                best_state = copy.deepcopy(w.net.state_dict())
            else:
                stale += 1
                if cfg.patience is not None and stale >= cfg.patience:
                    break
    if best_state is not None:
        w.net.load_state_dict(best_state)
    w.net.eval()
    w.meta.update(
        task=task,
        seed=cfg.seed,
        epochs_seen=w.meta.get("epochs_seen", 0) + len(history),
        best_epoch=best_epoch,
        best_val_miou=None if best_state is None else best_val,
        history=[{k: v for k, v in h.items() if k != "wall_seconds"} for h in history],
        config=cfg.to_dict(),
    )
    return w


def _require(corpus, name):
    if not corpus:
        raise ValueError(f"{name} split is empty")


def _channels(corpus) -> int:
    return corpus[0][0].image.shape[2]


# -- trainers --------------------------------------------------------------------


def train_baseline(train, val, cfg: TrainConfig, log_path=None, alpha_log: list | None = None) -> ModelWeights:
    """Plain image-to-union segmentation; under alpha < 1 the target only
    holds the selected instances, so omitted objects are taught as background."""
    _require(train, "train")
    _require(val, "val")
    w = build_net(cfg.net_spec(_channels(train)), cfg.seed, train[0][0].shape)

    def epoch_data(epoch, rng):
        xs, ys = [], []
        for patch, labels in train:
            x, y, alpha, _ = baseline_sample(patch, labels, cfg, rng)
            xs.append(x)
            ys.append(y)
            if alpha_log is not None:
                alpha_log.append((epoch, patch.patch_id, alpha))
        return np.stack(xs), np.stack(ys)

    return fit(w, cfg, epoch_data, lambda m: val_miou_baseline(m, val, cfg.threshold), "baseline", log_path)


def train_acn(train, val, cfg: TrainConfig, log_path=None) -> ModelWeights:
    """Learn to map [image | misaligned instance mask] to the aligned mask.

    Shifts are redrawn uniformly in [-s, s]^2 per instance every epoch.
    """
    _require(train, "train")
    _require(val, "val")
    for patch, labels in list(train) + list(val):
        bad = [i.provenance for i in labels.instances if i.provenance not in ("true", "verified")]
        if bad:
            raise ValueError(f"ACN needs verified masks; {patch.patch_id} has {bad[0]!r}")
    w = build_net(cfg.net_spec(_channels(train) + 1), cfg.seed, train[0][0].shape)
    groups = fixed_acn_val_set(val, cfg.shift_range, cfg.seed)
    skipped_total = []

    def epoch_data(epoch, rng):
        x, y, _, skipped = acn_epoch_samples(train, cfg.shift_range, rng)
        skipped_total.append(skipped)
        return np.stack(x), np.stack(y)

    w = fit(w, cfg, epoch_data, lambda m: val_miou_acn(m, groups, cfg.threshold), "acn", log_path)
    w.meta["skipped_samples"] = int(sum(skipped_total))
    return w


def train_psn(train, val, cfg: TrainConfig, log_path=None, alpha_log: list | None = None) -> ModelWeights:
    """Point-prompted training: per image and epoch draw alpha, prompt the
    selected instances and supervise on their union only."""
    train = [(p, nonempty(l)) for p, l in train]
    empty = [p.patch_id for p, l in train if l.instance_count == 0]
    if empty:
        log.warning("train_psn: skipping %d images without instances", len(empty))
    train = [(p, l) for p, l in train if l.instance_count > 0]
    _require(train, "train")
    _require(val, "val")
    w = build_net(cfg.net_spec(_channels(train) + 1), cfg.seed, train[0][0].shape)

    def epoch_data(epoch, rng):
        xs, ys = [], []
        for patch, labels in train:
            x, y, alpha, _ = psn_sample(patch, labels, cfg, rng)
            xs.append(x)
            ys.append(y)
            if alpha_log is not None:
                alpha_log.append((epoch, patch.patch_id, alpha))
        return np.stack(xs), np.stack(ys)

    return fit(w, cfg, epoch_data,
               lambda m: val_miou_psn(m, val, cfg.threshold, cfg.point_radius), "psn", log_path)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(w: ModelWeights, path) -> None:
    save_weights(w, path)


def load_checkpoint(path, in_channels: Optional[int] = None) -> ModelWeights:
    """Load weights; ``in_channels`` guards against using, say, 3-channel
    baseline weights for a 4-channel prompted task."""
    w = load_weights(path)
    if in_channels is not None and w.spec.in_channels != in_channels:
        raise CheckpointError(
            f"{path}: checkpoint expects {w.spec.in_channels} input channels, task needs {in_channels}"
        )
    return w
