"""lightUNet: a symmetric encoder-decoder with a constant filter count.

Every convolutional block is conv -> batch norm -> ReLU -> dropout. The
encoder halves resolution with 2x2 max-pooling ``depth`` times; the decoder
upsamples with nearest-neighbour x2 followed by a conv block, concatenates the
skip connection and applies ``convs_per_level`` blocks. A 1x1 conv and a
sigmoid produce the per-pixel probability map.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

EPS = 1e-7
CHECKPOINT_MAGIC = b"NSEGCKPT"
CHECKPOINT_VERSION = 1


class NetError(ValueError):
    """Shape or channel mismatch between a network and its input."""


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 3
    filters: int = 48
    depth: int = 4
    kernel: int = 3
    dropout_rate: float = 0.25
    norm: bool = True
    convs_per_level: int = 2

    def __post_init__(self):
        if self.in_channels < 1 or self.filters < 1 or self.depth < 0 or self.convs_per_level < 1:
            raise NetError(f"invalid spec {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise NetError("kernel must be a positive odd integer")
        if not 0 <= self.dropout_rate < 1:
            raise NetError("dropout_rate must lie in [0, 1)")

    def check_input_size(self, h: int, w: int) -> None:
        step = 2**self.depth
        if h % step or w % step:
            raise NetError(f"input {h}x{w} is not divisible by 2**depth = {step}")


def conv_block(spec: NetSpec, cin: int) -> nn.Sequential:
    layers = [nn.Conv2d(cin, spec.filters, spec.kernel, padding=spec.kernel // 2)]
    if spec.norm:
        layers.append(nn.BatchNorm2d(spec.filters))
    layers.append(nn.ReLU(inplace=True))
    if spec.dropout_rate > 0:
        layers.append(nn.Dropout2d(spec.dropout_rate))
    return nn.Sequential(*layers)


def conv_stack(spec: NetSpec, cin: int) -> nn.Sequential:
    blocks = [conv_block(spec, cin)]
    blocks += [conv_block(spec, spec.filters) for _ in range(spec.convs_per_level - 1)]
    return nn.Sequential(*blocks)


class LightUNet(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        f = spec.filters
        self.down = nn.ModuleList(
            conv_stack(spec, spec.in_channels if i == 0 else f) for i in range(spec.depth)
        )
        self.bottleneck = conv_stack(spec, spec.in_channels if spec.depth == 0 else f)
        self.up = nn.ModuleList(conv_block(spec, f) for _ in range(spec.depth))
        self.merge = nn.ModuleList(conv_stack(spec, 2 * f) for _ in range(spec.depth))
        self.head = nn.Conv2d(f, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """N x C x H x W input -> N x H x W logits."""
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, merge in zip(self.up, self.merge):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = merge(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)[:, 0]


@dataclass
class ModelWeights:
    spec: NetSpec
    net: LightUNet
    meta: dict = field(default_factory=dict)

    def blocks(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy()) for k, v in self.net.state_dict().items())

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def copy(self) -> "ModelWeights":
        other = build_net(self.spec, seed=0)
        other.net.load_state_dict(self.net.state_dict())
        other.meta = json.loads(json.dumps(self.meta))
        return other


def build_net(spec: NetSpec, seed: int = 0, input_size: tuple[int, int] | None = None) -> ModelWeights:
    """Initialise a lightUNet deterministically from ``seed``."""
    if input_size is not None:
        spec.check_input_size(*input_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = LightUNet(spec)
    net.eval()
    return ModelWeights(spec, net, {"seed": seed, "epochs_seen": 0})


def _to_tensor(spec: NetSpec, x) -> torch.Tensor:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise NetError(f"expected H x W x C or N x H x W x C input, got {x.shape}")
    if x.shape[-1] != spec.in_channels:
        raise NetError(f"network expects {spec.in_channels} channels, input has {x.shape[-1]}")
    spec.check_input_size(x.shape[1], x.shape[2])
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32))


def predict(w: ModelWeights, x, batch_size: int = 32) -> np.ndarray:
    """Eval-mode probabilities for an N x H x W x C batch (returns N x H x W)."""
    t = _to_tensor(w.spec, x)
    was_training = w.net.training
    w.net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(t), batch_size):
            out.append(torch.sigmoid(w.net(t[i : i + batch_size]).double()))
    w.net.train(was_training)
    return torch.cat(out).clamp(EPS, 1 - EPS).numpy()


def forward(w: ModelWeights, x, train_mode: bool = False) -> np.ndarray:
    """Probability map for one H x W x C input (or a batch).

    Eval mode is deterministic. Train mode applies dropout and batch
    statistics, and updates the normalization running averages.
    """
    single = np.asarray(x).ndim == 3
    if not train_mode:
        out = predict(w, x)
    else:
        t = _to_tensor(w.spec, x)
        was_training = w.net.training
        w.net.train()
        with torch.no_grad():
            out = torch.sigmoid(w.net(t).double()).clamp(EPS, 1 - EPS).numpy()
        w.net.train(was_training)
    return out[0] if single else out


def bce_loss(pred, target, eps: float = EPS):
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps].

    Works on numpy arrays (returns a float) or torch tensors (returns a
    differentiable scalar).
    """
    if isinstance(pred, torch.Tensor):
        target = torch.as_tensor(target, dtype=pred.dtype)
        if pred.shape != target.shape:
            raise NetError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
        p = pred.clamp(eps, 1 - eps)
        return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise NetError(f"shape mismatch {p.shape} vs {t.shape}")
    p = np.clip(p, eps, 1 - eps)
    return float(-(t * np.log(p) + (1 - t) * np.log1p(-p)).mean())


# -- checkpoint container ------------------------------------------------------
#
# layout: MAGIC | u32 header length (LE) | JSON header | float32 LE blocks
# header: {"version", "spec", "meta", "blocks": [{"name", "shape", "offset", "kind"}]}


def save_weights(w: ModelWeights, path) -> None:
    blocks, payload, offset = [], io.BytesIO(), 0
    for name, arr in w.blocks().items():
        kind = "int" if arr.dtype.kind in "iu" else "float"
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "kind": kind})
        payload.write(data)
        offset += len(data)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "spec": asdict(w.spec), "meta": w.meta,
         "blocks": blocks, "payload_bytes": offset},
        sort_keys=True,
    ).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())
    tmp.replace(path)


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 4:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    try:
        header = json.loads(raw[pos : pos + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    body = raw[pos + hlen :]
    if len(body) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: corrupt checkpoint (payload {len(body)} bytes, expected {header['payload_bytes']})"
        )
    w = build_net(NetSpec(**header["spec"]))
    state = OrderedDict()
    for b in header["blocks"]:
        n = int(np.prod(b["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=b["offset"]).reshape(b["shape"])
        arr = arr.astype(np.int64) if b["kind"] == "int" else arr.astype(np.float32)
        state[b["name"]] = torch.from_numpy(arr)
    try:
        w.net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter blocks do not match spec") from exc
    w.meta = header["meta"]
    return w
