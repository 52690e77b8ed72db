"""Segmentation generators (teacher/student presets), the patch
discriminator, freezing, parameter snapshots and the checkpoint format.

Networks are small fully convolutional stacks with GroupNorm, sized to
train in minutes on CPU while keeping a real capacity gap between the
teacher and student presets. Both heads are upsampled to input resolution
inside the model, so losses and metrics always operate at label
resolution.

Checkpoint format: `<stem>.json` header listing {name, shape, dtype,
offset} per tensor plus config and iteration, and a sidecar `<stem>.bin`
blob of little-endian float32 values in header order. Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class SegNetConfig:
    num_classes: int = 6
    base_width: int = 16
    depth: int = 4
    feature_tap_width: int = 32
    input_size: tuple = (64, 64)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (tap sits before the main head)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.base_width, self.feature_tap_width) < 1:
            raise ValueError("widths must be positive")


# Toy presets: the teacher is deeper and wider but shares the tap width
# and output shape with the student, so MSE distillation needs no adapter.
TEACHER_PRESET = SegNetConfig(num_classes=6, base_width=32, depth=8,
                              feature_tap_width=32, input_size=(64, 64))
STUDENT_PRESET = SegNetConfig(num_classes=6, base_width=16, depth=4,
                              feature_tap_width=32, input_size=(64, 64))


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 6
    width: int = 32
    depth: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.in_channels < 1:
            raise ValueError("invalid discriminator config")


@dataclass
class SegNetOutput:
    """Per-batch forward result: tap features plus both logit heads at
    input resolution. Layout is channels-last to match the loss API."""

    feature: torch.Tensor      # (N, h, w, D)
    aux_logits: torch.Tensor   # (N, H, W, C)
    main_logits: torch.Tensor  # (N, H, W, C)


@dataclass
class ParamSnapshot:
    params: dict
    iteration: int = 0

    def __eq__(self, other):
        if not isinstance(other, ParamSnapshot):
            return NotImplemented
        if self.iteration != other.iteration:
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k])
                   for k in self.params)


def _norm(channels: int) -> nn.Module:
    groups = 1
    for g in (8, 4, 2):
        if channels % g == 0:
            groups = g
            break
    return nn.GroupNorm(groups, channels)


class _ConvBlock(nn.Module):
    """3x3 conv + GroupNorm + ReLU, with an identity skip whenever the
    shapes allow (stride 1, matching widths) so deep stacks keep a clean
    gradient path -- the full-scale backbones this stands in for are
    residual networks."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = _norm(out_ch)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        y = F.relu(self.norm(self.conv(x)))
        return x + y if self.residual else y


class SegmentationNet(nn.Module):
    """Encoder of `depth` conv blocks with a feature tap before the last
    block; a 1x1 aux classifier reads the tap, the main head reads the
    final block. Strides at blocks 1 and 2 put the tap at 1/4 resolution.
    """

    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen = False
        # Blocks 0..depth-2 form the encoder; the last of them is the tap
        # (width forced to feature_tap_width so presets line up for MSE
        # distillation). Strides at blocks 1 and 2 put the tap at 1/4
        # resolution for any depth >= 4.
        widths = [cfg.base_width * (2 if i >= 2 else 1)
                  for i in range(cfg.depth - 2)]
        widths.append(cfg.feature_tap_width)
        blocks = []
        in_ch = 3
        for i, out_ch in enumerate(widths):
            stride = 2 if i in (1, 2) else 1
            blocks.append(_ConvBlock(in_ch, out_ch, stride))
            in_ch = out_ch
        self.encoder = nn.Sequential(*blocks)
        self.aux_head = nn.Conv2d(cfg.feature_tap_width, cfg.num_classes, 1)
        self.final_block = _ConvBlock(cfg.feature_tap_width,
                                      cfg.feature_tap_width)
        self.main_head = nn.Conv2d(cfg.feature_tap_width, cfg.num_classes, 1)

    def forward(self, images: torch.Tensor) -> SegNetOutput:
        """images: (N, H, W, 3) in [0, 1]."""
        x = images.movedim(-1, 1)
        h, w = x.shape[-2:]
        feat = self.encoder(x)
        aux = self.aux_head(feat)
        main = self.main_head(self.final_block(feat))
        aux = F.interpolate(aux, size=(h, w), mode="bilinear", align_corners=True)
        main = F.interpolate(main, size=(h, w), mode="bilinear", align_corners=True)
        return SegNetOutput(
            feature=feat.movedim(1, -1),
            aux_logits=aux.movedim(1, -1),
            main_logits=main.movedim(1, -1),
        )

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class Discriminator(nn.Module):
    """Patch discriminator over probability maps: strided 4x4 convs with
    leaky ReLU and a sigmoid head emitting per-pixel P(source).

    With kernel 4, stride 2, padding 1 each layer maps H -> floor(H/2),
    so the output grid is floor(H / 2**depth) for even inputs."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = cfg.in_channels
        ch = cfg.width
        for i in range(cfg.depth):
            layers.append(nn.Conv2d(in_ch, ch, 4, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch = ch
            ch = min(ch * 2, cfg.width * 4)
        layers.append(nn.Conv2d(in_ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, probs: torch.Tensor) -> torch.Tensor:
        """probs: (N, H, W, C) -> per-pixel source probability (N, h', w')."""
        if probs.shape[-1] != self.cfg.in_channels:
            raise ValueError(
                f"discriminator expects {self.cfg.in_channels} channels, "
                f"got {probs.shape[-1]}")
        x = probs.movedim(-1, 1)
        return torch.sigmoid(self.net(x)).squeeze(1)


def build_segnet(cfg: SegNetConfig, seed: int) -> SegmentationNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = SegmentationNet(cfg)
    return net


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> Discriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Discriminator(cfg)


def freeze(net: nn.Module) -> nn.Module:
    """Freeze in place: eval mode, no parameter gradients, flag set."""
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    net.frozen = True
    return net


def snapshot(net: nn.Module, iteration: int = 0) -> ParamSnapshot:
    params = {name: p.detach().cpu().numpy().copy()
              for name, p in net.state_dict().items()}
    return ParamSnapshot(params=params, iteration=iteration)


def load_snapshot(net: nn.Module, snap: ParamSnapshot) -> None:
    state = {name: torch.from_numpy(arr.copy())
             for name, arr in snap.params.items()}
    net.load_state_dict(state)


def save_checkpoint(path, net: nn.Module, iteration: int = 0,
                    extra: dict | None = None) -> None:
    """Write `<path>.json` + `<path>.bin` (little-endian float32 blob)."""
    stem = Path(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, p in net.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
        })
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = {
        "iteration": iteration,
        "config": asdict(getattr(net, "cfg")),
        "arch": type(net).__name__,
        "tensors": entries,
    }
    if extra:
        header["extra"] = extra
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1))
    stem.with_suffix(".bin").write_bytes(b"".join(blobs))


def read_checkpoint_header(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(path, net: nn.Module | None = None):
    """Load a checkpoint; if `net` is None, rebuild it from the stored
    config. Returns (net, iteration)."""
    stem = Path(path)
    header = read_checkpoint_header(stem)
    blob = stem.with_suffix(".bin").read_bytes()
    state = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n,
                            offset=e["offset"]).reshape(shape)
        state[e["name"]] = torch.from_numpy(arr.copy())
    if net is None:
        if header["arch"] == "SegmentationNet":
            cfg = SegNetConfig(**{**header["config"],
                                  "input_size": tuple(header["config"]["input_size"])})
            net = SegmentationNet(cfg)
        elif header["arch"] == "Discriminator":
            net = Discriminator(DiscriminatorConfig(**header["config"]))
        else:
            raise ValueError(f"unknown checkpoint arch {header['arch']!r}")
    net.load_state_dict(state)
    return net, header["iteration"]
