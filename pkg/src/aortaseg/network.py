"""Plain and attention-gated 3D U-Nets.

The two variants share every non-gate parameter name, so a plain network
can be loaded from an attention checkpoint (minus gates) and compared
directly. Attention gates compute additive-attention coefficients
alpha = sigmoid(psi . relu(W_x x + W_g g + b_g) + b_psi) in [0, 1] and
scale the skip features elementwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volume import Volume3D

DEFAULT_WINDOW = (-200.0, 500.0)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 1
    num_classes: int = 3
    depth: int = 4
    base_channels: int = 16
    attention: bool = True
    norm: str = "instance"          # or "batch"
    att_per_channel: bool = False   # one alpha channel per feature channel

    def __post_init__(self):
        if self.depth < 2 or self.base_channels < 1 or self.num_classes < 2:
            raise ValueError(f"invalid UNetSpec {self}")
        if self.norm not in ("instance", "batch"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * 2 ** l for l in range(self.depth)]

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True)
                              .encode()).hexdigest()[:16]


def _norm_layer(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm3d(ch, affine=True)
    return nn.BatchNorm3d(ch)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions, each followed by norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm_layer(norm, out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm_layer(norm, out_ch)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class AttentionGate3D(nn.Module):
    """Additive attention gate on a skip connection.

    x: skip features (F_l channels); g: gating features from one level
    coarser (F_g channels), trilinearly resampled to x's grid inside the
    gate. psi produces n_att coefficient channels which are averaged and
    broadcast over x's channels unless per_channel.
    """

    def __init__(self, f_l: int, f_g: int, f_int: int, n_att: int):
        super().__init__()
        self.w_x = nn.Conv3d(f_l, f_int, 1, bias=False)
        self.w_g = nn.Conv3d(f_g, f_int, 1, bias=True)
        self.psi = nn.Conv3d(f_int, n_att, 1, bias=True)
        self.per_channel = n_att == f_l

    def forward(self, x, g):
        if g.shape[2:] != x.shape[2:]:
            g = F.interpolate(g, size=x.shape[2:], mode="trilinear",
                              align_corners=False)
        q = self.psi(F.relu(self.w_x(x) + self.w_g(g)))
        alpha = torch.sigmoid(q)
        if not self.per_channel:
            alpha = alpha.mean(dim=1, keepdim=True)
        return x * alpha, alpha


def attention_gate(x: torch.Tensor, g: torch.Tensor,
                   gate: AttentionGate3D) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional wrapper: returns (gated skip features, alpha map)."""
    return gate(x, g)


class UNet3D(nn.Module):
    """Encoder-decoder with skip concatenation; optional attention gates.

    Inputs are (N, C, X, Y, Z) with spatial dims divisible by
    2**(depth - 1). The head is a 1x1x1 convolution; `forward` returns
    per-voxel class probabilities (softmax over channel 1).
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        self.force_alpha: float | None = None  # test hook: bypass gates
        chans = spec.level_channels
        self.encoders = nn.ModuleList()
        in_ch = spec.in_channels
        for ch in chans:
            self.encoders.append(ConvBlock(in_ch, ch, spec.norm))
            in_ch = ch
        self.pool = nn.MaxPool3d(2)
        self.decoders = nn.ModuleList()
        for l in range(spec.depth - 2, -1, -1):
            self.decoders.append(ConvBlock(chans[l + 1] + chans[l], chans[l],
                                           spec.norm))
        if spec.attention:
            self.gates = nn.ModuleList()
            for l in range(spec.depth - 2, -1, -1):
                f_l = chans[l]
                n_att = f_l if spec.att_per_channel else spec.num_classes
                self.gates.append(AttentionGate3D(f_l, chans[l + 1],
                                                  max(f_l // 2, 1), n_att))
        self.head = nn.Conv3d(chans[0], spec.num_classes, 1)

    def forward_logits(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(self.pool(x) if i else x)
            skips.append(x)
        d = skips[-1]
        for i, dec in enumerate(self.decoders):
            skip = skips[self.spec.depth - 2 - i]
            if self.spec.attention:
                if self.force_alpha is not None:
                    skip = skip * self.force_alpha
                else:
                    skip, _ = self.gates[i](skip, d)
            up = F.interpolate(d, size=skip.shape[2:], mode="trilinear",
                               align_corners=False)
            d = dec(torch.cat([skip, up], dim=1))
        return self.head(d)

    def forward(self, x):
        return torch.softmax(self.forward_logits(x), dim=1)


def build_unet(spec: UNetSpec, init_seed: int = 0) -> UNet3D:
    """Construct a U-Net with deterministic initialization from the seed."""
    torch.manual_seed(init_seed)
    return UNet3D(spec)


def normalize_input(vol: Volume3D, window=DEFAULT_WINDOW) -> np.ndarray:
    """Clamp HU to [lo, hi] and rescale to [0, 1]."""
    lo, hi = window
    if lo >= hi:
        raise ValueError("window lo must be < hi")
    return ((np.clip(vol.data, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def pad_to_divisible(arr: np.ndarray, factor: int,
                     value: float = 0.0) -> tuple[np.ndarray, tuple]:
    """Symmetric pad of the trailing 3 spatial dims up to a multiple of factor."""
    pads = []
    for d in arr.shape[-3:]:
        extra = (-d) % factor
        pads.append((extra // 2, extra - extra // 2))
    full = [(0, 0)] * (arr.ndim - 3) + pads
    return np.pad(arr, full, constant_values=value), tuple(pads)


def unet_forward(model: UNet3D, normalized: np.ndarray) -> np.ndarray:
    """Run inference on a normalized (X, Y, Z) array; returns (C, X, Y, Z) probs.

    Dims not divisible by 2**(depth-1) are symmetrically zero-padded and
    the padding removed from the output.
    """
    factor = 2 ** (model.spec.depth - 1)
    padded, pads = pad_to_divisible(normalized, factor)
    with torch.no_grad():
        model.eval()
        t = torch.from_numpy(padded[None, None].astype(np.float32))
        probs = model(t)[0].numpy()
    sl = tuple(slice(p0, probs.shape[1 + ax] - p1)
               for ax, (p0, p1) in enumerate(pads))
    return probs[(slice(None),) + sl]


def save_checkpoint(path, model: UNet3D, epoch: int = 0) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "spec_hash": model.spec.hash(),
        "epoch": epoch,
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path) -> tuple[UNet3D, int]:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    spec = UNetSpec(**blob["spec"])
    if spec.hash() != blob["spec_hash"]:
        raise ValueError("checkpoint spec hash mismatch")
    model = UNet3D(spec)
    model.load_state_dict(blob["state_dict"])
    return model, int(blob["epoch"])
