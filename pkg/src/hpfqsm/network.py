"""3D Unet, the progressive (stacked) Unet and a plain Adam optimiser.

Feature maps are torch tensors laid out ``(batch, channels, z, y, x)``, the
same z-slowest order as :mod:`hpfqsm.volume`. Reverse-mode differentiation
is torch autograd; the physics gradient is injected from numpy in
:mod:`hpfqsm.finetune`.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def conv3(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """3x3x3 (or 1x1x1) cross-correlation, stride 1, zero padding to keep size."""
    if x.dim() != 5 or w.dim() != 5:
        raise ValueError("conv3 expects 5D input and weight tensors")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    pad = w.shape[-1] // 2
    if x.shape[0] == 1:
        # batch-1 convolutions fall off the oneDNN fast path on CPU; a
        # duplicated batch is ~2x cheaper and only the first copy is kept
        return F.conv3d(x.expand(2, -1, -1, -1, -1), w, b, padding=pad)[:1]
    return F.conv3d(x, w, b, padding=pad)


def batchnorm(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
) -> torch.Tensor:
    """Per-channel batch norm. ``train`` normalises with batch statistics and
    updates the running statistics in place; ``eval`` uses them frozen."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and x.numel() // x.shape[1] < 2:
        raise ValueError("batch statistics need at least 2 elements per channel")
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, BN_EPS)


class ConvBNReLU(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3, 3, 3))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.bn_weight = nn.Parameter(torch.ones(c_out))
        self.bn_bias = nn.Parameter(torch.zeros(c_out))
        self.register_buffer("running_mean", torch.zeros(c_out))
        self.register_buffer("running_var", torch.ones(c_out))
        self.momentum = BN_MOMENTUM

    def forward(self, x):
        y = conv3(x, self.weight, self.bias)
        y = batchnorm(
            y, self.bn_weight, self.bn_bias, self.running_mean, self.running_var,
            "train" if self.training else "eval", self.momentum,
        )
        return F.relu(y)


class Unet(nn.Module):
    """Encoder: two conv-BN-ReLU blocks per level, 2x max-pool between levels.
    Decoder: nearest 2x upsample, conv-BN-ReLU, skip concatenation, two
    conv-BN-ReLU blocks. A 1x1x1 conv maps to one output channel."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32), in_channels: int = 2):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if not widths or min(widths) < 1:
            raise ValueError("widths must be a non-empty list of positive ints")
        self.widths = widths
        self.encoders = nn.ModuleList()
        c_in = in_channels
        for w in widths:
            self.encoders.append(nn.Sequential(ConvBNReLU(c_in, w), ConvBNReLU(w, w)))
            c_in = w
        self.up_convs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for lvl in range(len(widths) - 2, -1, -1):
            w = widths[lvl]
            self.up_convs.append(ConvBNReLU(widths[lvl + 1], w))
            self.decoders.append(nn.Sequential(ConvBNReLU(2 * w, w), ConvBNReLU(w, w)))
        self.out_weight = nn.Parameter(torch.empty(1, widths[0], 1, 1, 1))
        self.out_bias = nn.Parameter(torch.zeros(1))

    @property
    def levels(self) -> int:
        return len(self.widths)

    def forward(self, x):
        factor = 2 ** (self.levels - 1)
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < self.levels - 1:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for up, dec in zip(self.up_convs, self.decoders):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return conv3(x, self.out_weight, self.out_bias)


class ProgNet(nn.Module):
    """K Unets in sequence; stage n sees (QSM_{n-1}, HPFP) with QSM_0 = 0."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32), stages: int = 2, seed: int = 0):
        super().__init__()
        if stages < 1:
            raise ValueError("need at least one stage")
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        self.stages = nn.ModuleList(Unet(self.widths) for _ in range(stages))
        init_weights(self, seed)

    @property
    def config(self) -> dict:
        return {"levels": len(self.widths), "widths": list(self.widths), "stages": len(self.stages), "seed": self.seed}

    @property
    def last_stage(self) -> Unet:
        return self.stages[-1]

    def stage_input(self, prev: torch.Tensor, f_hpfp: torch.Tensor) -> torch.Tensor:
        return torch.cat([prev, f_hpfp], dim=1)

    def forward(self, f_hpfp: torch.Tensor) -> list[torch.Tensor]:
        prev = torch.zeros_like(f_hpfp)
        outputs = []
        for stage in self.stages:
            prev = stage(self.stage_input(prev, f_hpfp))
            outputs.append(prev)
        return outputs


def prognet_forward(net: ProgNet, f_hpfp: torch.Tensor) -> list[torch.Tensor]:
    return net(f_hpfp)


def unet_forward(params: Unet, x: torch.Tensor) -> torch.Tensor:
    return params(x)


def init_weights(module: nn.Module, seed: int) -> None:
    """He-uniform (fan-in) conv weights, zero biases, BN scale 1 / shift 0."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() == 5:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3] * p.shape[4]
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            elif name.endswith("bn_weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def count_parameters(widths: Sequence[int], stages: int, in_channels: int = 2) -> int:
    """Trainable parameter count of a ProgNet, from its configuration alone."""

    def block(ci, co):
        return co * ci * 27 + co + 2 * co

    per_stage, c_in = 0, in_channels
    for w in widths:
        per_stage += block(c_in, w) + block(w, w)
        c_in = w
    for lvl in range(len(widths) - 2, -1, -1):
        w = widths[lvl]
        per_stage += block(widths[lvl + 1], w) + block(2 * w, w) + block(w, w)
    per_stage += widths[0] + 1
    return stages * per_stage


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )


class NonFiniteGradient(FloatingPointError):
    pass


@torch.no_grad()
def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(params[i].shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in parameter {i} at step {state.step + 1}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


def grads_of(params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [torch.zeros_like(p) if p.grad is None else p.grad for p in params]


# ---------------------------------------------------------------------------
# checkpoints
#
# b"QNT1" | u32 header length | JSON header | f32 little-endian arrays
# The header holds the network config and a manifest of name/shape/offset
# for every parameter and buffer, in declaration order.

CKPT_MAGIC = b"QNT1"


def state_arrays(net: nn.Module) -> list[tuple[str, np.ndarray]]:
    return [(k, v.detach().cpu().numpy()) for k, v in net.state_dict().items()]


def save_checkpoint(path: str | os.PathLike, net: ProgNet, extra: dict | None = None) -> None:
    entries, offset, blobs = [], 0, []
    for name, arr in state_arrays(net):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": net.config, "tensors": entries, "extra": extra or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | os.PathLike) -> tuple[ProgNet, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a QNT1 checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + hlen])
    data = memoryview(buf)[8 + hlen:]
    cfg = header["config"]
    net = ProgNet(cfg["widths"], cfg["stages"], cfg["seed"])
    state = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=ent["offset"]).reshape(ent["shape"])
        state[ent["name"]] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    return net, header.get("extra", {})
