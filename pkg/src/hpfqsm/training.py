"""Supervised pre-training of a ProgNet on phantom patches."""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .network import BN_MOMENTUM, AdamState, ConvBNReLU, ProgNet, adam_step, grads_of, save_checkpoint
from .phantom import manifest_cases
from .qvol import read_qvol

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    patch: tuple[int, int, int] = (32, 32, 8)  # (px, py, pz)
    stride: tuple[int, int, int] = (16, 16, 4)  # (sx, sy, sz)
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the best checkpoint
    augment: bool = False  # random axis flips / in-plane transpose per sample
    recalibrate_bn: bool = False  # re-estimate BN statistics on whole training volumes each epoch

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        self.stride = tuple(int(s) for s in self.stride)
        if len(self.patch) != 3 or len(self.stride) != 3:
            raise ValueError("patch and stride need three entries (x, y, z)")
        if any(s < 1 or s > p for s, p in zip(self.stride, self.patch)):
            raise ValueError("stride must be in [1, patch] on every axis")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    def check_network(self, levels: int) -> None:
        factor = 2 ** (levels - 1)
        if any(p % factor for p in self.patch):
            raise ValueError(f"patch {self.patch} not divisible by {factor} for a {levels}-level Unet")


def patch_origins(n: int, p: int, s: int) -> list[int]:
    """Origins at multiples of ``s``; the last one is clamped to ``n - p``."""
    if p > n:
        raise ValueError(f"patch size {p} exceeds volume size {n}")
    origins = list(range(0, n - p + 1, s))
    if origins[-1] != n - p:
        origins.append(n - p)
    return origins


def extract_patches(inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut aligned patches from a ``(nz, ny, nx)`` input/label pair.

    Ordering is z-major, then y, then x."""
    if inputs.shape != labels.shape:
        raise ValueError("input and label volumes differ in shape")
    nz, ny, nx = inputs.shape
    px, py, pz = cfg.patch
    sx, sy, sz = cfg.stride
    out = []
    for z0 in patch_origins(nz, pz, sz):
        for y0 in patch_origins(ny, py, sy):
            for x0 in patch_origins(nx, px, sx):
                sl = (slice(z0, z0 + pz), slice(y0, y0 + py), slice(x0, x0 + px))
                out.append((inputs[sl], labels[sl]))
    return out


def augment_pair(f: np.ndarray, chi: np.ndarray, rng: np.random.Generator, transpose: bool = True):
    """Random flips of every axis and, when allowed, an x/y transpose.

    The dipole kernel depends on kz**2 / |k|**2 only, so these symmetries
    map a consistent (HPFP, chi) pair to another consistent pair. The
    transpose additionally needs square in-plane voxels.
    """
    axes = tuple(a for a in range(3) if rng.random() < 0.5)
    if axes:
        f, chi = np.flip(f, axes), np.flip(chi, axes)
    if transpose and f.shape[1] == f.shape[2] and rng.random() < 0.5:
        f, chi = f.transpose(0, 2, 1), chi.transpose(0, 2, 1)
    return f, chi


def load_pairs(manifest: dict, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
    root = Path(manifest["root"])
    pairs = []
    for case in manifest_cases(manifest, split):
        f = read_qvol(root / case["files"]["hpfp"]).data
        chi = read_qvol(root / case["files"]["chi"]).data
        pairs.append((f, chi))
    return pairs


def _to_batch(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays).astype(np.float32))[:, None]


def stage_l1(outputs: list[torch.Tensor], label: torch.Tensor) -> list[torch.Tensor]:
    """Mean-per-voxel L1 of every stage output against the label."""
    return [torch.mean(torch.abs(o - label)) for o in outputs]


@torch.no_grad()
def evaluate_l1(net: ProgNet, pairs) -> list[float]:
    """Per-stage mean L1 over whole volumes, BN in eval mode."""
    was_training = net.training
    net.eval()
    totals = np.zeros(len(net.stages))
    for f, chi in pairs:
        outs = net(_to_batch([f]))
        totals += [v.item() for v in stage_l1(outs, _to_batch([chi]))]
    net.train(was_training)
    return list(totals / max(len(pairs), 1))


@torch.no_grad()
def recalibrate_bn(net: ProgNet, volumes) -> None:
    """Replace BN running statistics by their plain average over ``volumes``
    (whole inputs, one at a time), matching the statistics seen at inference."""
    layers = [m for m in net.modules() if isinstance(m, ConvBNReLU)]
    was_training = net.training
    for m in layers:
        m.running_mean.zero_()
        m.running_var.fill_(1.0)
    net.train()
    try:
        for i, f in enumerate(volumes):
            for m in layers:
                m.momentum = 1.0 / (i + 1)  # cumulative mean
            net(_to_batch([f]))
    finally:
        for m in layers:
            m.momentum = BN_MOMENTUM
        net.train(was_training)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)  # epoch, stage, train_loss, val_loss
    best_epoch: int = 0
    best_val: float = float("inf")
    checkpoint: str | None = None


def pretrain(
    net: ProgNet,
    manifest: dict,
    cfg: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    tag: str = "prognet",
) -> TrainResult:
    """Minimise the sum over stages of the mean L1 error with Adam.

    ``net`` ends up holding the best-validation weights. With ``out_dir``
    set, ``<tag>.qnt`` and ``<tag>_loss.csv`` are written there.
    """
    cfg.check_network(len(net.widths))
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_pairs = load_pairs(manifest, "train")
    patches = [p for f, chi in train_pairs for p in extract_patches(f, chi, cfg)]
    dx, dy = manifest["grid"]["voxel_size"][:2]
    square = abs(dx - dy) < 1e-9
    val_pairs = load_pairs(manifest, "val")
    if not patches:
        raise ValueError("no training patches")
    params = list(net.parameters())
    adam = AdamState.for_params(params, cfg.lr)
    result = TrainResult()
    best_state = copy.deepcopy(net.state_dict())
    k = len(net.stages)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = rng.permutation(len(patches))
        sums, n_batches = np.zeros(k), 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [patches[i] for i in idx]
            if cfg.augment:
                batch = [augment_pair(f, chi, rng, square) for f, chi in batch]
            x = _to_batch([b[0] for b in batch])
            y = _to_batch([b[1] for b in batch])
            terms = stage_l1(net(x), y)
            total = sum(terms)
            if not torch.isfinite(total):
                net.load_state_dict(best_state)
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}; best weights restored")
            net.zero_grad(set_to_none=True)
            total.backward()
            adam_step(adam, params, grads_of(params))
            sums += [t.item() for t in terms]
            n_batches += 1
        train_terms = sums / n_batches
        if cfg.recalibrate_bn:
            recalibrate_bn(net, [f for f, _ in train_pairs])
        val_terms = evaluate_l1(net, val_pairs) if val_pairs else list(train_terms)
        val_total = float(sum(val_terms))
        for stage in range(k):
            result.rows.append({"epoch": epoch, "stage": stage + 1,
                                "train_loss": float(train_terms[stage]), "val_loss": float(val_terms[stage])})
        result.rows.append({"epoch": epoch, "stage": "total",
                            "train_loss": float(train_terms.sum()), "val_loss": val_total})
        log.info("%s epoch %d train %.5f val %.5f", tag, epoch, train_terms.sum(), val_total)
        if val_total < result.best_val:
            result.best_val, result.best_epoch = val_total, epoch
            best_state = copy.deepcopy(net.state_dict())
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"{tag}_epoch{epoch:03d}.qnt", net, {"epoch": epoch})

    net.load_state_dict(best_state)
    net.eval()
    if out is not None:
        ckpt = out / f"{tag}.qnt"
        save_checkpoint(ckpt, net, {"best_epoch": result.best_epoch, "best_val": result.best_val})
        result.checkpoint = str(ckpt)
        write_loss_csv(out / f"{tag}_loss.csv", result.rows)
    return result


def write_loss_csv(path, rows, extra: dict | None = None) -> None:
    fields = ["epoch", "stage", "train_loss", "val_loss"] + list(extra or {})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({**r, **(extra or {})})
