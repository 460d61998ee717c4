"""Test-time fine-tuning of the last ProgNet stage against the HPFP
fidelity loss."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .network import AdamState, ProgNet, adam_step, grads_of
from .physics import HpfpFidelity, ScanParams, make_dipole_kernel, make_hann_transfer, wrap_phase
from .volume import RealVolume, VoxelGrid

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    threshold: float = 5e-3
    fluctuation_window: int = 3
    max_iter: int = 200
    fc: float = 0.5

    def __post_init__(self):
        if self.threshold <= 0 or self.max_iter < 1 or self.fluctuation_window < 1:
            raise ValueError("threshold, max_iter and fluctuation_window must be positive")


@dataclass
class FinetuneState:
    cfg: FinetuneConfig
    iteration: int = 0
    history: list[float] = field(default_factory=list)
    best_loss: float = math.inf
    best_iteration: int = 0
    best_params: list[torch.Tensor] | None = None
    best_prediction: np.ndarray | None = None
    increases: int = 0
    stop_reason: str | None = None
    adam: AdamState | None = None

    def record(self, loss: float, params=None, prediction=None) -> str | None:
        """Append one loss value; return a stop reason or None to continue.

        ``params`` and ``prediction`` are snapshotted when ``loss`` is the
        best seen so far."""
        self.iteration += 1
        self.history.append(loss)
        if not math.isfinite(loss):
            self.stop_reason = "non-finite"
            return self.stop_reason
        if loss < self.best_loss:
            self.best_loss, self.best_iteration = loss, self.iteration
            if params is not None:
                self.best_params = [p.detach().clone() for p in params]
            if prediction is not None:
                self.best_prediction = np.array(prediction, copy=True)
        if len(self.history) >= 2:
            prev = self.history[-2]
            if loss > prev:
                self.increases += 1
            else:
                self.increases = 0
            if relative_change(prev, loss) < self.cfg.threshold:
                self.stop_reason = "converged"
            elif self.increases >= self.cfg.fluctuation_window:
                self.stop_reason = "fluctuating"
        if self.stop_reason is None and self.iteration >= self.cfg.max_iter:
            self.stop_reason = "max-iter"
        return self.stop_reason

    def relative_changes(self) -> list[float]:
        return [math.nan] + [relative_change(a, b) for a, b in zip(self.history, self.history[1:])]

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss_ft", "relative_change"])
            for i, (loss, rel) in enumerate(zip(self.history, self.relative_changes()), start=1):
                w.writerow([i, repr(loss), "" if math.isnan(rel) else repr(rel)])


def relative_change(prev: float, cur: float) -> float:
    if prev == 0:
        return 0.0 if cur == 0 else math.inf
    return abs(cur - prev) / abs(prev)


def _wrapped_input(f_hpfp: RealVolume) -> torch.Tensor:
    return torch.from_numpy(wrap_phase(f_hpfp.data).astype(np.float32))[None, None]


@torch.no_grad()
def predict(net: ProgNet, f_hpfp: RealVolume) -> RealVolume:
    """Final-stage QSM (ppm) for a whole volume; the HPFP is wrapped to
    (-pi, pi] first."""
    was_training = net.training
    net.eval()
    out = net(_wrapped_input(f_hpfp))[-1]
    net.train(was_training)
    return RealVolume(f_hpfp.grid, out[0, 0].double().numpy())


def fine_tune(
    net: ProgNet,
    f_hpfp: RealVolume,
    m: RealVolume,
    grid: VoxelGrid | None = None,
    scan: ScanParams = ScanParams(),
    cfg: FinetuneConfig = FinetuneConfig(),
    fidelity=None,
) -> tuple[ProgNet, RealVolume, FinetuneState]:
    """Adapt the last stage of a copy of ``net`` to one test volume.

    Earlier stages run once to produce the frozen last-stage input; batch
    norm stays in eval mode throughout. ``grid`` sets the voxel size used by
    the dipole kernel (defaults to the HPFP grid). ``fidelity`` may replace
    the physics loss with any object exposing ``loss_and_grad(x)``.
    Returns the adapted copy (best-loss weights), its prediction and the
    optimisation state.
    """
    grid = f_hpfp.grid if grid is None else grid
    if grid.shape != f_hpfp.grid.shape or m.grid.shape != f_hpfp.grid.shape:
        raise ValueError("HPFP, magnitude and grid disagree in matrix size")
    if fidelity is None:
        f_w = RealVolume(grid, wrap_phase(f_hpfp.data))
        fidelity = HpfpFidelity(
            RealVolume(grid, m.data), f_w, make_dipole_kernel(grid), make_hann_transfer(grid, cfg.fc), scan
        )
    net = copy.deepcopy(net)
    net.eval()
    f_in = _wrapped_input(f_hpfp)
    with torch.no_grad():
        prev = torch.zeros_like(f_in)
        for stage in net.stages[:-1]:
            prev = stage(net.stage_input(prev, f_in))
        stage_in = net.stage_input(prev, f_in)
    last = net.last_stage
    for stage in net.stages[:-1]:
        stage.requires_grad_(False)
    params = list(last.parameters())
    state = FinetuneState(cfg, adam=AdamState.for_params(params, cfg.lr))

    while True:
        x = last(stage_in)
        x_np = x.detach()[0, 0].double().numpy()
        loss, grad = fidelity.loss_and_grad(x_np)
        reason = state.record(loss, params, x_np)
        if reason is not None:
            break
        last.zero_grad(set_to_none=True)
        x.backward(torch.from_numpy(np.asarray(grad).reshape(x_np.shape)).to(x.dtype)[None, None])
        adam_step(state.adam, params, grads_of(params))

    if reason == "non-finite":
        log.warning("fine-tuning hit a non-finite loss at iteration %d; restoring best weights", state.iteration)
    if state.best_params is not None:
        with torch.no_grad():
            for p, best in zip(params, state.best_params):
                p.copy_(best)
    for stage in net.stages:
        stage.requires_grad_(True)
    prediction = state.best_prediction if state.best_prediction is not None else x_np
    return net, RealVolume(f_hpfp.grid, prediction), state
