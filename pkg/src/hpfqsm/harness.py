"""Experiment orchestration: dataset, training, evaluation and sweeps.

Every command takes a resolved :class:`ExperimentConfig` plus an output
directory and lays its products out as::

    <out>/dataset/          QVOL volumes + manifest.json
    <out>/models/           prognet.qnt, unet.qnt, loss CSVs
    <out>/eval/             metrics.csv, cases/<id>/{volumes,slices,traces}
    <out>/sweep_fc/         metrics.csv, summary.csv
    <out>/sweep_voxel/      metrics.csv, summary.csv, manifest.json
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ExperimentConfig
from .finetune import fine_tune, predict
from .metrics import evaluate
from .network import ProgNet, load_checkpoint
from .phantom import load_manifest, make_dataset, manifest_cases
from .physics import (
    HpfpFidelity,
    ScanParams,
    hpfp,
    make_dipole_kernel,
    make_hann_transfer,
    synth_complex,
    wrap_phase,
)
from .qvol import read_qvol, write_qvol
from .training import pretrain
from .volume import RealVolume, resample_kspace

log = logging.getLogger(__name__)

METHODS = ("unet", "unet-ft", "prognet", "prognet-ft")
SLICE_WINDOW = (-0.2, 0.8)  # ppm
MAX_ROI = 15
METRIC_FIELDS = ["config_hash", "case", "method", "fc", "matrix", "voxel_size", "rmse", "psnr", "ssim", "hfen",
                 "loss_ft_initial", "loss_ft_final", "ft_iterations", "stop_reason"]
ROI_FIELDS = [f"roi_{i}" for i in range(1, MAX_ROI + 1)]


class HarnessError(RuntimeError):
    """Missing inputs or other runtime failures of a command."""


def scan_params(cfg: ExperimentConfig) -> ScanParams:
    return ScanParams(b0=cfg.dataset.b0, te=cfg.dataset.te)


def dataset_dir(out) -> Path:
    return Path(out) / "dataset"


def models_dir(out) -> Path:
    return Path(out) / "models"


# ---------------------------------------------------------------------------
# dataset and training


def cmd_phantom(cfg: ExperimentConfig, out) -> dict:
    ds = cfg.dataset
    return make_dataset(dataset_dir(out), ds.n_train, ds.n_val, ds.n_test, ds.grid, ds.seed, ds.fc, scan_params(cfg))


def _load_dataset(out) -> dict:
    try:
        return load_manifest(dataset_dir(out))
    except FileNotFoundError as e:
        raise HarnessError(str(e)) from e


def cmd_train(cfg: ExperimentConfig, out) -> dict[str, str]:
    """Train the progressive net (K stages) and a single-stage Unet with the
    same budget. Returns checkpoint paths by method tag."""
    manifest = _load_dataset(out)
    dest = models_dir(out)
    paths = {}
    for tag, k in (("prognet", cfg.network.stages), ("unet", 1)):
        net = ProgNet(cfg.network.widths, k, seed=cfg.network.seed)
        res = pretrain(net, manifest, cfg.training, out_dir=dest, tag=tag)
        _stamp_csv(dest / f"{tag}_loss.csv", cfg.hash())
        log.info("%s: best epoch %d, val %.5f", tag, res.best_epoch, res.best_val)
        paths[tag] = res.checkpoint
    return paths


def _stamp_csv(path: Path, config_hash: str) -> None:
    """Append a config_hash column to an existing CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows[0].append("config_hash")
    for r in rows[1:]:
        r.append(config_hash)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def load_models(out) -> dict[str, ProgNet]:
    nets = {}
    for tag in ("unet", "prognet"):
        path = models_dir(out) / f"{tag}.qnt"
        if not path.exists():
            raise HarnessError(f"checkpoint not found: {path}")
        nets[tag] = load_checkpoint(path)[0]
    return nets


# ---------------------------------------------------------------------------
# per-case evaluation


@dataclass
class CaseInputs:
    case_id: str
    chi: RealVolume
    magnitude: RealVolume
    hpfp: RealVolume
    labels: np.ndarray | None
    fc: float


def case_inputs(manifest: dict, case: dict, fc: float, matrix: int | None = None,
                beta_at_320: float | None = None) -> CaseInputs:
    """Load one test case and build its HPFP at ``fc``.

    With ``matrix`` the complex image and the label are resampled in k-space
    to ``matrix x matrix`` in-plane (the FOV is kept, so voxels change size).
    ``beta_at_320`` swaps in a different Hann passband constant to emulate
    unknown filter parameters.
    """
    root = Path(manifest["root"])
    chi = read_qvol(root / case["files"]["chi"])
    m = read_qvol(root / case["files"]["magnitude"])
    phase = read_qvol(root / case["files"]["phase"])
    labels = np.load(root / case["files"]["labels"])
    c = synth_complex(m, phase)
    if matrix is not None and (matrix, matrix) != (chi.grid.nx, chi.grid.ny):
        c = resample_kspace(c, matrix, matrix)
        chi = resample_kspace(chi.to_complex(), matrix, matrix).real
        labels = None  # shape masks do not survive resampling
        m = c.magnitude
    kw = {} if beta_at_320 is None else {"beta_at_320": beta_at_320}
    f = hpfp(c, make_hann_transfer(c.grid, fc, **kw))
    return CaseInputs(case["id"], chi, RealVolume(c.grid, m.data), f, labels, fc)


def run_methods(nets: dict[str, ProgNet], inp: CaseInputs, cfg: ExperimentConfig):
    """Predict with both nets, fine-tune each, and yield
    ``(method, prediction, loss_initial, loss_final, state)``."""
    grid = inp.hpfp.grid
    fid = HpfpFidelity(inp.magnitude, RealVolume(grid, wrap_phase(inp.hpfp.data)), make_dipole_kernel(grid),
                       make_hann_transfer(grid, cfg.finetune.fc), scan_params(cfg))
    for tag in ("unet", "prognet"):
        net = nets[tag]
        pred = predict(net, inp.hpfp)
        l0 = fid.loss(pred.data)
        yield tag, pred, l0, l0, None
        _, pft, state = fine_tune(net, inp.hpfp, inp.magnitude, grid, scan_params(cfg), cfg.finetune, fidelity=fid)
        yield f"{tag}-ft", pft, l0, fid.loss(pft.data), state


def write_slice_png(path, vol: RealVolume, window=SLICE_WINDOW) -> None:
    """Mid-volume axial slice as 8-bit grayscale with a fixed ppm window."""
    lo, hi = window
    sl = vol.data[vol.grid.nz // 2]
    img = np.clip((sl - lo) / (hi - lo), 0.0, 1.0)
    # row 0 is the largest y so the image is not upside down
    Image.fromarray(np.round(img[::-1] * 255).astype(np.uint8), mode="L").save(path)


def evaluate_case(nets, inp: CaseInputs, cfg: ExperimentConfig, case_dir: Path | None, config_hash: str) -> list[dict]:
    rows = []
    g = inp.chi.grid
    if case_dir is not None:
        for sub in ("volumes", "slices", "traces"):
            (case_dir / sub).mkdir(parents=True, exist_ok=True)
        write_slice_png(case_dir / "slices" / "label.png", inp.chi)
    for method, pred, l0, l1, state in run_methods(nets, inp, cfg):
        rep = evaluate(pred, inp.chi, inp.labels)
        row = {
            "config_hash": config_hash, "case": inp.case_id, "method": method, "fc": inp.fc,
            "matrix": g.nx, "voxel_size": g.dx, "rmse": rep.rmse, "psnr": rep.psnr, "ssim": rep.ssim,
            "hfen": rep.hfen, "loss_ft_initial": l0, "loss_ft_final": l1,
            "ft_iterations": state.iteration if state else 0, "stop_reason": state.stop_reason if state else "",
        }
        row.update({f"roi_{k}": v for k, v in rep.roi.items()})
        rows.append(row)
        if case_dir is not None:
            write_qvol(case_dir / "volumes" / f"{method}.qvol", pred)
            write_slice_png(case_dir / "slices" / f"{method}.png", pred)
            if state is not None:
                state.write_trace(case_dir / "traces" / f"{method}.csv")
        log.info("%s %s fc=%.4g n=%d rmse %.2f loss %.4g -> %.4g", inp.case_id, method, inp.fc, g.nx,
                 rep.rmse, l0, l1)
    return rows


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS + ROI_FIELDS, restval="")
        w.writeheader()
        w.writerows(rows)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _evaluate_set(cfg, out_sub: Path, fc: float, matrix: int | None, jobs: int, nets, manifest,
                  keep_volumes: bool, beta_at_320=None) -> list[dict]:
    cases = manifest_cases(manifest, "test")
    h = cfg.hash()
    tag = f"fc{fc:.4g}" if matrix is None else f"m{matrix}"

    def one(case):
        inp = case_inputs(manifest, case, fc, matrix, beta_at_320)
        case_dir = out_sub / "cases" / tag / case["id"] if keep_volumes else None
        return evaluate_case(nets, inp, cfg, case_dir, h)

    return [r for rows in _map(one, cases, jobs) for r in rows]


def cmd_eval(cfg: ExperimentConfig, out, jobs: int = 1, fc: float | None = None) -> list[dict]:
    """All four methods on every test case at ``fc`` (default: the training
    fc); writes ``eval/metrics.csv`` and per-case volumes, slices, traces."""
    manifest = _load_dataset(out)
    nets = load_models(out)
    dest = Path(out) / "eval"
    dest.mkdir(parents=True, exist_ok=True)
    rows = _evaluate_set(cfg, dest, cfg.dataset.fc if fc is None else fc, None, jobs, nets, manifest, True)
    write_metrics_csv(dest / "metrics.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# sweeps and reports


def summarize(rows: list[dict], group: str, config_hash: str, flagged=()) -> list[dict]:
    """Mean and sample stdev of each metric per (group value, method)."""
    out = []
    keys = sorted({float(r[group]) for r in rows})
    for key in keys:
        for method in METHODS:
            sel = [r for r in rows if float(r[group]) == key and r["method"] == method]
            if not sel:
                continue
            rec = {"config_hash": config_hash, group: key, "method": method, "n": len(sel)}
            for metric in ("rmse", "psnr", "ssim", "hfen"):
                vals = np.array([float(r[metric]) for r in sel])
                rec[f"{metric}_mean"] = float(vals.mean())
                rec[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rec["note"] = "no FT gain expected" if any(math.isclose(key, f) for f in flagged) else ""
            out.append(rec)
    return out


def write_summary_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise HarnessError("nothing to summarise")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_sweep_fc(cfg: ExperimentConfig, out, jobs: int = 1, beta_at_320: float | None = None) -> list[dict]:
    """Test HPFP regenerated at every sweep fc; the loss fc stays fixed."""
    manifest = _load_dataset(out)
    nets = load_models(out)
    dest = Path(out) / "sweep_fc"
    dest.mkdir(parents=True, exist_ok=True)
    rows = []
    for fc in cfg.sweep.fc:
        rows += _evaluate_set(cfg, dest, fc, None, jobs, nets, manifest, False, beta_at_320)
    write_metrics_csv(dest / "metrics.csv", rows)
    summary = summarize(rows, "fc", cfg.hash(), cfg.sweep.no_gain_fc)
    write_summary_csv(dest / "summary.csv", summary)
    return summary


def cmd_sweep_voxel(cfg: ExperimentConfig, out, jobs: int = 1) -> list[dict]:
    """Resample the test cases to each sweep matrix and evaluate there; the
    dipole kernel of the fine-tuning loss uses the new voxel size."""
    manifest = _load_dataset(out)
    nets = load_models(out)
    dest = Path(out) / "sweep_voxel"
    dest.mkdir(parents=True, exist_ok=True)
    g = cfg.dataset.grid
    rows, grids = [], []
    for n in cfg.sweep.matrix:
        rows += _evaluate_set(cfg, dest, cfg.dataset.fc, n, jobs, nets, manifest, False)
        grids.append({"matrix": [n, n, g.nz], "voxel_size": [g.dx * g.nx / n, g.dy * g.ny / n, g.dz]})
    write_metrics_csv(dest / "metrics.csv", rows)
    with open(dest / "manifest.json", "w") as fh:
        json.dump({"config_hash": cfg.hash(), "grids": grids}, fh, indent=2)
    summary = summarize(rows, "matrix", cfg.hash())
    write_summary_csv(dest / "summary.csv", summary)
    return summary


def cmd_metrics(cfg: ExperimentConfig, out) -> list[dict]:
    """Recompute metrics from the volumes saved by ``cmd_eval``."""
    manifest = _load_dataset(out)
    root = Path(manifest["root"])
    cases_dir = Path(out) / "eval" / "cases" / f"fc{cfg.dataset.fc:.4g}"
    if not cases_dir.exists():
        raise HarnessError(f"no evaluation volumes under {cases_dir}")
    rows = []
    for case in manifest_cases(manifest, "test"):
        chi = read_qvol(root / case["files"]["chi"])
        labels = np.load(root / case["files"]["labels"])
        for method in METHODS:
            path = cases_dir / case["id"] / "volumes" / f"{method}.qvol"
            if not path.exists():
                raise HarnessError(f"missing volume {path}")
            rep = evaluate(read_qvol(path), chi, labels)
            row = {"config_hash": cfg.hash(), "case": case["id"], "method": method, "fc": cfg.dataset.fc,
                   "matrix": chi.grid.nx, "voxel_size": chi.grid.dx, "rmse": rep.rmse, "psnr": rep.psnr,
                   "ssim": rep.ssim, "hfen": rep.hfen}
            row.update({f"roi_{k}": v for k, v in rep.roi.items()})
            rows.append(row)
    write_metrics_csv(Path(out) / "eval" / "metrics_recomputed.csv", rows)
    return rows


def cmd_report(cfg: ExperimentConfig, out) -> list[dict]:
    """Merge every metrics CSV under ``out`` into ``report.csv`` (one summary
    row per source, group and method)."""
    merged = []
    sources = [("eval", "fc"), ("sweep_fc", "fc"), ("sweep_voxel", "matrix")]
    for sub, group in sources:
        path = Path(out) / sub / "metrics.csv"
        if not path.exists():
            continue
        for rec in summarize(read_metrics_csv(path), group, cfg.hash(),
                             cfg.sweep.no_gain_fc if group == "fc" else ()):
            value = rec.pop(group)
            merged.append({"source": sub, "group": group, "value": value, **rec})
    if not merged:
        raise HarnessError(f"no metrics CSVs found under {out}")
    write_summary_csv(Path(out) / "report.csv", merged)
    return merged


def mean_rmse(rows: list[dict], method: str, **match) -> float:
    sel = [float(r["rmse"]) for r in rows if r["method"] == method
           and all(math.isclose(float(r[k]), v) for k, v in match.items())]
    if not sel:
        raise ValueError(f"no rows for {method} {match}")
    return float(np.mean(sel))

