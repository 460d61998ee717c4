"""End-to-end acceptance checks, one test (or group) per criterion.

Each test reports through the ``criterion`` fixture; a pass/fail line per
criterion is printed in the terminal summary. The desk-scale pipeline
(dataset, training, evaluation, sweeps) runs once per session and is
shared by criteria 6-9 and 11.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import torch

from hpfqsm import harness
from hpfqsm.config import load_config
from hpfqsm.finetune import FinetuneConfig, FinetuneState, fine_tune
from hpfqsm.metrics import hfen, psnr, rmse, ssim3d
from hpfqsm.network import ProgNet, batchnorm, conv3, load_checkpoint, save_checkpoint
from hpfqsm.phantom import PhantomSpec, Shape, analytic_sphere_field, load_manifest, manifest_cases, random_phantom_spec, rasterize_phantom, synth_magnitude
from hpfqsm.physics import (
    HpfpFidelity,
    ScanParams,
    dipole_convolve,
    forward_hpfp,
    hpfp,
    lowpass_inplane,
    make_dipole_kernel,
    make_hann_transfer,
    synth_complex,
)
from hpfqsm.qvol import read_qvol, write_qvol
from hpfqsm.training import evaluate_l1, load_pairs
from hpfqsm.volume import ComplexVolume, RealVolume, VoxelGrid, resample_kspace

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"
FC_SWEEP = (1 / 4, 3 / 8, 1 / 2, 5 / 8, 3 / 4)


# ---------------------------------------------------------------------------
# 1-5: operators, physics oracle, gradients, HPFP, stopping rule


def test_c1_operator_self_adjointness(criterion):
    t0 = time.perf_counter()
    g = VoxelGrid(16, 16, 16)
    d, h = make_dipole_kernel(g), make_hann_transfer(g, 0.5)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, *g.shape))
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        dx = dipole_convolve(RealVolume(g, x), d).data
        dy = dipole_convolve(RealVolume(g, y), d).data
        worst = max(worst, abs(np.vdot(dx, y) - np.vdot(x, dy)) / (nx * ny))
        cx = ComplexVolume(g, x + 1j * rng.normal(size=g.shape))
        cy = ComplexVolume(g, y + 1j * rng.normal(size=g.shape))
        hx, hy = lowpass_inplane(cx, h).data, lowpass_inplane(cy, h).data
        err = abs(np.vdot(hx, cy.data) - np.vdot(cx.data, hy))
        worst = max(worst, err / (np.linalg.norm(cx.data) * np.linalg.norm(cy.data)))
    elapsed = time.perf_counter() - t0
    ok = criterion(1, "operator self-adjointness", worst <= 1e-10 and elapsed < 10,
                   f"max rel err {worst:.2e} (<=1e-10), {elapsed:.2f}s (<10s)")
    assert ok


def test_c2_sphere_oracle(criterion):
    t0 = time.perf_counter()
    g = VoxelGrid(96, 96, 96)
    a, c = 12.0, (48.0, 48.0, 48.0)
    chi = rasterize_phantom(PhantomSpec(g, [Shape("sphere", c, a, 1.0)]))
    num = dipole_convolve(chi, make_dipole_kernel(g)).data
    ref = analytic_sphere_field(c, a, 1.0, g).data
    z, y, x = np.meshgrid(*(np.arange(n) - 48.0 for n in g.shape), indexing="ij")
    r = np.sqrt(x**2 + y**2 + z**2)
    shell = (r > 1.5 * a) & (r < 3 * a)
    rel = np.linalg.norm(num[shell] - ref[shell]) / np.linalg.norm(ref[shell])
    interior = np.mean(np.abs(num[chi.data > 0]))
    elapsed = time.perf_counter() - t0
    ok = rel < 0.10 and interior < 0.05 / 3 and elapsed < 60
    criterion(2, "sphere field oracle", ok,
              f"shell rel L2 {rel:.3f} (<0.10), interior mean |field| {interior:.4f} (<{0.05 / 3:.4f}), "
              f"{elapsed:.1f}s (<60s)")
    assert ok


def _fd_rel_error(fun, x, g, eps=1e-4):
    worst = 0.0
    for i in np.ndindex(x.shape):
        if abs(g[i]) <= 1e-8:
            continue
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (fun(xp) - fun(xm)) / (2 * eps)
        worst = max(worst, abs(fd - g[i]) / abs(g[i]))
    return worst


def test_c3_gradient_fidelity_physics(criterion):
    grid = VoxelGrid(16, 16, 8, 0.75, 0.75, 3.0)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x_true, x = rng.normal(0, 0.05, (2, *grid.shape))
        m = RealVolume(grid, rng.uniform(0.5, 1.5, grid.shape))
        d, h, s = make_dipole_kernel(grid), make_hann_transfer(grid, 0.5), ScanParams()
        f = forward_hpfp(RealVolume(grid, x_true), m, d, h, s)
        fid = HpfpFidelity(m, f, d, h, s)
        _, g = fid.loss_and_grad(x)
        worst = max(worst, _fd_rel_error(fid.loss, x, g))
    ok = criterion(3, "gradient fidelity", worst < 1e-3, f"loss_FT max rel err {worst:.1e} over 10 seeds")
    assert ok


def _torch_fd_worst(fun, tensors, n_probe=20, eps=1e-6, seed=0):
    for t in tensors:
        t.grad = None
    fun().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        grad = t.grad.detach().clone().view(-1)
        flat = t.detach().view(-1)
        for i in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
            if abs(grad[i].item()) <= 1e-8:
                continue
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                fp = fun().item()
                flat[i] = old - eps
                fm = fun().item()
                flat[i] = old
            worst = max(worst, abs((fp - fm) / (2 * eps) - grad[i].item()) / abs(grad[i].item()))
    return worst


def test_c3_gradient_fidelity_layers(criterion):
    worst = {}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        dims = tuple(int(v) for v in rng.choice([4, 8], size=3))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        x = torch.randn(2, cin, *dims, dtype=torch.float64, requires_grad=True)
        w = torch.randn(cout, cin, 3, 3, 3, dtype=torch.float64, requires_grad=True)
        b = torch.randn(cout, dtype=torch.float64, requires_grad=True)
        t = torch.randn(2, cout, *dims, dtype=torch.float64)
        worst["conv"] = max(worst.get("conv", 0), _torch_fd_worst(lambda: ((conv3(x, w, b) - t) ** 2).sum(), [x, w, b], seed=seed))

        gamma = (1 + 0.1 * torch.randn(cin, dtype=torch.float64)).requires_grad_()
        beta = torch.randn(cin, dtype=torch.float64, requires_grad=True)
        tb = torch.randn(2, cin, *dims, dtype=torch.float64)

        def bn_loss():
            rm, rv = torch.zeros(cin, dtype=torch.float64), torch.ones(cin, dtype=torch.float64)
            return ((batchnorm(x, gamma, beta, rm, rv, "train") - tb) ** 2).sum()

        worst["batchnorm"] = max(worst.get("batchnorm", 0), _torch_fd_worst(bn_loss, [x, gamma, beta], seed=seed))

        net = ProgNet((2, 4), stages=2, seed=seed).double().train()
        f = torch.randn(2, 1, 4, 8, 8, dtype=torch.float64)
        lab = torch.randn(2, 1, 4, 8, 8, dtype=torch.float64)

        def net_loss():
            for mod in net.modules():
                if hasattr(mod, "running_mean"):
                    mod.running_mean.zero_()
                    mod.running_var.fill_(1.0)
            return sum(torch.mean(torch.abs(o - lab)) for o in net(f))

        probes = [net.stages[0].encoders[0][0].weight, net.stages[1].decoders[0][1].bn_weight,
                  net.stages[1].up_convs[0].weight, net.stages[1].out_weight]
        worst["prognet"] = max(worst.get("prognet", 0), _torch_fd_worst(net_loss, probes, n_probe=6, seed=seed))
    ok = all(v < 1e-3 for v in worst.values())
    criterion(3, "gradient fidelity", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_c4_hpfp_invariants(criterion):
    g = VoxelGrid(64, 64, 16, 0.75, 0.75, 3.0)
    rng = np.random.default_rng(0)
    mag = rng.uniform(0.2, 2.0, g.shape)
    const = hpfp(ComplexVolume(g, mag * np.exp(1j * 1.234)), make_hann_transfer(g, 0.5)).data
    const_err = float(np.max(np.abs(const)))
    in_range, monotone = True, True
    ratios = []
    for seed in range(3):
        spec = random_phantom_spec(g, seed)
        chi = rasterize_phantom(spec)
        phase = ScanParams().phase_per_ppm * dipole_convolve(chi, make_dipole_kernel(g)).data
        c = synth_complex(synth_magnitude(spec, chi), RealVolume(g, phase))
        r = []
        for fc in FC_SWEEP:
            f = hpfp(c, make_hann_transfer(g, fc)).data
            in_range &= bool(f.min() > -np.pi and f.max() <= np.pi)
            r.append(np.sum(f**2) / np.sum(phase**2))
        monotone &= bool(np.all(np.diff(r) >= 0))
        ratios.append(r)
    ok = const_err <= 1e-9 and in_range and monotone
    criterion(4, "HPFP invariants", ok,
              f"constant-phase max {const_err:.1e}, range ok={in_range}, retained energy non-decreasing={monotone} "
              f"(case 0: {', '.join(f'{v:.3f}' for v in ratios[0])})")
    assert ok


def test_c5_stopping_rule(criterion):
    class Scripted:
        def __init__(self, losses):
            self.losses, self.i = losses, 0
            self.rng = np.random.default_rng(0)

        def loss_and_grad(self, x):
            v = self.losses[min(self.i, len(self.losses) - 1)]
            self.i += 1
            return v, self.rng.normal(size=x.shape)

    g = VoxelGrid(16, 16, 8, 0.75, 0.75, 3.0)
    f = RealVolume(g, np.random.default_rng(1).uniform(-1, 1, g.shape))
    m = RealVolume(g, np.ones(g.shape))
    net = ProgNet((2, 4), 2, seed=0)

    # 0.4 % decrease per step is below the 5e-3 threshold: stop at step 2
    seq = [100 * 0.996**i for i in range(50)]
    _, _, st = fine_tune(net, f, m, cfg=FinetuneConfig(), fidelity=Scripted(seq))
    conv_ok = st.iteration == 2 and st.stop_reason == "converged"
    # 1 % decreases continue; the first 0.4 % step stops
    seq2 = [100.0, 99.0, 98.01, 97.0299, 97.0299 * 0.996, 90.0]
    _, _, st2 = fine_tune(net, f, m, cfg=FinetuneConfig(), fidelity=Scripted(seq2))
    conv_ok &= st2.iteration == 5 and st2.stop_reason == "converged"

    seq3 = [10.0, 8.0, 5.0, 6.0, 7.0, 8.0, 1.0]
    tuned, pred, st3 = fine_tune(net, f, m, cfg=FinetuneConfig(lr=1e-2), fidelity=Scripted(seq3))
    from hpfqsm.finetune import predict

    restored = np.array_equal(predict(tuned, f).data, pred.data) and st3.best_iteration == 3
    fluct_ok = st3.stop_reason == "fluctuating" and st3.iteration == 6 and restored

    state = FinetuneState(FinetuneConfig())
    state.record(1.0)
    direct = state.record(0.996) == "converged"
    ok = conv_ok and fluct_ok and direct
    criterion(5, "stopping rule", ok,
              f"0.4% step stops at iteration {st.iteration} ({st.stop_reason}); fluctuation stop at "
              f"{st3.iteration} restoring iteration {st3.best_iteration} (restored={restored})")
    assert ok


# ---------------------------------------------------------------------------
# 10-11: metrics and round trips


def test_c10_metric_sanity(criterion):
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(24, 32, 32))
    ref[8:16, 10:20, 10:20] += 2.0
    vals = dict(rmse=rmse(ref, ref), ssim=ssim3d(ref, ref), hfen=hfen(ref, ref), psnr=psnr(ref, ref),
                rmse2=rmse(2 * ref, ref), hfen2=hfen(2 * ref, ref, crop=7))
    ok = (vals["rmse"] == 0 and vals["ssim"] == pytest.approx(1.0, abs=1e-12) and vals["hfen"] == 0
          and vals["psnr"] == 300.0 and vals["rmse2"] == pytest.approx(100.0, abs=1e-10)
          and vals["hfen2"] == pytest.approx(1.0, abs=1e-10))
    criterion(10, "metric sanity", ok, ", ".join(f"{k} {v:.6g}" for k, v in vals.items()))
    assert ok


def test_c11_round_trips(criterion, tmp_path):
    g = VoxelGrid(16, 12, 8, 0.75, 0.75, 3.0)
    rng = np.random.default_rng(0)
    ok_qvol = True
    for vol in (RealVolume(g, rng.normal(size=g.shape)),
                ComplexVolume(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape))):
        write_qvol(tmp_path / "a.qvol", vol)
        write_qvol(tmp_path / "b.qvol", read_qvol(tmp_path / "a.qvol"))
        ok_qvol &= (tmp_path / "a.qvol").read_bytes() == (tmp_path / "b.qvol").read_bytes()
    c = ComplexVolume(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape))
    back = resample_kspace(resample_kspace(c, 20, 16), 16, 12)
    pad_err = float(np.max(np.abs(back.data - c.data)) / np.max(np.abs(c.data)))
    net = ProgNet((2, 4), 2, seed=0)
    net.train()
    net(torch.randn(2, 1, 8, 12, 16))
    save_checkpoint(tmp_path / "n.qnt", net)
    loaded = load_checkpoint(tmp_path / "n.qnt")[0].eval()
    f = torch.randn(1, 1, 8, 12, 16)
    net.eval()
    same = all(torch.equal(a, b) for a, b in zip(net(f), loaded(f)))
    ok = ok_qvol and pad_err <= 1e-10 and same
    criterion(11, "round trips", ok, f"QVOL bit-identical={ok_qvol}, pad-truncate {pad_err:.1e}, checkpoint outputs equal={same}")
    assert ok


# ---------------------------------------------------------------------------
# 6-9 (+11): desk-scale pipeline


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    cfg = load_config(DESK_CONFIG)
    out = tmp_path_factory.mktemp("desk")
    times = {}
    t0 = time.perf_counter()
    harness.cmd_phantom(cfg, out)
    harness.cmd_train(cfg, out)
    times["train"] = time.perf_counter() - t0
    manifest = load_manifest(out / "dataset")
    nets = harness.load_models(out)
    rows = {}
    for fc in (1 / 2, 3 / 8, 5 / 8):
        t = time.perf_counter()
        rows[("fc", fc)] = harness._evaluate_set(cfg, out, fc, None, 1, nets, manifest, False)
        times[f"fc={fc:g}"] = time.perf_counter() - t
    for n in cfg.sweep.matrix:
        t = time.perf_counter()
        rows[("matrix", n)] = harness._evaluate_set(cfg, out, cfg.dataset.fc, n, 1, nets, manifest, False)
        times[f"matrix={n}"] = time.perf_counter() - t
    return dict(cfg=cfg, out=out, manifest=manifest, nets=nets, rows=rows, times=times)


def _means(rows):
    return {m: harness.mean_rmse(rows, m) for m in harness.METHODS}


@pytest.mark.slow
def test_c6_finetune_scope(desk, criterion):
    cfg, manifest, nets = desk["cfg"], desk["manifest"], desk["nets"]
    case = manifest_cases(manifest, "test")[0]
    inp = harness.case_inputs(manifest, case, 3 / 8)
    net = nets["prognet"]
    before = [{k: v.clone() for k, v in s.state_dict().items()} for s in net.stages]
    tuned, _, _ = fine_tune(net, inp.hpfp, inp.magnitude, inp.hpfp.grid, harness.scan_params(cfg), cfg.finetune)
    frozen = all(torch.equal(before[i][k], v) for i, s in enumerate(tuned.stages[:-1]) for k, v in s.state_dict().items())
    untouched = all(torch.equal(before[i][k], v) for i, s in enumerate(net.stages) for k, v in s.state_dict().items())
    all_rows = [r for rows in desk["rows"].values() for r in rows if r["method"].endswith("-ft")]
    loss_ok = all(r["loss_ft_final"] <= r["loss_ft_initial"] for r in all_rows)
    ok = frozen and untouched and loss_ok
    criterion(6, "fine-tuning scope", ok,
              f"stages 1..K-1 bit-identical={frozen}, stored net untouched={untouched}, "
              f"loss_FT non-increasing on {len(all_rows)} FT runs={loss_ok}")
    assert ok


@pytest.mark.slow
def test_c7_fc_direction(desk, criterion):
    parts, ok = [], True
    for fc in (3 / 8, 5 / 8):
        m = _means(desk["rows"][("fc", fc)])
        good = m["prognet-ft"] < m["prognet"] and m["unet-ft"] < m["unet"]
        ok &= good
        parts.append(f"fc={fc:g}: prognet {m['prognet']:.1f}->{m['prognet-ft']:.1f}, "
                     f"unet {m['unet']:.1f}->{m['unet-ft']:.1f}")
    elapsed = desk["times"]["train"] + desk["times"]["fc=0.375"] + desk["times"]["fc=0.625"]
    ok &= elapsed < 45 * 60
    criterion(7, "FT improves RMSE at fc 3/8 and 5/8", ok, "; ".join(parts) + f"; {elapsed / 60:.1f} min (<45)")
    assert ok


@pytest.mark.slow
def test_c8_voxel_direction(desk, criterion):
    parts, ok = [], True
    for n in desk["cfg"].sweep.matrix:
        m = _means(desk["rows"][("matrix", n)])
        good = m["prognet-ft"] < m["prognet"] and m["unet-ft"] < m["unet"]
        ok &= good
        parts.append(f"matrix {n}: prognet {m['prognet']:.1f}->{m['prognet-ft']:.1f}, "
                     f"unet {m['unet']:.1f}->{m['unet-ft']:.1f}")
    criterion(8, "FT improves RMSE across voxel sizes", ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_c9_progressive_advantage(desk, criterion):
    m = _means(desk["rows"][("fc", desk["cfg"].dataset.fc)])
    ok = m["prognet"] <= 1.05 * m["unet"]
    criterion(9, "progressive net vs single Unet", ok,
              f"mean RMSE prognet {m['prognet']:.2f} vs unet {m['unet']:.2f} (limit {1.05 * m['unet']:.2f})")
    assert ok


@pytest.mark.slow
def test_c11_checkpoint_validation_loss(desk, criterion):
    path = Path(desk["out"]) / "models" / "prognet.qnt"
    net, extra = load_checkpoint(path)
    val = sum(evaluate_l1(net, load_pairs(desk["manifest"], "val")))
    ok = val == extra["best_val"]
    criterion(11, "round trips", ok, f"reloaded val loss {val!r} == stored {extra['best_val']!r}: {ok}")
    assert ok
