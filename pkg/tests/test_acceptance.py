"""Primary acceptance criteria, one test each, each reporting a PASS/FAIL line."""

import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from melisa import autodiff as ad
from melisa import cli
from melisa import metrics as M
from melisa.autodiff import Tensor
from melisa.backbone import DenoiserNet, assemble_input
from melisa.io import read_manifest, read_trajectories
from melisa.objectives import (TIC_WEIGHTS, WindowBatch, avg_velocity, flow_jvp, interpolate,
                               sample_mask, tic_loss, velocity_target, winc_mf_loss)
from melisa.rollout import generate_block, rollout
from melisa.solver import (KolmogorovSolver, SolverConfig, enstrophy, grid, random_vorticity)

from conftest import (dot_grads, param_directional_fd, randomize_output, random_direction, record,
                      small_config)

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.cfg"


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_autodiff_soundness():
    start = time.perf_counter()
    worst = 0.0
    seeds = range(20)
    for seed in seeds:
        g = np.random.default_rng(seed)
        c = small_config(window=2)
        net = DenoiserNet(c, seed=seed)
        randomize_output(net, g)
        x = g.standard_normal((1, c.in_channels, 16, 16))
        t = np.array([g.uniform(0.2, 1.0)])
        r = t * g.uniform(0.0, 1.0)
        weight = g.standard_normal((1, c.out_channels, 16, 16))
        loss = lambda: ad.sum(ad.mul(net.forward(x, t, r), weight))

        # reverse mode, parameter direction
        d = random_direction(net, g)
        grads = ad.grad(loss(), net.parameters)
        worst = max(worst, rel(dot_grads(net, grads, d), param_directional_fd(net, loss, d, 1e-4)))

        # reverse mode, input direction
        xt = Tensor(x, requires_grad=True)
        (gx,) = ad.grad(ad.sum(ad.mul(net.forward(xt, t, r), weight)), [xt])
        dx = g.standard_normal(x.shape)
        f = lambda xx: float(np.sum(net.forward(xx, t, r).data * weight))
        h = 1e-4
        fd = (4 * (f(x + h / 2 * dx) - f(x - h / 2 * dx)) / h
              - (f(x + h * dx) - f(x - h * dx)) / (2 * h)) / 3
        worst = max(worst, rel(float(np.sum(gx * dx)), fd))

        # forward mode along input and time
        fwd = lambda xx, tt: net.forward(xx, tt, r)
        tangents = (dx, np.ones(1))
        _, tan = ad.jvp(fwd, (x, t), tangents)
        num = ad.numeric_jvp(fwd, (x, t), tangents, 1e-4)
        worst = max(worst, float(np.max(np.abs(tan - num)) / np.max(np.abs(num))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    record("autodiff soundness", ok,
           f"max rel err {worst:.2e} (< 1e-4) over {len(seeds)} seeds in {elapsed:.1f}s (< 60s)")
    assert ok


def plain_fm_loss(net, batch):
    t = np.maximum(batch.t, 1e-3)
    z = interpolate(batch.x, batch.eps, t)
    d = ad.reshape(net.forward(assemble_input(Tensor(z), batch.x, batch.mask), t, t),
                   batch.x.shape)
    u = avg_velocity(Tensor(z), d, t)
    return ad.mean(ad.square(ad.sub(u, velocity_target(batch.x, batch.eps))))


def test_meanflow_degeneracy():
    g = np.random.default_rng(0)
    net = DenoiserNet(small_config(window=6), seed=0)
    randomize_output(net, g)
    same = True
    for _ in range(5):
        x = g.standard_normal((3, 6, 1, 16, 16))
        t = g.uniform(0.0, 1.0, 3)
        batch = WindowBatch(x, g.standard_normal(x.shape), t, t.copy(), sample_mask(6, 0.8, g, 3))
        a = winc_mf_loss(net, batch).data.tobytes()
        b = plain_fm_loss(net, batch).data.tobytes()
        same &= a == b
    record("MeanFlow degeneracy", same, "t=r WinC-MF loss equals plain FM loss bitwise on 5 batches")
    assert same


def test_sg_contract():
    g = np.random.default_rng(1)
    net = DenoiserNet(small_config(window=3), seed=1)
    randomize_output(net, g)
    x = g.standard_normal((2, 3, 1, 16, 16))
    t = np.array([0.9, 0.6])
    batch = WindowBatch(x, g.standard_normal(x.shape), t, np.array([0.2, 0.35]),
                        np.array([[False, True, False], [False, True, True]]))
    frozen = flow_jvp(net, batch)
    grads = ad.grad(winc_mf_loss(net, batch), net.parameters)
    worst = 0.0
    for _ in range(4):
        d = random_direction(net, g)
        fd = param_directional_fd(net, lambda: winc_mf_loss(net, batch, jac=frozen), d, 1e-4)
        worst = max(worst, rel(dot_grads(net, grads, d), fd))
    ok = worst < 1e-8
    record("sg contract", ok, f"mixed-mode grad vs frozen-JVP oracle rel err {worst:.2e} (< 1e-8)")
    assert ok


def test_mask_statistics():
    n, w, rate = 100_000, 6, 0.8
    obs = (~sample_mask(w, rate, np.random.default_rng(2024), n)).sum(axis=1)
    sigma = math.sqrt((w - 1) * rate * (1 - rate) / n)
    mean = float(obs.mean())
    ok = abs(mean - 2.0) < 3 * sigma
    record("mask statistics", ok, f"mean observed frames {mean:.4f}, |mean-2| < 3 sigma = {3 * sigma:.4f}")
    assert ok


def test_tic_exactness():
    g = np.random.default_rng(3)
    zero = True
    for _ in range(50):
        # dyadic rationals: adding a per-window constant is exact in binary floating point
        x = g.integers(-512, 512, (2, 6, 1, 8, 8)) / 64.0
        shift = g.integers(-4096, 4096, (2, 1, 1, 1, 1)) / 8.0
        zero &= float(tic_loss(x, x + shift, TIC_WEIGHTS).data) == 0.0
    generic = max(float(tic_loss(x, x + c, TIC_WEIGHTS).data)
                  for x, c in ((g.standard_normal((2, 6, 1, 8, 8)), g.standard_normal((2, 1, 1, 1, 1)))
                               for _ in range(20)))
    xs = np.array([0.0, 1.0, 3.0]).reshape(3, 1, 1, 1)
    xh = np.array([0.0, 2.0, 3.0]).reshape(3, 1, 1, 1)
    hand = float(tic_loss(xs, xh, (1.0, 1.0)).data)
    ok = zero and abs(hand - 1.0) < 1e-12 and generic < 1e-28
    record("TIC exactness", ok,
           f"shifted windows give 0 exactly on 50 dyadic draws (generic floats: {generic:.1e}); "
           f"W=3 hand example {hand!r}")
    assert ok


def test_solver_fidelity():
    start = time.perf_counter()
    n, nu, dt = 64, 1e-2, 1e-3
    s = KolmogorovSolver(SolverConfig(n=n, viscosity=nu, dt=dt, forcing_amplitude=0.0))
    y, x = grid(n)
    w0 = np.cos(x) * np.cos(y)
    w = np.fft.ifft2(s.integrate(np.fft.fft2(w0), 100)).real
    exact = w0 * np.exp(-2 * nu * 100 * dt)
    tg = float(np.max(np.abs(w - exact)) / np.max(np.abs(exact)))

    g = np.random.default_rng(4)
    s2 = KolmogorovSolver(SolverConfig(n=n, forcing_amplitude=0.0))
    w_hat = random_vorticity(n, g)
    div = 0.0
    monotone = True
    prev = enstrophy(w_hat)
    for _ in range(200):
        w_hat = s2.step(w_hat)
        u, v = s2.velocity(w_hat)
        div = max(div, float(np.max(np.abs(s2.divergence(u, v)))))
        cur = enstrophy(w_hat)
        monotone &= cur <= prev
        prev = cur
    elapsed = time.perf_counter() - start
    ok = tg < 1e-6 and div < 1e-10 and monotone and elapsed < 60
    record("solver fidelity", ok,
           f"Taylor-Green rel err {tg:.1e}, max divergence {div:.1e}, "
           f"enstrophy monotone {monotone}, {elapsed:.1f}s at N=64")
    assert ok


def test_metric_identities():
    g = np.random.default_rng(5)
    ref = np.cumsum(g.standard_normal((3, 60, 1, 16, 16)), axis=1)
    ens = np.repeat(ref[None], 4, axis=0)
    rep = M.evaluate(ref, ref, ensemble=ens)
    expect = {"RL2": 0.0, "SSIM": 1.0, "PSDD": 0.0, "TKED": 0.0, "MRD": 0.0}
    dev = {k: float(np.max(np.abs(rep.values[k] - v))) for k, v in expect.items()}
    crps_err = 0.0
    bounded = True
    for _ in range(10):
        e = g.standard_normal((10, 5, 8, 8))
        y = g.standard_normal((5, 8, 8))
        crps_err = max(crps_err, float(np.max(np.abs(M.crps(e, y) - M.crps_brute(e, y)))))
        bounded &= float(np.mean(M.crps(e, y))) <= M.ensemble_mae(e, y)
        noisy = ref[None] + g.standard_normal((3,) + ref.shape)
        # evaluate() itself asserts CRPS <= MAE per trajectory
        M.evaluate(noisy[0], ref, t_eval=20, ensemble=noisy)
    ok = max(dev.values()) < 1e-10 and crps_err < 1e-12 and bounded
    record("metric identities", ok,
           "self-eval deviations " + ", ".join(f"{k} {v:.0e}" for k, v in dev.items())
           + f"; CRPS vs brute force {crps_err:.1e}; CRPS <= MAE {bounded}")
    assert ok


def test_mixing_rate_recovery():
    t, lam0 = 81, 0.2
    idx = np.arange(t)
    rows = np.linalg.cholesky(np.exp(-lam0 * np.abs(idx[:, None] - idx[None])))
    traj = np.concatenate([rows, -rows], axis=1).reshape(1, t, 1, 1, 2 * t)
    lam = M.mixing_rate(traj, 20)
    ok = abs(lam - lam0) < 1e-6
    record("mixing-rate recovery", ok, f"fitted lambda {lam:.10f} vs 0.2 (tol 1e-6)")
    assert ok


def test_rollout_contract():
    g = np.random.default_rng(6)
    nets = {w: DenoiserNet(small_config(window=w), seed=w) for w in (2, 3, 4, 6)}
    for net in nets.values():
        randomize_output(net, g)
    cases = 0
    ok = True
    for _ in range(40):
        w = int(g.choice(list(nets)))
        net = nets[w]
        ctx = int(g.integers(1, w))
        w_in = int(g.integers(ctx, ctx + 4))
        w_out = int(g.integers(1, 13))
        s = w - ctx
        obs = g.standard_normal((w_in, 1, 16, 16))
        before = net.calls
        out = rollout(net, obs, w_out, g, context=ctx)
        ok &= out.shape[0] == w_out and net.calls - before == math.ceil(w_out / s)
        cases += 1
    net = nets[6]
    before = net.calls
    generate_block(net, g.standard_normal((2, 1, 16, 16)), g)
    single = net.calls - before == 1
    ok &= single
    record("rollout contract", ok,
           f"length == W_out and NFE == ceil(W_out/S) on {cases} random cases; one call per block {single}")
    assert ok


# -- end-to-end ---------------------------------------------------------------------------


def _run(verb, cfg, out, *extra):
    code = cli.main([verb, "--config", str(cfg), "--out", str(out), *extra])
    assert code == 0, f"{verb} exited with {code}"


@pytest.mark.slow
def test_end_to_end_desk_run(tmp_path):
    out = tmp_path / "desk"
    t0 = time.perf_counter()
    _run("generate", DESK_CONFIG, out)
    t1 = time.perf_counter()
    _run("train", DESK_CONFIG, out)
    t2 = time.perf_counter()
    _run("rollout", DESK_CONFIG, out)

    train = read_trajectories(out / "data" / "train.mltr")
    test = read_trajectories(out / "data" / "test.mltr")
    ctx, horizon = 2, 40
    pred = np.stack([read_trajectories(out / "rollout" / f"traj{i}_m0.mltr")[0]
                     for i in range(test.shape[0])])
    ref = test[:, ctx:ctx + horizon]
    persistence = np.repeat(test[:, ctx - 1:ctx], horizon, axis=1)
    climatology = np.broadcast_to(train.mean(axis=(0, 1)), ref.shape)
    scores = {
        "model": (M.rl2(pred, ref, 40), M.psdd(pred, ref)),
        "persistence": (M.rl2(persistence, ref, 40), M.psdd(persistence, ref)),
        "climatology": (M.rl2(climatology, ref, 40), M.psdd(climatology, ref)),
    }
    train_hours = (t2 - t1) / 3600
    rl2_ok = scores["model"][0] < min(scores["persistence"][0], scores["climatology"][0])
    psdd_ok = scores["model"][1] < scores["persistence"][1]
    ok = rl2_ok and psdd_ok and train_hours < 2.0
    detail = ", ".join(f"{k} RL2(40) {v[0]:.4f} PSDD {v[1]:.4f}" for k, v in scores.items())
    record("end-to-end desk run", ok,
           f"{detail}; generation {t1 - t0:.0f}s, training {train_hours:.2f}h (< 2h)")
    keep = ROOT / "runs" / "acceptance"
    keep.mkdir(parents=True, exist_ok=True)
    (keep / "desk_scores.json").write_text(json.dumps(
        {"scores": scores, "train_hours": train_hours, "generate_seconds": t1 - t0}, indent=2) + "\n")
    shutil.copy(out / "train" / "loss.csv", keep / "desk_loss.csv")
    assert ok


TIMING_KEYS = {"start", "end", "seconds"}


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


TINY = """\
n = 32
save_every = 5
burn_in = 20
n_traj = 4
n_frames = 24
split_train = 0.5
split_val = 0.25
split_test = 0.25
net_depth = 1
net_width = 8
net_embed_dim = 8
steps = 4
batch_size = 2
rollout_horizon = 12
rollout_ensemble = 2
log_level = WARNING
"""


def test_pipeline_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for verb in ("generate", "train", "rollout", "evaluate"):
            _run(verb, cfg, out)
        runs.append(out)
    files = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(runs[1]) for p in runs[1].rglob("*") if p.is_file())
    identical = 0
    mismatched = []
    for rel_path in files:
        a, b = (r / rel_path for r in runs)
        if rel_path.suffix == ".json":
            same = _strip_timing(read_manifest(a)) == _strip_timing(read_manifest(b))
        else:
            same = a.read_bytes() == b.read_bytes()
        identical += same
        if not same:
            mismatched.append(str(rel_path))
    ok = not mismatched
    record("determinism", ok,
           f"{identical}/{len(files)} outputs identical across two generate-train-rollout-evaluate "
           f"runs (manifests compared without wall-clock fields)"
           + (f"; differing: {mismatched}" if mismatched else ""))
    assert ok
