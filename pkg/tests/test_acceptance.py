"""Acceptance suite: every criterion at its stated tolerance, one line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS lines. The
end-to-end criterion (9) trains a desk-tier model for 1500 steps on a
generated synthetic sequence; its artifacts are shared by criteria 9a-9c and
10 through session-scoped fixtures.
"""

import math
import time

import numpy as np
import pytest
import torch

from endodac import dumps, evalkit, geometry, synthetic
from endodac.config import desk_config, paper_config
from endodac.data import load_frame, read_manifest
from endodac.depth_net import DepthNet, DisparityPyramid, count_parameters
from endodac.dvlora import DVLoRAAdapter, TrainPhase, init_dvlora
from endodac.losses import LossConfig, total_loss
from endodac.pose_intrinsics import axis_angle_to_matrix
from endodac.trainer import run_inference, train

torch.set_num_threads(2)

GT_INTRINSICS = (0.82, 1.02, 0.5, 0.5)


def report(criterion: str, detail: str):
    print(f"PASS {criterion}: {detail}")


class Timer:
    def __enter__(self):
        self.t0 = time.time()
        return self

    def __exit__(self, *exc):
        self.seconds = time.time() - self.t0


# --- criterion 1: DV-LoRA identity & merge (< 5 s) ---------------------------

def test_criterion_1_dvlora_identity_and_merge():
    with Timer() as timer:
        gen = torch.Generator().manual_seed(0)
        # zero-init forward == frozen forward, <= 1e-7
        worst_identity = 0.0
        for trial in range(20):
            d = int(torch.randint(2, 16, (1,), generator=gen))
            k = int(torch.randint(2, 16, (1,), generator=gen))
            r = int(torch.randint(1, min(d, k) + 1, (1,), generator=gen))
            adapter = init_dvlora(d, k, r, seed=trial)
            w = torch.randn(d, k, generator=gen)
            x = torch.randn(8, k, generator=gen)
            err = (adapter(x, w) - x @ w.T).abs().max()
            worst_identity = max(worst_identity, float(err))
        assert worst_identity <= 1e-7

        # merge equivalence <= 1e-5 relative over 100 random instances
        worst_merge = 0.0
        for trial in range(100):
            d = int(torch.randint(2, 16, (1,), generator=gen))
            k = int(torch.randint(2, 16, (1,), generator=gen))
            r = int(torch.randint(1, min(d, k) + 1, (1,), generator=gen))
            adapter = init_dvlora(d, k, r, seed=trial)
            with torch.no_grad():
                adapter.B.normal_(generator=gen)
                adapter.U.normal_(generator=gen)
                adapter.V.normal_(generator=gen)
            w = torch.randn(d, k, generator=gen)
            x = torch.randn(8, k, generator=gen)
            merged = x @ adapter.merge(w).T
            forward = adapter(x, w)
            rel = (merged - forward).abs().max() / (1.0 + forward.abs().max())
            worst_merge = max(worst_merge, float(rel))
        assert worst_merge <= 1e-5
    assert timer.seconds < 5.0
    report("criterion-1", f"identity err {worst_identity:.2e}, merge rel err "
                          f"{worst_merge:.2e}, {timer.seconds:.1f}s")


# --- criterion 2: phase schedule (< 10 s) -------------------------------------

def test_criterion_2_phase_schedule_and_freezing():
    with Timer() as timer:
        rng = np.random.default_rng(0)
        warmups = [5000] + [int(v) for v in rng.integers(1, 10000, size=3)]
        for warmup in warmups:
            adapter = init_dvlora(6, 6, 3, seed=1)
            with torch.no_grad():
                adapter.B.normal_()
            opt = torch.optim.AdamW(adapter.parameters(), lr=1e-2)
            w = torch.randn(6, 6)
            x = torch.randn(4, 6)
            for step in (0, warmup - 1, warmup, warmup + 1):
                phase = adapter.set_phase(step, warmup)
                expected = TrainPhase.WARMUP if step < warmup else TrainPhase.VECTOR
                assert phase is expected
                frozen = ((adapter.U.clone(), adapter.V.clone())
                          if phase is TrainPhase.WARMUP
                          else (adapter.A.clone(), adapter.B.clone()))
                opt.zero_grad()
                adapter(x, w).square().sum().backward()
                opt.step()
                now = ((adapter.U, adapter.V) if phase is TrainPhase.WARMUP
                       else (adapter.A, adapter.B))
                for before, after in zip(frozen, now):
                    assert torch.equal(before, after)
    assert timer.seconds < 10.0
    report("criterion-2", f"flip exact at warmups {warmups}, frozen factors "
                          f"bitwise stable, {timer.seconds:.1f}s")


# --- criterion 3: geometry (< 5 s) --------------------------------------------

def test_criterion_3_projection_geometry():
    with Timer() as timer:
        gen = torch.Generator().manual_seed(7)
        checked, worst = 0, 0.0
        while checked < 1000:
            fx = float(torch.empty(1).uniform_(50, 400, generator=gen))
            fy = float(torch.empty(1).uniform_(50, 400, generator=gen))
            cx = float(torch.empty(1).uniform_(10, 90, generator=gen))
            cy = float(torch.empty(1).uniform_(10, 90, generator=gen))
            k = torch.tensor([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]],
                             dtype=torch.float64)
            rot = axis_angle_to_matrix(
                torch.randn(3, dtype=torch.float64, generator=gen) * 0.3)
            t = torch.randn(3, dtype=torch.float64, generator=gen) * 0.5
            z = float(torch.empty(1).uniform_(0.5, 8.0, generator=gen))
            u = float(torch.empty(1).uniform_(0, 100, generator=gen))
            v = float(torch.empty(1).uniform_(0, 100, generator=gen))
            p_h = torch.tensor([u, v, 1.0], dtype=torch.float64)
            rhs = k @ rot @ torch.linalg.inv(k) @ (z * p_h) + k @ t
            if float(rhs[2]) <= 1e-3:
                continue
            checked += 1
            cam = torch.cat([z * torch.linalg.inv(k) @ p_h,
                             torch.ones(1, dtype=torch.float64)])
            proj = geometry.project(cam.reshape(1, 4, 1, 1), k, rot, t)
            zp = proj.depth[0, 0, 0, 0]
            lhs = torch.cat([proj.grid[0, 0, 0] * zp, zp.reshape(1)])
            scale = float(rhs.abs().max().clamp(min=1.0))
            worst = max(worst, float((lhs - rhs).abs().max()) / scale)
        assert worst <= 1e-6

        # round trip
        depth = torch.rand(1, 1, 16, 20, dtype=torch.float64, generator=gen) * 5 + 0.5
        k = torch.tensor([[100.0, 0, 10], [0, 90.0, 8], [0, 0, 1]], dtype=torch.float64)
        proj = geometry.project(geometry.backproject(depth, torch.linalg.inv(k)),
                                k, torch.eye(3, dtype=torch.float64),
                                torch.zeros(3, dtype=torch.float64))
        base = geometry.pixel_grid(16, 20, dtype=torch.float64)[:2].permute(1, 2, 0)
        round_trip = float((proj.grid - base).abs().max())
        assert round_trip <= 1e-6

        # hand oracle
        k = torch.tensor([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
        depth = torch.full((1, 1, 101, 101), 2.0)
        proj = geometry.project(geometry.backproject(depth, torch.linalg.inv(k)),
                                k, torch.eye(3), torch.tensor([0.0, 0.0, 1.0]))
        assert torch.allclose(proj.grid[0, 50, 50], torch.tensor([50.0, 50.0]),
                              atol=1e-4)
        assert abs(float(proj.depth[0, 0, 50, 50]) - 3.0) <= 1e-6
    assert timer.seconds < 5.0
    report("criterion-3", f"1000 tuples worst {worst:.2e}, round trip "
                          f"{round_trip:.2e}, hand case exact, {timer.seconds:.1f}s")


# --- criterion 4: differentiability (< 60 s) ----------------------------------

def _fd_check(forward, params, grads, eps=1e-6, rel_tol=1e-3, samples=12):
    for p_idx, (param, grad) in enumerate(zip(params, grads)):
        flat = param.detach().clone().reshape(-1)
        stride = max(1, flat.numel() // samples)
        for i in range(0, flat.numel(), stride):
            orig = flat[i].item()
            fresh = [q.detach().clone() for q in params]
            fresh[p_idx].reshape(-1)[i] = orig + eps
            up = float(forward(fresh))
            fresh[p_idx].reshape(-1)[i] = orig - eps
            down = float(forward(fresh))
            num = (up - down) / (2 * eps)
            ana = float(grad.reshape(-1)[i])
            denom = max(abs(num), abs(ana), 1e-4)
            assert abs(num - ana) / denom < rel_tol, (p_idx, i, num, ana)


def test_criterion_4_gradients_match_finite_differences():
    with Timer() as timer:
        gen = torch.Generator().manual_seed(3)
        h = w = 8
        src = torch.rand(1, 3, h, w, generator=gen, dtype=torch.float64)
        target = torch.rand(1, 3, h, w, generator=gen, dtype=torch.float64)

        # synthesize: mean of reconstruction wrt depth, pose, K
        def synth_forward(params):
            depth, aa, t, kv = params
            zero = kv[0] * 0
            k = torch.stack([
                torch.stack([kv[0], zero, kv[2]]),
                torch.stack([zero, kv[1], kv[3]]),
                torch.stack([zero, zero, zero + 1]),
            ])
            recon, _ = geometry.synthesize(src, depth, k,
                                           axis_angle_to_matrix(aa), t)
            return recon.mean()

        synth_params = [
            (torch.rand(1, 1, h, w, generator=gen, dtype=torch.float64) * 2 + 1
             ).requires_grad_(True),
            torch.tensor([0.02, -0.03, 0.01], dtype=torch.float64,
                         requires_grad=True),
            torch.tensor([0.05, 0.02, -0.04], dtype=torch.float64,
                         requires_grad=True),
            torch.tensor([7.0, 6.5, 3.7, 4.2], dtype=torch.float64,
                         requires_grad=True),
        ]
        loss = synth_forward(synth_params)
        grads = torch.autograd.grad(loss, synth_params)
        _fd_check(synth_forward, synth_params, grads)

        # total_loss wrt pyramid, poses, K
        sources = [torch.rand(1, 3, h, w, generator=gen, dtype=torch.float64)
                   for _ in range(2)]
        config = LossConfig(min_depth=0.5, max_depth=10.0)

        def loss_forward(params):
            disps, aa, t, kv = params[:4], params[4], params[5], params[6]
            zero = kv[0] * 0
            k = torch.stack([
                torch.stack([kv[0], zero, kv[2]]),
                torch.stack([zero, kv[1], kv[3]]),
                torch.stack([zero, zero, zero + 1]),
            ])
            pyramid = DisparityPyramid(maps=tuple(disps))
            from endodac.pose_intrinsics import RelativePose
            poses = [RelativePose(axis_angle=aa[i:i + 1], translation=t[i:i + 1])
                     for i in range(2)]
            value, _ = total_loss(target, sources, pyramid, poses, k, config)
            return value

        loss_params = [
            (torch.rand(1, 1, h // 2 ** s, w // 2 ** s, generator=gen,
                        dtype=torch.float64) * 0.6 + 0.2).requires_grad_(True)
            for s in range(4)
        ] + [
            torch.tensor([[0.02, -0.01, 0.015], [-0.02, 0.01, 0.01]],
                         dtype=torch.float64, requires_grad=True),
            torch.tensor([[0.05, -0.03, 0.04], [-0.04, 0.02, -0.05]],
                         dtype=torch.float64, requires_grad=True),
            torch.tensor([6.5, 7.5, 3.9, 4.1], dtype=torch.float64,
                         requires_grad=True),
        ]
        loss = loss_forward(loss_params)
        grads = torch.autograd.grad(loss, loss_params)
        _fd_check(loss_forward, loss_params, grads)
    assert timer.seconds < 60.0
    report("criterion-4", f"synthesize + total_loss gradients within 1e-3 of "
                          f"central differences, {timer.seconds:.1f}s")


# --- criterion 5: losses (< 10 s) ----------------------------------------------

def test_criterion_5_loss_properties():
    with Timer() as timer:
        from endodac.losses import edge_aware_smoothness, photometric_loss, ssim
        gen = torch.Generator().manual_seed(0)
        img = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64)
        # SSIM self-similarity and symmetry
        assert float((ssim(img, img) - 1).abs().max()) <= 1e-6
        other = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64)
        assert float((ssim(img, other) - ssim(other, img)).abs().max()) <= 1e-6
        # constant-image closed form
        a = torch.full((1, 1, 8, 8), 0.2, dtype=torch.float64)
        b = torch.full((1, 1, 8, 8), 0.4, dtype=torch.float64)
        closed = (2 * 0.2 * 0.4 + 1e-4) / (0.2 ** 2 + 0.4 ** 2 + 1e-4)
        assert float((ssim(a, b) - closed).abs().max()) <= 1e-6
        # photometric exactness vs independent recomputation
        alpha = 0.85
        expected = alpha * (1 - ssim(img, other).mean(1, keepdim=True)) / 2 \
            + (1 - alpha) * (img - other).abs().mean(1, keepdim=True)
        assert float((photometric_loss(img, other, alpha) - expected)
                     .abs().max()) <= 1e-6
        # smoothness scale invariance and constant-disparity zero
        disp = torch.rand(1, 1, 9, 9, generator=gen, dtype=torch.float64) + 0.1
        base = float(edge_aware_smoothness(disp, img[:, :, :9, :9]))
        for k in (0.01, 3.0, 1000.0):
            scaled = float(edge_aware_smoothness(disp * k, img[:, :, :9, :9]))
            assert abs(scaled - base) <= 1e-6 * max(abs(base), 1.0)
        const = float(edge_aware_smoothness(torch.full((1, 1, 6, 6), 0.4,
                                                       dtype=torch.float64),
                                            img[:, :, :6, :6]))
        assert const == 0.0
    assert timer.seconds < 10.0
    report("criterion-5", f"SSIM/photometric/smoothness identities within 1e-6, "
                          f"{timer.seconds:.1f}s")


# --- criterion 6: metrics oracle (< 5 s) ----------------------------------------

def test_criterion_6_metrics_against_scalar_loop():
    with Timer() as timer:
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(50):
            gt = rng.uniform(0.5, 20.0, size=16)
            pred = rng.uniform(0.1, 25.0, size=16)
            m = evalkit.depth_metrics(pred, gt)
            # scalar loop oracle
            vals = []
            for p, g in zip(pred, gt):
                p = min(max(p, 1e-3), 150.0)
                vals.append((abs(g - p) / g, (g - p) ** 2 / g, (g - p) ** 2,
                             (math.log(g) - math.log(p)) ** 2,
                             1.0 if max(g / p, p / g) < 1.25 else 0.0))
            cols = list(zip(*vals))
            oracle = (np.mean(cols[0]), np.mean(cols[1]),
                      math.sqrt(np.mean(cols[2])), math.sqrt(np.mean(cols[3])),
                      np.mean(cols[4]))
            got = (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta)
            worst = max(worst, max(abs(a - b) for a, b in zip(got, oracle)))
        assert worst <= 1e-10

        m = evalkit.depth_metrics(np.array([1.0, 2.0, 4.0]),
                                  np.array([2.0, 2.0, 2.0]))
        assert m.abs_rel == pytest.approx(0.5, abs=1e-12)
        assert m.sq_rel == pytest.approx(5 / 6, abs=1e-12)
        assert m.rmse == pytest.approx(math.sqrt(5 / 3), abs=1e-12)
        assert m.delta == pytest.approx(1 / 3, abs=1e-12)

        gt = rng.uniform(1.0, 10.0, size=64)
        pred = gt * rng.uniform(0.7, 1.3, size=64)
        base = evalkit.depth_metrics(evalkit.median_scale(pred, gt), gt).abs_rel
        for s in rng.uniform(1e-3, 1e3, size=10):
            scaled = evalkit.depth_metrics(
                evalkit.median_scale(pred * s, gt), gt).abs_rel
            assert scaled == pytest.approx(base, rel=1e-9)
    assert timer.seconds < 5.0
    report("criterion-6", f"metrics match scalar loop to {worst:.1e}; hand case "
                          f"and median-scaling invariance hold, {timer.seconds:.1f}s")


# --- criterion 7: pose / ATE (< 5 s) ---------------------------------------------

def test_criterion_7_ate_properties():
    with Timer() as timer:
        rng = np.random.default_rng(2)

        def trajectory(n):
            poses = [np.eye(4)]
            for _ in range(n - 1):
                step = np.eye(4)
                step[:3, :3] = axis_angle_to_matrix(
                    torch.tensor(rng.normal(size=3) * 0.1)).numpy()
                step[:3, 3] = rng.normal(size=3) * 0.3
                poses.append(poses[-1] @ step)
            return poses

        def relatives(poses):
            return [np.linalg.inv(poses[i]) @ poses[i + 1]
                    for i in range(len(poses) - 1)]

        gt = relatives(trajectory(12))
        assert evalkit.ate_5frame(gt, gt) == pytest.approx(0.0, abs=1e-12)

        doubled = []
        for r in gt:
            d = r.copy()
            d[:3, 3] *= 2
            doubled.append(d)
        assert evalkit.ate_5frame(doubled, gt) == pytest.approx(0.0, abs=1e-10)

        gt_abs = trajectory(9)
        pred_abs = trajectory(9)
        base = evalkit.ate_5frame(relatives(pred_abs), relatives(gt_abs))
        worst = 0.0
        for _ in range(20):
            g = np.eye(4)
            g[:3, :3] = axis_angle_to_matrix(torch.tensor(rng.normal(size=3))).numpy()
            g[:3, 3] = rng.normal(size=3) * 5
            moved = evalkit.ate_5frame(relatives([g @ p for p in pred_abs]),
                                       relatives([g @ p for p in gt_abs]))
            worst = max(worst, abs(moved - base))
        assert worst <= 1e-8
    assert timer.seconds < 5.0
    report("criterion-7", f"ATE zero/scale/rigid-invariance (worst drift "
                          f"{worst:.1e}), {timer.seconds:.1f}s")


# --- criterion 8: parameter efficiency (< 30 s) -----------------------------------

def test_criterion_8_parameter_efficiency():
    with Timer() as timer:
        config = paper_config()
        torch.manual_seed(0)
        net = DepthNet(config.encoder_config(), config.decoder_config())
        total, _ = count_parameters(net)
        trainable = net.trainable_union_count()
        assert trainable / total < 0.025
        assert abs(total - 99.0e6) <= 0.1 * 99.0e6
        assert abs(trainable - 1.6e6) <= 0.1 * 1.6e6
    assert timer.seconds < 30.0
    report("criterion-8", f"total {total/1e6:.2f}M, trainable {trainable/1e6:.3f}M "
                          f"({100*trainable/total:.2f}%), {timer.seconds:.1f}s")


# --- criteria 9 + 10: synthetic end-to-end (< 15 min) ------------------------------

@pytest.fixture(scope="session")
def synth_sequence(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_seq")
    with Timer() as timer:
        manifest = synthetic.generate_synthetic_sequence(
            11, 60, (64, 80), GT_INTRINSICS, None, root)
    return manifest, timer.seconds


@pytest.fixture(scope="session")
def desk_run(synth_sequence, tmp_path_factory):
    manifest, gen_seconds = synth_sequence
    out = tmp_path_factory.mktemp("acceptance_run")
    config = desk_config(seed=3, epochs=100, warmup_steps=200)
    with Timer() as timer:
        result = train(config, [manifest], out / "train")
    with Timer() as infer_timer:
        info = run_inference(result.best_checkpoint, manifest, out / "dumps")
    return {
        "manifest": manifest,
        "result": result,
        "info": info,
        "dump_dir": out / "dumps",
        "seconds": gen_seconds + timer.seconds + infer_timer.seconds,
    }


def test_criterion_9a_photometric_halves(desk_run):
    history = desk_run["result"].history
    assert 500 <= len(history) <= 1500
    first = float(np.mean([d["photometric"] for d in history[:10]]))
    last = float(np.mean([d["photometric"] for d in history[-10:]]))
    assert last <= 0.5 * first, f"photometric {first:.5f} -> {last:.5f}"
    report("criterion-9a", f"photometric {first:.5f} -> {last:.5f} "
                           f"({100 * (1 - last / first):.0f}% drop) over "
                           f"{len(history)} steps")


def test_criterion_9b_intrinsics_within_15_percent(desk_run):
    manifest = desk_run["manifest"]
    rows = dumps.read_intrinsics(desk_run["dump_dir"] / "intrinsics.txt")
    errors = evalkit.intrinsics_error([rows], manifest.intrinsics, [len(manifest)])
    assert errors[0] <= 15.0, f"fx error {errors[0]:.2f}%"
    assert errors[1] <= 15.0, f"fy error {errors[1]:.2f}%"
    report("criterion-9b", f"fx err {errors[0]:.2f}%, fy err {errors[1]:.2f}% "
                           f"(cx {errors[2]:.2f}%, cy {errors[3]:.2f}%)")


def test_criterion_9b_focal_error_decreases_smoothed(desk_run):
    # joint-calibration invariant: the smoothed focal error shrinks over training
    history = desk_run["result"].history
    fx_gt = GT_INTRINSICS[0]
    err = np.array([abs(d["fx_norm"] - fx_gt) for d in history])
    window = 100
    start = float(err[:window].mean())
    end = float(err[-window:].mean())
    assert end < start, f"smoothed |fx err| {start:.4f} -> {end:.4f}"
    report("criterion-9b+", f"smoothed |fx-gt| {start:.4f} -> {end:.4f}")


def test_criterion_9c_depth_delta(desk_run):
    manifest = desk_run["manifest"]
    deltas = []
    for i in range(desk_run["info"]["frames"]):
        pred = dumps.read_depth(desk_run["dump_dir"] / "depth" / f"{i:06d}.edac")
        gt = dumps.read_depth(manifest.depth_file(i))
        mask = evalkit.valid_depth_mask(gt, 150.0)
        pred = evalkit.median_scale(pred, gt, mask)
        deltas.append(evalkit.depth_metrics(pred, gt, depth_cap=150.0).delta)
    delta = float(np.mean(deltas))
    assert delta >= 0.6, f"delta {delta:.3f}"
    report("criterion-9c", f"median-scaled delta {delta:.3f} over "
                           f"{len(deltas)} frames")


def test_criterion_9_runtime(desk_run):
    assert desk_run["seconds"] < 15 * 60
    report("criterion-9", f"generate+train+infer in {desk_run['seconds']:.0f}s "
                          f"(< 15 min)")


def test_criterion_10_warp_oracle(synth_sequence):
    manifest, _ = synth_sequence
    with Timer() as timer:
        k = synthetic.intrinsics_matrix(manifest.intrinsics, 80, 64)
        kt = torch.from_numpy(k)
        errs = []
        for t in (5, 20, 35, 50):
            target = load_frame(manifest.frame_file(t), (64, 80)).double()
            source = load_frame(manifest.frame_file(t + 1), (64, 80)).double()
            depth_t = dumps.read_depth(manifest.depth_file(t)).astype(np.float64)
            depth_s = dumps.read_depth(manifest.depth_file(t + 1)).astype(np.float64)
            rel = synthetic.relative_pose(dumps.read_pose(manifest.pose_file(t + 1)),
                                          dumps.read_pose(manifest.pose_file(t)))
            recon, valid = geometry.synthesize(
                source[None], torch.from_numpy(depth_t)[None, None], kt,
                torch.from_numpy(rel[:3, :3]), torch.from_numpy(rel[:3, 3]))
            visible = synthetic.occlusion_mask(depth_t, depth_s, k, rel)
            mask = valid[0, 0].numpy() & visible
            err = float((recon[0] - target).abs().mean(dim=0).numpy()[mask].mean())
            errs.append(err)
            assert err < 0.02, f"pair ({t}, {t + 1}): {err:.4f}"
    assert timer.seconds < 10.0
    report("criterion-10", f"warp errors {[round(e, 4) for e in errs]} < 0.02, "
                           f"{timer.seconds:.1f}s")
