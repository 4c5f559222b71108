"""Acceptance criteria, one test per criterion, each printing a PASS line.

Criterion 8 trains the full study once (session fixture); criterion 10
repeats the data pipeline and the full study with identical seeds and
compares artifacts byte for byte. Run with ``pytest tests/test_acceptance.py
-v -s`` to watch the per-criterion lines live.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import knn_bruteforce, recon_loss_bruteforce, rigid_loss_bruteforce
from vpd import cli
from vpd.ablation import run_ablation
from vpd.denoiser import (
    DenoiserConfig,
    augment_channels,
    denoise_backward,
    denoise_forward,
    init_params,
    raw_forward,
)
from vpd.diffusion import add_noise, diff_loss, make_schedule, sample_z0
from vpd.geomreg import LossWeights, build_neighbor_graph, fd_gradient_oracle, recon_loss, rigid_loss
from vpd.scenegen import SceneSpec, TrackSet, normalize_uvd, project
from vpd.tensorio import read_tensor
from vpd.trackprep import KalmanSpec, kalman_smooth

SEED = 20240
ABLATION_KW = dict(seed=SEED, scenes_train=64, scenes_eval=16, frames=8, size=32,
                   stride=4, rgb_iters=600, joint_iters=2000)


def _ok(name: str, detail: str = ""):
    print(f"[PASS] {name}" + (f": {detail}" if detail else ""))


def _rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# shared artifacts

def _gen_and_prep(root: Path, scenes: int, seed: int):
    assert cli.main(["gen-data", "--scenes", str(scenes), "--frames", "8",
                     "--size", "32x32", "--stride", "4",
                     "--out", str(root / "raw"), "--seed", str(seed)]) == 0
    assert cli.main(["prep", "--in", str(root / "raw"), "--out", str(root / "data"),
                     "--sigma", "0", "--no-kalman", "--seed", str(seed)]) == 0


@pytest.fixture(scope="session")
def alg1_artifacts(tmp_path_factory):
    root = tmp_path_factory.mktemp("alg1")
    _gen_and_prep(root, scenes=20, seed=404)
    return root


@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    started = time.perf_counter()
    report = run_ablation(root, **ABLATION_KW)
    elapsed = time.perf_counter() - started
    return root, report, elapsed


# ---------------------------------------------------------------------------
# criteria

def test_criterion_1_loss_oracle_equivalence():
    rng = np.random.default_rng(SEED)
    started = time.perf_counter()
    worst_recon = worst_rigid = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 9))
        n = int(rng.integers(4, 65))
        pt = rng.standard_normal((t, n, 3))
        gt = rng.standard_normal((t, n, 3))
        w = LossWeights(c0=float(rng.uniform(0.1, 2)), c1=float(rng.uniform(0.1, 2)),
                        c2=float(rng.uniform(0.1, 2)))
        loss, _ = recon_loss(pt, gt, w)
        ref = recon_loss_bruteforce(pt, gt, w.c0, w.c1, w.c2)
        worst_recon = max(worst_recon, abs(loss - ref) / max(abs(ref), 1e-300))
        graph = build_neighbor_graph(pt[0], k=3)
        loss_r, _ = rigid_loss(pt, graph)
        ref_r = rigid_loss_bruteforce(pt, graph.pairs.tolist(), graph.rest_dist.tolist())
        worst_rigid = max(worst_rigid, abs(loss_r - ref_r) / max(abs(ref_r), 1e-300))
    elapsed = time.perf_counter() - started
    assert worst_recon <= 1e-12
    assert worst_rigid <= 1e-12
    assert elapsed < 10.0
    _ok("criterion 1 loss oracle equivalence",
        f"recon rel {worst_recon:.2e}, rigid rel {worst_rigid:.2e}, {elapsed:.1f}s")


def test_criterion_2_gradient_correctness():
    rng = np.random.default_rng(SEED + 1)
    started = time.perf_counter()

    pt = rng.standard_normal((4, 16, 3)) + 3.0
    gt = rng.standard_normal((4, 16, 3))
    w = LossWeights(c0=1.0, c1=0.8, c2=0.6)
    _, g = recon_loss(pt, gt, w)
    fd = fd_gradient_oracle(lambda p: recon_loss(p, gt, w)[0], pt, h=1e-5)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), 1e-8)
    err_recon = float((np.abs(g - fd) / denom).max())

    p0 = 2.0 * rng.standard_normal((12, 3))
    graph = build_neighbor_graph(p0, k=4)
    batch = rng.standard_normal((4, 12, 3)) * 0.3 + p0[None]
    _, g_r = rigid_loss(batch, graph)
    fd_r = fd_gradient_oracle(lambda p: rigid_loss(p, graph)[0], batch, h=1e-5)
    denom = np.maximum(np.maximum(np.abs(fd_r), np.abs(g_r)), 1e-6)
    err_rigid = float((np.abs(g_r - fd_r) / denom).max())

    cfg = DenoiserConfig(in_channels=6, hidden_channels=8, depth=1, time_embed_dim=8,
                         cond_channels=6, use_cross_attention=True, attention_heads=2)
    params = init_params(cfg, seed=SEED)
    z = rng.standard_normal((2, 8, 8, 6)).astype(np.float32)
    cond = rng.random((8, 8, 3)).astype(np.float32)
    eps = rng.standard_normal(z.shape)
    out, cache = denoise_forward(params, cfg, z, 5, cond, dtype=np.float64, want_cache=True)
    _, d_eps = diff_loss(out, eps)
    grad = denoise_backward(params, cfg, cache, d_eps)
    vec = params.vector.astype(np.float64)
    h = 1e-5
    err_den = 0.0
    for i in range(vec.size):
        orig = vec[i]
        vec[i] = orig + h
        hi = diff_loss(raw_forward(vec, params.layout, cfg, z, 5, cond, dtype=np.float64)[0], eps)[0]
        vec[i] = orig - h
        lo = diff_loss(raw_forward(vec, params.layout, cfg, z, 5, cond, dtype=np.float64)[0], eps)[0]
        vec[i] = orig
        fd_i = (hi - lo) / (2 * h)
        denom_i = max(abs(fd_i), abs(grad[i]), 1e-10)
        err_den = max(err_den, abs(fd_i - grad[i]) / denom_i)

    elapsed = time.perf_counter() - started
    assert err_recon <= 1e-6
    assert err_rigid <= 1e-6
    assert err_den <= 1e-3
    assert elapsed < 120.0
    _ok("criterion 2 gradient correctness",
        f"recon {err_recon:.2e}, rigid {err_rigid:.2e}, "
        f"denoiser {err_den:.2e} over {vec.size} params, {elapsed:.1f}s")


def test_criterion_3_rigidity_isometry_invariance():
    rng = np.random.default_rng(SEED + 2)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(6, 24))
        p0 = rng.standard_normal((n, 3)) * float(rng.uniform(0.5, 3.0))
        graph = build_neighbor_graph(p0, k=4)
        frames = [p0]
        for _ in range(int(rng.integers(1, 5))):
            frames.append(p0 @ _rotation(rng).T + rng.standard_normal(3))
        loss, _ = rigid_loss(np.stack(frames), graph)
        worst = max(worst, loss)
    assert worst <= 1e-9

    worst_rel = 0.0
    for s in (0.5, 2.0):
        p0 = rng.standard_normal((16, 3))
        graph = build_neighbor_graph(p0, k=4)
        t_frames = 4
        frames = np.stack([p0] + [s * p0] * (t_frames - 1))
        loss, _ = rigid_loss(frames, graph)
        closed = (t_frames - 1) * (s - 1.0) ** 2 * float((graph.rest_dist**2).sum())
        worst_rel = max(worst_rel, abs(loss - closed) / closed)
    assert worst_rel <= 1e-9
    _ok("criterion 3 rigidity isometry invariance",
        f"isometry max {worst:.2e}, scaling rel {worst_rel:.2e}")


def test_criterion_4_algorithm1_postconditions(alg1_artifacts):
    started = time.perf_counter()
    data = alg1_artifacts / "data"
    scenes = sorted(d for d in data.iterdir() if d.is_dir())
    assert len(scenes) == 20
    for scene in scenes:
        grid = read_tensor(scene / "pointgrid.vpt")
        mask = read_tensor(scene / "mask.vpt") > 0.5
        world = read_tensor(scene / "tracks.vpt").astype(np.float64)
        meta = json.loads((scene / "scene.json").read_text())
        cam = SceneSpec.from_json(json.dumps(meta["spec"])).camera
        anchors = [tuple(a) for a in meta["anchors"]]

        # background pixels exactly zero
        assert np.abs(grid[:, ~mask, :]).max(initial=0.0) == 0.0

        # tracked pixels bit-for-bit equal to the projected ground truth
        trajs = {}
        for i, (u, v) in enumerate(anchors):
            expected = normalize_uvd(project(world[:, i, :], cam), cam)
            expected[0, 0] = u / cam.width
            expected[0, 1] = v / cam.height
            trajs[(u, v)] = expected
            if mask[v, u]:
                assert grid[:, v, u, :].tobytes() == expected.astype(np.float32).tobytes()

        # interpolated pixels are convex combinations of their 3 nearest anchors
        anchor_keys = [a for a in anchors if mask[a[1], a[0]]]
        anchor_set = set(anchor_keys)
        for r, c in np.argwhere(mask):
            if (c, r) in anchor_set:
                continue
            scored = knn_bruteforce(anchor_keys, (c, r), k=min(3, len(anchor_keys)))
            weights = np.array([1.0 / d for d, _ in scored])
            weights /= weights.sum()
            assert np.all(weights >= 0.0)
            assert abs(weights.sum() - 1.0) <= 1e-6
            blend = sum(w * trajs[anchor_keys[idx]] for w, (_, idx) in zip(weights, scored))
            assert np.allclose(grid[:, r, c, :], blend, atol=1e-5)
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    _ok("criterion 4 algorithm-1 postconditions", f"20 scenes in {elapsed:.1f}s")


def test_criterion_5_kalman_efficacy():
    rng = np.random.default_rng(SEED + 3)
    sigma = 0.02
    t = 24
    ratios, devs = [], []
    for _ in range(120):
        v = rng.uniform(-0.1, 0.1, size=3)
        clean = np.arange(t)[:, None] * v + rng.uniform(-1, 1, size=3)
        noisy = clean + rng.normal(0, sigma, size=(t, 3))
        noisy[0] = clean[0]
        tracks = TrackSet(world=noisy[:, None, :], anchor_uv=np.zeros((1, 2), np.int32),
                          object_id=np.zeros(1, np.int32))
        out = kalman_smooth(tracks, KalmanSpec(process_var=1e-4, measure_var=1e-2))
        sm = out.world[:, 0, :]

        def msd(x):
            d2 = x[2:] - 2 * x[1:-1] + x[:-2]
            return float((d2**2).mean())

        ratios.append(msd(sm) / msd(noisy))
        devs.append(float(np.abs(sm - clean).max()))
    assert np.mean(ratios) <= 0.5
    assert max(devs) <= 3 * sigma
    _ok("criterion 5 kalman efficacy",
        f"mean second-difference ratio {np.mean(ratios):.3f}, max dev {max(devs):.4f} "
        f"<= {3 * sigma}")


def test_criterion_6_ddim_inversion():
    rng = np.random.default_rng(SEED + 4)
    sched = make_schedule(1000)
    cfg = DenoiserConfig(in_channels=6, hidden_channels=8, depth=1, time_embed_dim=8,
                         cond_channels=6)
    params = init_params(cfg, seed=0)
    cond = np.zeros((8, 8, 3), np.float32)
    worst = 0.0
    for t in (11, 250, 500, 999, 1000):
        z0 = rng.standard_normal((2, 8, 8, 6)).astype(np.float32)
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        z_t = add_noise(z0, eps, t, sched).astype(np.float32)
        for n_steps in (1, 5, 20):
            back, _ = sample_z0(params, cfg, z_t, t, n_steps, sched, cond,
                                predictor=lambda z, s: eps)
            worst = max(worst, float(np.abs(back - z0).max()))
    assert worst <= 1e-4
    _ok("criterion 6 ddim inversion", f"max abs error {worst:.2e}")


def test_criterion_7_zero_init_augmentation_identity():
    rng = np.random.default_rng(SEED + 5)
    rgb_cfg = DenoiserConfig(in_channels=3, hidden_channels=16, depth=2,
                             time_embed_dim=16, cond_channels=3)
    rgb_params = init_params(rgb_cfg, seed=SEED)
    joint_params, joint_cfg = augment_channels(rgb_params, rgb_cfg,
                                               use_cross_attention=True)
    worst = -1.0
    for _ in range(10):
        z_rgb = rng.standard_normal((3, 16, 16, 3)).astype(np.float32)
        z_pts = rng.standard_normal((3, 16, 16, 3)).astype(np.float32)
        cond = rng.random((16, 16, 3)).astype(np.float32)
        t = int(rng.integers(0, 1000))
        rgb_out, _ = denoise_forward(rgb_params, rgb_cfg, z_rgb, t, cond)
        joint_out, _ = denoise_forward(joint_params, joint_cfg,
                                       np.concatenate([z_rgb, z_pts], axis=-1), t, cond)
        worst = max(worst, float(np.abs(joint_out[..., :3] - rgb_out).max()))
        assert not joint_out[..., 3:].any()
    assert worst == 0.0
    _ok("criterion 7 zero-init augmentation identity",
        "rgb slice max abs diff 0, point channels exactly zero")


def test_criterion_8_ablation_ordering(ablation):
    root, report, elapsed = ablation
    mse = report["point_mse"]
    rig = report["rigidity"]
    assert mse["untrained"] >= 10.0 * mse["no_reg"], mse
    assert mse["with_reg"] <= mse["no_reg"], mse
    assert rig["with_reg"] <= rig["no_reg"], rig
    assert elapsed <= 1800.0
    _ok("criterion 8 ablation ordering",
        f"mse untrained {mse['untrained']:.4f} >= 10x no-reg {mse['no_reg']:.4f}; "
        f"with-reg {mse['with_reg']:.4f} <= no-reg; "
        f"rigidity {rig['with_reg']:.4f} <= {rig['no_reg']:.4f}; {elapsed:.0f}s")


def test_criterion_9_regularization_cadence(ablation):
    root, _, _ = ablation
    recs = [json.loads(l)
            for l in (root / "run_reg" / "metrics.jsonl").read_text().splitlines()]
    assert len(recs) == ABLATION_KW["joint_iters"]
    for rec in recs:
        should_fire = rec["iteration"] % 5 == 0
        assert (rec["l_recon"] is not None) == should_fire
        assert (rec["l_rigid"] is not None) == should_fire
    plain = [json.loads(l)
             for l in (root / "run_joint" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["l_recon"] is None for r in plain)
    _ok("criterion 9 regularization cadence",
        f"recon/rigid non-null exactly every 5th of {len(recs)} records")


def _tree_bytes(root: Path, names) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name in names:
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_criterion_10_determinism(alg1_artifacts, ablation, tmp_path_factory):
    # repeat criterion 4's pipeline with the same seed
    again4 = tmp_path_factory.mktemp("alg1_repeat")
    _gen_and_prep(again4, scenes=20, seed=404)
    names = {"video.vpt", "tracks.vpt", "mask.vpt", "scene.json",
             "pointgrid.vpt", "joint.vpt"}
    assert _tree_bytes(alg1_artifacts, names) == _tree_bytes(again4, names)

    # repeat criterion 8's full study with the same seed
    root, report, _ = ablation
    again8 = tmp_path_factory.mktemp("ablation_repeat")
    report2 = run_ablation(again8, **ABLATION_KW)
    names8 = names | {"metrics.jsonl", "params.vpt", "checkpoint.json", "opt_m.npy",
                      "opt_v.npy", "ablation.json", "report_untrained.json",
                      "report_no_reg.json", "report_with_reg.json"}
    a = _tree_bytes(root, names8)
    b = _tree_bytes(again8, names8)
    assert sorted(a) == sorted(b)
    diffs = [k for k in a if a[k] != b[k]]
    assert diffs == []
    assert report2 == report
    _ok("criterion 10 determinism",
        f"criteria 4 and 8 reruns byte-identical across {len(a)} files")
