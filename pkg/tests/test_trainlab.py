import json
from dataclasses import replace

import numpy as np
import pytest

from vpd.denoiser import DenoiserConfig, DenoiserParams, augment_channels, build_layout, init_params
from vpd.diffusion import add_noise, make_schedule
from vpd.errors import LayoutError, ParameterError, PipelineError, StagingError
from vpd.geomreg import LossWeights, build_neighbor_graph
from vpd.trainlab import (
    Model,
    Optimizer,
    OptimizerConfig,
    TrainConfig,
    eval_point_mse,
    eval_rigidity,
    eval_smoothness,
    evaluate_scenes,
    lambdas_from_means,
    load_checkpoint,
    load_dataset,
    run_training,
    save_checkpoint,
)


def _tiny_cfg(data_dir, stage="rgb", iterations=6, **kw):
    base = TrainConfig(
        data_dir=str(data_dir),
        stage=stage,
        iterations=iterations,
        batch_size=2,
        seed=7,
        optimizer=OptimizerConfig(kind="adam", lr=1e-3),
        weights=LossWeights(cadence_k=5),
        z0_steps=5,
        model=DenoiserConfig(in_channels=3, hidden_channels=8, depth=1,
                             time_embed_dim=8, cond_channels=3),
        schedule_steps=100,
    )
    return replace(base, **kw)


class TestOptimizer:
    def test_sgd_zero_momentum_is_plain_descent(self):
        opt = Optimizer(OptimizerConfig(kind="sgd", lr=0.1, momentum=0.0), 1)
        params = np.array([2.0], dtype=np.float32)
        grad = np.array([4.0])  # d/dx of x^2 at x=2
        opt.step(params, grad)
        assert params[0] == pytest.approx(2.0 - 0.1 * 4.0, abs=1e-7)

    def test_sgd_momentum_accumulates(self):
        opt = Optimizer(OptimizerConfig(kind="sgd", lr=0.1, momentum=0.9), 1)
        params = np.array([0.0], dtype=np.float32)
        opt.step(params, np.array([1.0]))
        opt.step(params, np.array([1.0]))
        assert params[0] == pytest.approx(-0.1 - 0.19, abs=1e-6)

    def test_adam_deterministic(self):
        a = Optimizer(OptimizerConfig(kind="adam", lr=1e-2), 3)
        b = Optimizer(OptimizerConfig(kind="adam", lr=1e-2), 3)
        pa = np.ones(3, dtype=np.float32)
        pb = np.ones(3, dtype=np.float32)
        for i in range(5):
            g = np.array([1.0, -2.0, 0.5]) * (i + 1)
            a.step(pa, g)
            b.step(pb, g)
        assert pa.tobytes() == pb.tobytes()

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            OptimizerConfig(kind="rmsprop")


class TestLambdaCalibration:
    def test_stated_rule(self):
        assert lambdas_from_means(0.5, 5.0, 0.05) == pytest.approx((1.0, 0.1, 10.0))

    def test_equal_means(self):
        assert lambdas_from_means(0.3, 0.3, 0.3) == pytest.approx((1.0, 1.0, 1.0))

    def test_zero_mean_guard(self):
        with pytest.warns(UserWarning):
            out = lambdas_from_means(0.5, 1.0, 0.0)
        assert out == pytest.approx((1.0, 0.5, 0.0))


class TestDiagnostics:
    def test_static_prediction_zero(self, rng):
        p0 = rng.standard_normal((10, 3))
        graph = build_neighbor_graph(p0, k=3)
        batch = np.repeat(p0[None], 5, axis=0)
        assert eval_rigidity(batch, graph) == 0.0
        assert eval_smoothness(batch) == 0.0

    def test_isometry_rigidity_zero(self, rng):
        p0 = rng.standard_normal((10, 3))
        graph = build_neighbor_graph(p0, k=3)
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        frames = np.stack([p0, p0 @ rot.T + 1.0, p0 @ rot.T - 2.0])
        assert eval_rigidity(frames, graph) < 1e-12

    def test_linear_translation(self, rng):
        p0 = rng.standard_normal((8, 3))
        graph = build_neighbor_graph(p0, k=3)
        shift = np.array([0.1, 0.0, -0.2])
        frames = np.stack([p0 + tau * shift for tau in range(5)])
        assert eval_smoothness(frames) < 1e-12
        assert eval_rigidity(frames, graph) < 1e-12


class TestTrainingLoop:
    def test_metrics_one_record_per_iteration(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=4)
        summary = run_training(cfg, tmp_path / "run")
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert [json.loads(l)["iteration"] for l in lines] == [0, 1, 2, 3]

    def test_cadence_fields(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=4)
        rgb = run_training(cfg, tmp_path / "rgb")
        reg_cfg = _tiny_cfg(clean_dataset, stage="joint+reg", iterations=12,
                            weights=LossWeights(cadence_k=5, lambda_recon=1e-3,
                                                lambda_rigid=1e-5))
        summary = run_training(reg_cfg, tmp_path / "reg", resume=rgb["checkpoint"])
        non_null = [r.iteration for r in summary["records"] if r.l_recon is not None]
        assert non_null == [0, 5, 10]
        for r in summary["records"]:
            assert (r.l_recon is None) == (r.iteration % 5 != 0)
            assert r.l_diff >= 0.0 and r.total >= 0.0

    def test_zero_reg_weights_match_plain_joint(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=3)
        rgb = run_training(cfg, tmp_path / "rgb")
        joint_cfg = _tiny_cfg(clean_dataset, stage="joint", iterations=6)
        reg_cfg = _tiny_cfg(clean_dataset, stage="joint+reg", iterations=6,
                            weights=LossWeights(cadence_k=2, lambda_recon=0.0,
                                                lambda_rigid=0.0))
        a = run_training(joint_cfg, tmp_path / "joint", resume=rgb["checkpoint"])
        b = run_training(reg_cfg, tmp_path / "reg", resume=rgb["checkpoint"])
        for ra, rb in zip(a["records"], b["records"]):
            assert ra.l_diff == rb.l_diff
        pa = load_checkpoint(a["checkpoint"])[0].params.vector
        pb = load_checkpoint(b["checkpoint"])[0].params.vector
        assert pa.tobytes() == pb.tobytes()

    def test_rgb_learning_smoke(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=200,
                        optimizer=OptimizerConfig(kind="adam", lr=2e-3))
        summary = run_training(cfg, tmp_path / "run")
        losses = [r.l_diff for r in summary["records"]]
        assert np.mean(losses[-50:]) < np.mean(losses[:50])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort_mentions_batch(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=2)
        scenes = load_dataset(cfg.data_dir, cfg.knn_k)
        from vpd.trainlab import _stage_model, train_step

        model, opt, _ = _stage_model(cfg, None)
        model.params.vector[0] = np.inf
        sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
        with pytest.raises(PipelineError, match="scene_"):
            train_step(model, scenes, np.array([0, 1]), cfg, sched, opt, 0)

    def test_stage_requires_resume(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, stage="joint", iterations=2)
        with pytest.raises(StagingError):
            run_training(cfg, tmp_path / "run")


class TestCheckpoints:
    def test_round_trip_bit_exact(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=3)
        summary = run_training(cfg, tmp_path / "run")
        model, loaded_cfg, it, opt = load_checkpoint(summary["checkpoint"])
        again = save_checkpoint(tmp_path / "copy", model, loaded_cfg, it, opt)
        a = (tmp_path / "run" / "checkpoint" / "params.vpt").read_bytes()
        b = (tmp_path / "copy" / "params.vpt").read_bytes()
        assert a == b
        assert it == 3

    def test_resume_equals_straight_run(self, clean_dataset, tmp_path):
        straight = run_training(_tiny_cfg(clean_dataset, iterations=8), tmp_path / "a")
        half = run_training(_tiny_cfg(clean_dataset, iterations=4), tmp_path / "b1")
        resumed = run_training(_tiny_cfg(clean_dataset, iterations=8), tmp_path / "b2",
                               resume=half["checkpoint"])
        tail = [(r.iteration, r.l_diff, r.total) for r in resumed["records"]]
        ref = [(r.iteration, r.l_diff, r.total) for r in straight["records"][4:]]
        assert tail == ref
        pa = load_checkpoint(straight["checkpoint"])[0].params.vector
        pb = load_checkpoint(resumed["checkpoint"])[0].params.vector
        assert pa.tobytes() == pb.tobytes()

    def test_rgb_params_rejected_by_joint_layout(self):
        rgb_cfg = DenoiserConfig(in_channels=3, hidden_channels=8, depth=1,
                                 time_embed_dim=8, cond_channels=3)
        joint_cfg = replace(rgb_cfg, in_channels=6, cond_channels=6)
        rgb_params = init_params(rgb_cfg, seed=0)
        with pytest.raises(LayoutError):
            DenoiserParams(vector=rgb_params.vector, layout=build_layout(joint_cfg))

    def test_checkpoint_layout_mismatch_prints_both(self, clean_dataset, tmp_path):
        cfg = _tiny_cfg(clean_dataset, iterations=2)
        summary = run_training(cfg, tmp_path / "run")
        meta_path = tmp_path / "run" / "checkpoint" / "checkpoint.json"
        meta = json.loads(meta_path.read_text())
        meta["denoiser"]["hidden_channels"] = 16
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(LayoutError, match="stored"):
            load_checkpoint(tmp_path / "run" / "checkpoint")


@pytest.fixture(scope="module")
def joint_model(clean_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("evalmodels")
    rgb = run_training(_tiny_cfg(clean_dataset, iterations=3), out / "rgb")
    joint = run_training(_tiny_cfg(clean_dataset, stage="joint", iterations=3),
                         out / "joint", resume=rgb["checkpoint"])
    model, cfg, _, _ = load_checkpoint(joint["checkpoint"])
    return model, cfg


class TestEvaluation:
    def test_oracle_predictor_recovers_exactly(self, clean_dataset, joint_model):
        model, cfg = joint_model
        scenes = load_dataset(clean_dataset, cfg.knn_k)
        sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
        seed = 5
        t_eval = sched.steps // 2
        draws = {}
        for i, scene in enumerate(scenes):
            r = np.random.default_rng([seed, 555007, i])
            draws[i] = r.standard_normal(scene.joint_signal.shape, dtype=np.float32)
        counter = {"i": -1}

        def oracle(z, step):
            return draws[counter["i"]]

        def pred_factory(i):
            counter["i"] = i
            return oracle

        # replicate the evaluation loop with the exact-noise oracle
        from vpd.trainlab import _decode_points
        from vpd.diffusion import sample_z0

        mses = []
        for i, scene in enumerate(scenes):
            eps = draws[i]
            z_t = add_noise(scene.joint_signal, eps, t_eval, sched).astype(np.float32)
            z0, _ = sample_z0(model.params, model.cfg, z_t, t_eval, 20, sched, scene.cond,
                              predictor=pred_factory(i))
            uvd, _ = _decode_points(z0, scene)
            err = uvd - scene.gt_uvd.astype(np.float64)
            mses.append(float((err**2).mean()))
        assert max(mses) < 1e-6

    def test_untrained_model_closed_form_mse(self, clean_dataset):
        # widened random RGB model predicts exactly zero point noise, so the
        # recovered estimate is z0 + sqrt((1-a)/a) * eps and the storage-space
        # MSE is (1-a)/(4a) * E[eps^2]
        rgb_cfg = DenoiserConfig(in_channels=3, hidden_channels=8, depth=1,
                                 time_embed_dim=8, cond_channels=3)
        params, joint_cfg = augment_channels(init_params(rgb_cfg, seed=0), rgb_cfg,
                                             use_cross_attention=False)
        model = Model(cfg=joint_cfg, params=params, stage="joint")
        scenes = load_dataset(clean_dataset, 8)
        sched = make_schedule(100)
        report = evaluate_scenes(model, scenes, sched, seed=3)
        ab = sched.alpha_bar[report["t_eval"]]
        expected = (1 - ab) / (4 * ab)
        assert report["point_mse"] == pytest.approx(expected, rel=0.05)

    def test_eval_requires_joint_model(self, clean_dataset):
        rgb_cfg = DenoiserConfig(in_channels=3, hidden_channels=8, depth=1,
                                 time_embed_dim=8, cond_channels=3)
        model = Model(cfg=rgb_cfg, params=init_params(rgb_cfg, 0), stage="rgb")
        scenes = load_dataset(clean_dataset, 8)
        with pytest.raises(StagingError):
            evaluate_scenes(model, scenes, make_schedule(10))

    def test_deterministic_per_seed(self, clean_dataset, joint_model):
        model, cfg = joint_model
        scenes = load_dataset(clean_dataset, cfg.knn_k)
        sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
        a = evaluate_scenes(model, scenes, sched, seed=1)
        b = evaluate_scenes(model, scenes, sched, seed=1)
        c = evaluate_scenes(model, scenes, sched, seed=2)
        assert a == b
        assert a["point_mse"] != c["point_mse"]

    def test_mse_wrapper(self, clean_dataset, joint_model):
        model, cfg = joint_model
        scenes = load_dataset(clean_dataset, cfg.knn_k)
        sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
        assert eval_point_mse(model, scenes, sched, seed=1) == \
            evaluate_scenes(model, scenes, sched, seed=1)["point_mse"]

    def test_empty_eval_set_rejected(self, joint_model):
        model, cfg = joint_model
        with pytest.raises(ParameterError):
            evaluate_scenes(model, [], make_schedule(10))
