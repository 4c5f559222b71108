"""Training and evaluation of the joint video+point model.

Two-stage recipe: train a 3-channel model on RGB first, then widen it with
zero-initialized point channels and fine-tune jointly. In the regularized
stage, once every ``cadence_k`` iterations the noisy latent is driven back
to a clean estimate with a short DDIM sub-schedule (gradients through the
final step only), its point channels are decoded to world coordinates, and
the reconstruction and rigidity losses join the denoising objective.

Every random draw is keyed by (seed, iteration), so resuming from a
checkpoint reproduces the uninterrupted run exactly and full runs are
bit-reproducible. Metrics are logged as one JSON object per iteration;
wall-clock time is kept out of the log so repeated runs produce
byte-identical files.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geomreg
from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    Layout,
    augment_channels,
    build_layout,
    denoise_backward,
    denoise_forward,
    init_params,
)
from .diffusion import NoiseSchedule, add_noise, diff_loss, make_schedule, sample_z0, sample_z0_grad
from .errors import LayoutError, ParameterError, PipelineError, StagingError
from .geomreg import LossWeights, NeighborGraph, build_neighbor_graph, recon_loss, rigid_loss, total_loss
from .scenegen import CameraIntrinsics, unproject_normalized, unproject_normalized_vjp
from .tensorio import from_signal, read_tensor, to_signal, write_tensor

STAGES = ("rgb", "joint", "joint+reg")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"          # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "momentum": self.momentum}

    @staticmethod
    def from_dict(d: dict) -> "OptimizerConfig":
        return OptimizerConfig(**d)


class Optimizer:
    """Momentum SGD or Adam on the flat float32 parameter vector.

    Moments are kept in float64; the update is computed in float64 and cast
    back to float32 storage, deterministically.
    """

    def __init__(self, cfg: OptimizerConfig, n_params: int):
        self.cfg = cfg
        self.step_count = 0
        if cfg.kind == "adam":
            self.m = np.zeros(n_params)
            self.v = np.zeros(n_params)
        else:
            self.m = np.zeros(n_params)
            self.v = np.zeros(0)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        g = np.asarray(grad, dtype=np.float64)
        self.step_count += 1
        c = self.cfg
        if c.kind == "adam":
            self.m = c.beta1 * self.m + (1 - c.beta1) * g
            self.v = c.beta2 * self.v + (1 - c.beta2) * g * g
            mhat = self.m / (1 - c.beta1 ** self.step_count)
            vhat = self.v / (1 - c.beta2 ** self.step_count)
            update = c.lr * mhat / (np.sqrt(vhat) + c.eps)
        else:
            self.m = c.momentum * self.m + g
            update = c.lr * self.m
        params[...] = (params.astype(np.float64) - update).astype(np.float32)

    def load_state(self, m: np.ndarray, v: np.ndarray, step: int) -> None:
        self.m = np.asarray(m, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        self.step_count = int(step)


@dataclass(frozen=True)
class TrainConfig:
    data_dir: str = ""
    stage: str = "rgb"
    iterations: int = 100
    batch_size: int = 2
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    calibrate: bool = False
    calibration_samples: int = 8
    z0_steps: int = 20
    knn_k: int = 8
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations <= 0:
            raise ParameterError("iterations must be positive")
        if self.batch_size <= 0:
            raise ParameterError("batch_size must be positive")
        if self.z0_steps < 1:
            raise ParameterError("z0_steps must be >= 1")

    def to_dict(self) -> dict:
        return {
            "data_dir": self.data_dir, "stage": self.stage,
            "iterations": self.iterations, "batch_size": self.batch_size,
            "seed": self.seed, "optimizer": self.optimizer.to_dict(),
            "weights": self.weights.to_dict(), "calibrate": self.calibrate,
            "calibration_samples": self.calibration_samples,
            "z0_steps": self.z0_steps, "knn_k": self.knn_k,
            "model": self.model.to_dict(), "schedule_steps": self.schedule_steps,
            "beta_min": self.beta_min, "beta_max": self.beta_max,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
        if "weights" in d:
            d["weights"] = LossWeights.from_dict(d["weights"])
        if "model" in d:
            d["model"] = DenoiserConfig.from_dict(d["model"])
        return TrainConfig(**d)


@dataclass
class MetricsRecord:
    iteration: int
    l_diff: float
    l_recon: float | None
    l_rigid: float | None
    total: float
    point_mse: float | None = None
    wall_clock_ms: float = 0.0

    def to_json_line(self) -> str:
        # wall-clock stays out of the log so reruns are byte-identical
        return json.dumps(
            {
                "iteration": self.iteration,
                "l_diff": self.l_diff,
                "l_recon": self.l_recon,
                "l_rigid": self.l_rigid,
                "total": self.total,
                "point_mse": self.point_mse,
            }
        )


@dataclass
class PreparedScene:
    """One prepared scene held in memory for training/eval."""

    name: str
    cam: CameraIntrinsics
    joint_signal: np.ndarray      # [T,H,W,6] float32 in [-1,1]
    cond: np.ndarray              # [H,W,3] float32 in [-1,1]
    mask: np.ndarray              # [H,W] bool
    pixels: np.ndarray            # [N,2] (row, col) foreground, row-major
    gt_uvd: np.ndarray            # [T,N,3] float32 storage-space point values
    gt_world: np.ndarray          # [T,N,3] float64
    graph: NeighborGraph


def load_prepared_scene(scene_dir: Path, knn_k: int = 8) -> PreparedScene:
    scene_dir = Path(scene_dir)
    joint = read_tensor(scene_dir / "joint.vpt")
    mask = read_tensor(scene_dir / "mask.vpt") > 0.5
    meta = json.loads((scene_dir / "scene.json").read_text())
    cam = CameraIntrinsics.from_dict(meta["spec"]["camera"])
    pixels = np.argwhere(mask)
    gt_uvd = joint[:, pixels[:, 0], pixels[:, 1], 3:]
    gt_world = unproject_normalized(gt_uvd.astype(np.float64), cam)
    n = pixels.shape[0]
    k = min(knn_k, max(n - 1, 1))
    if n >= 2:
        graph = build_neighbor_graph(gt_world[0], k)
    else:
        graph = NeighborGraph(pairs=np.zeros((0, 2), np.int32), rest_dist=np.zeros(0), k=k)
    return PreparedScene(
        name=scene_dir.name,
        cam=cam,
        joint_signal=to_signal(joint).astype(np.float32),
        cond=to_signal(joint[0, :, :, :3]).astype(np.float32),
        mask=mask,
        pixels=pixels,
        gt_uvd=gt_uvd,
        gt_world=gt_world,
        graph=graph,
    )


def load_dataset(data_dir, knn_k: int = 8) -> list[PreparedScene]:
    data_dir = Path(data_dir)
    dirs = sorted(d for d in data_dir.iterdir() if d.is_dir() and (d / "joint.vpt").exists())
    if not dirs:
        raise ParameterError(f"no prepared scenes under {data_dir}")
    return [load_prepared_scene(d, knn_k) for d in dirs]


@dataclass
class Model:
    """Denoiser parameters plus everything needed to run them."""

    cfg: DenoiserConfig
    params: DenoiserParams
    stage: str

    def eps(self, z_t, t, cond, dtype=np.float32):
        out, _ = denoise_forward(self.params, self.cfg, z_t, t, cond, dtype=dtype)
        return out


def _scene_z0(scene: PreparedScene, stage: str) -> np.ndarray:
    if stage == "rgb":
        return scene.joint_signal[..., :3]
    return scene.joint_signal


def _decode_points(z0_signal: np.ndarray, scene: PreparedScene):
    """Point channels of a joint signal tensor -> world-coordinate batch."""
    uvd = from_signal(z0_signal[..., 3:].astype(np.float64))
    batch = uvd[:, scene.pixels[:, 0], scene.pixels[:, 1], :]
    world = unproject_normalized(batch, scene.cam)
    return batch, world


def _reg_world_grad_to_z0(g_world, uvd_batch, scene: PreparedScene, shape):
    """Chain d(loss)/d(world) back to d(loss)/d(z0 signal tensor)."""
    d_uvd = unproject_normalized_vjp(uvd_batch, scene.cam, g_world)
    d_z0 = np.zeros(shape, dtype=np.float64)
    d_z0[:, scene.pixels[:, 0], scene.pixels[:, 1], 3:] = 0.5 * d_uvd
    return d_z0


def train_step(
    model: Model,
    scenes: list[PreparedScene],
    batch_idx: np.ndarray,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    opt: Optimizer,
    iteration: int,
) -> MetricsRecord:
    """One optimization step on the given batch of scenes.

    Always steps on the denoising loss; in stage "joint+reg", on iterations
    where ``iteration % cadence_k == 0`` it additionally recovers a clean
    estimate (final-step-only gradients), decodes point channels to world
    coordinates and adds the weighted reconstruction and rigidity losses.
    """
    started = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, iteration, 1])
    w = cfg.weights
    reg_now = model.stage == "joint+reg" and iteration % w.cadence_k == 0

    n_par = model.params.layout.total
    grad = np.zeros(n_par)
    l_diff_sum = 0.0
    l_recon_sum = 0.0
    l_rigid_sum = 0.0
    bsz = len(batch_idx)
    draws = []
    for s in batch_idx:
        scene = scenes[int(s)]
        z0 = _scene_z0(scene, model.stage)
        t = int(rng.integers(1, sched.steps + 1))
        eps = rng.standard_normal(z0.shape, dtype=np.float32)
        draws.append((scene, z0, t, eps))

    for scene, z0, t, eps in draws:
        z_t = add_noise(z0, eps, t, sched).astype(np.float32)
        eps_hat, cache = denoise_forward(model.params, model.cfg, z_t, t, scene.cond,
                                         want_cache=True)
        l_diff, d_eps = diff_loss(eps_hat, eps)
        grad += (w.lambda_diff / bsz) * denoise_backward(model.params, model.cfg, cache, d_eps)
        l_diff_sum += l_diff / bsz

        if reg_now:
            z0_tilde, zcache = sample_z0(
                model.params, model.cfg, z_t, t, cfg.z0_steps, sched, scene.cond,
                grad_mode="final_step_only",
            )
            uvd_batch, world = _decode_points(z0_tilde, scene)
            l_recon, g_recon = recon_loss(world, scene.gt_world, w)
            l_rigid, g_rigid = rigid_loss(world, scene.graph)
            g_world = w.lambda_recon * g_recon + w.lambda_rigid * g_rigid
            d_z0 = _reg_world_grad_to_z0(g_world, uvd_batch, scene, z0_tilde.shape)
            grad += sample_z0_grad(model.params, model.cfg, zcache, d_z0) / bsz
            l_recon_sum += l_recon / bsz
            l_rigid_sum += l_rigid / bsz

    if reg_now:
        total = total_loss(l_diff_sum, l_recon_sum, l_rigid_sum, w)
    else:
        total = w.lambda_diff * l_diff_sum
    if not (np.isfinite(total) and np.all(np.isfinite(grad))):
        names = [scenes[int(s)].name for s in batch_idx]
        raise PipelineError(
            f"non-finite loss at iteration {iteration}: total={total}, batch={names}, "
            f"t={[d[2] for d in draws]}"
        )
    opt.step(model.params.vector, grad)
    return MetricsRecord(
        iteration=iteration,
        l_diff=l_diff_sum,
        l_recon=l_recon_sum if reg_now else None,
        l_rigid=l_rigid_sum if reg_now else None,
        total=total,
        wall_clock_ms=(time.perf_counter() - started) * 1e3,
    )


# ---------------------------------------------------------------------------
# calibration

def lambdas_from_means(mean_diff: float, mean_recon: float, mean_rigid: float) -> tuple[float, float, float]:
    """lambda_diff = 1 and the other weights scaled so all three objectives
    start at comparable magnitude; zero-mean terms get weight 0."""
    out = [1.0, 0.0, 0.0]
    for idx, m in ((1, float(mean_recon)), (2, float(mean_rigid))):
        if m == 0.0:
            warnings.warn(f"calibrate_lambdas: objective {idx} has zero mean; weight set to 0")
        else:
            out[idx] = float(mean_diff) / m
    return tuple(out)


def _calibration_draws(model: Model, scenes, cfg: TrainConfig, sched: NoiseSchedule):
    n = min(cfg.calibration_samples, len(scenes))
    if n == 0:
        raise ParameterError("calibration needs at least one sample scene")
    for i in range(n):
        scene = scenes[i]
        rng = np.random.default_rng([cfg.seed, 777001, i])
        z0 = _scene_z0(scene, model.stage)
        t = int(rng.integers(1, sched.steps + 1))
        eps = rng.standard_normal(z0.shape, dtype=np.float32)
        z_t = add_noise(z0, eps, t, sched).astype(np.float32)
        z0_tilde, _ = sample_z0(model.params, model.cfg, z_t, t, cfg.z0_steps, sched,
                                scene.cond, grad_mode="none")
        yield scene, t, eps, z_t, z0_tilde


def calibrate_weights(model: Model, scenes, cfg: TrainConfig, sched: NoiseSchedule) -> LossWeights:
    """Set c weights from the raw reconstruction terms, then the lambda
    weights from the mean objective magnitudes, on initial model outputs."""
    pairs = []
    cached = []
    for scene, t, eps, z_t, z0_tilde in _calibration_draws(model, scenes, cfg, sched):
        _, world = _decode_points(z0_tilde, scene)
        pairs.append((world, scene.gt_world))
        cached.append((scene, t, eps, z_t, world))
    c0, c1, c2 = geomreg.calibrate_c(pairs)
    w_c = replace(cfg.weights, c0=c0, c1=c1, c2=c2)

    l_diff = l_recon = l_rigid = 0.0
    for scene, t, eps, z_t, world in cached:
        eps_hat = model.eps(z_t, t, scene.cond)
        l_diff += diff_loss(eps_hat, eps)[0] / len(cached)
        l_recon += recon_loss(world, scene.gt_world, w_c)[0] / len(cached)
        l_rigid += rigid_loss(world, scene.graph)[0] / len(cached)
    ld, lr, lg = lambdas_from_means(l_diff, l_recon, l_rigid)
    return replace(w_c, lambda_diff=ld, lambda_recon=lr, lambda_rigid=lg)


def calibrate_lambdas(model: Model, scenes, cfg: TrainConfig, sched: NoiseSchedule) -> LossWeights:
    """Lambda calibration only, keeping the configured c weights."""
    l_diff = l_recon = l_rigid = 0.0
    count = 0
    for scene, t, eps, z_t, z0_tilde in _calibration_draws(model, scenes, cfg, sched):
        _, world = _decode_points(z0_tilde, scene)
        eps_hat = model.eps(z_t, t, scene.cond)
        l_diff += diff_loss(eps_hat, eps)[0]
        l_recon += recon_loss(world, scene.gt_world, cfg.weights)[0]
        l_rigid += rigid_loss(world, scene.graph)[0]
        count += 1
    ld, lr, lg = lambdas_from_means(l_diff / count, l_recon / count, l_rigid / count)
    return replace(cfg.weights, lambda_diff=ld, lambda_recon=lr, lambda_rigid=lg)


# ---------------------------------------------------------------------------
# evaluation

def eval_rigidity(pred_points: np.ndarray, graph: NeighborGraph) -> float:
    """Mean absolute deviation of pair distances from the prediction's own
    frame-0 distances, over frames >= 1 and graph pairs."""
    pts = np.asarray(pred_points, dtype=np.float64)
    if graph.n_pairs == 0 or pts.shape[0] < 2:
        return 0.0
    i, j = graph.pairs[:, 0], graph.pairs[:, 1]
    d = np.linalg.norm(pts[:, i, :] - pts[:, j, :], axis=-1)
    return float(np.abs(d[1:] - d[0]).mean())


def eval_smoothness(pred_points: np.ndarray) -> float:
    """Mean second-difference norm per point and frame triple."""
    pts = np.asarray(pred_points, dtype=np.float64)
    if pts.shape[0] < 3 or pts.shape[1] == 0:
        return 0.0
    acc = pts[2:] - 2.0 * pts[1:-1] + pts[:-2]
    return float(np.linalg.norm(acc, axis=-1).mean())


def evaluate_scenes(
    model: Model,
    scenes: list[PreparedScene],
    sched: NoiseSchedule,
    n_samples: int | None = None,
    t_eval: int | None = None,
    n_steps: int = 20,
    seed: int = 0,
) -> dict:
    """Point-trajectory MSE plus rigidity/smoothness diagnostics.

    Each scene's clean joint tensor is noised to the fixed step ``t_eval``
    (mid-schedule by default), driven back to a clean estimate with DDIM,
    and its point channels are compared against the stored grid values on
    foreground pixels, in storage units. Deterministic per seed.
    """
    if not scenes:
        raise ParameterError("evaluation needs at least one scene")
    if model.cfg.in_channels != 6:
        raise StagingError("point evaluation needs a 6-channel joint model")
    count = len(scenes) if n_samples is None else min(n_samples, len(scenes))
    if count == 0:
        raise ParameterError("evaluation needs n_samples >= 1")
    t_eval = sched.steps // 2 if t_eval is None else t_eval
    per_scene = []
    for i in range(count):
        scene = scenes[i]
        rng = np.random.default_rng([seed, 555007, i])
        eps = rng.standard_normal(scene.joint_signal.shape, dtype=np.float32)
        z_t = add_noise(scene.joint_signal, eps, t_eval, sched).astype(np.float32)
        z0_tilde, _ = sample_z0(model.params, model.cfg, z_t, t_eval, n_steps, sched,
                                scene.cond, grad_mode="none")
        uvd_batch, world = _decode_points(z0_tilde, scene)
        err = uvd_batch - scene.gt_uvd.astype(np.float64)
        mse = float(np.mean(err * err)) if err.size else 0.0
        per_scene.append(
            {
                "scene": scene.name,
                "point_mse": mse,
                "rigidity": eval_rigidity(world, scene.graph),
                "smoothness": eval_smoothness(world),
            }
        )
    report = {
        "n_scenes": count,
        "t_eval": int(t_eval),
        "n_steps": int(n_steps),
        "seed": int(seed),
        "point_mse": float(np.mean([s["point_mse"] for s in per_scene])),
        "rigidity": float(np.mean([s["rigidity"] for s in per_scene])),
        "smoothness": float(np.mean([s["smoothness"] for s in per_scene])),
        "per_scene": per_scene,
    }
    return report


def eval_point_mse(model: Model, eval_scenes: list[PreparedScene], sched: NoiseSchedule,
                   n_samples: int | None = None, seed: int = 0) -> float:
    return evaluate_scenes(model, eval_scenes, sched, n_samples=n_samples, seed=seed)["point_mse"]


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(ckpt_dir, model: Model, cfg: TrainConfig, iteration: int, opt: Optimizer,
                    resolution: tuple[int, int, int] | None = None) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "stage": model.stage,
        "denoiser": model.cfg.to_dict(),
        "layout": json.loads(model.params.layout.to_json()),
        "optimizer": cfg.optimizer.to_dict(),
        "optimizer_step": opt.step_count,
        "train_config": cfg.to_dict(),
    }
    if resolution is not None:
        meta["resolution"] = [int(x) for x in resolution]
    (ckpt_dir / "checkpoint.json").write_text(json.dumps(meta, indent=2))
    write_tensor(model.params.vector, ckpt_dir / "params.vpt")
    np.save(ckpt_dir / "opt_m.npy", opt.m)
    np.save(ckpt_dir / "opt_v.npy", opt.v)
    return ckpt_dir


def load_checkpoint(ckpt_dir) -> tuple[Model, TrainConfig, int, Optimizer]:
    ckpt_dir = Path(ckpt_dir)
    meta = json.loads((ckpt_dir / "checkpoint.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise LayoutError(f"unsupported checkpoint version {meta.get('version')}")
    den_cfg = DenoiserConfig.from_dict(meta["denoiser"])
    layout = build_layout(den_cfg)
    stored = Layout(tuple((n, tuple(s)) for n, s in meta["layout"]))
    if layout.to_json() != stored.to_json():
        raise LayoutError(
            "checkpoint layout does not match its config:\n"
            f"  stored:  {stored.to_json()}\n  derived: {layout.to_json()}"
        )
    vec = read_tensor(ckpt_dir / "params.vpt")
    params = DenoiserParams(vector=vec, layout=layout)
    cfg = TrainConfig.from_dict(meta["train_config"])
    opt = Optimizer(cfg.optimizer, layout.total)
    opt.load_state(np.load(ckpt_dir / "opt_m.npy"), np.load(ckpt_dir / "opt_v.npy"),
                   meta["optimizer_step"])
    model = Model(cfg=den_cfg, params=params, stage=meta["stage"])
    return model, cfg, int(meta["iteration"]), opt


# ---------------------------------------------------------------------------
# the full loop

def _stage_model(cfg: TrainConfig, resume: str | None) -> tuple[Model, Optimizer, int]:
    """Build the model for a stage, enforcing the staging rules."""
    if cfg.stage == "rgb":
        if resume is not None:
            model, _, it, opt = load_checkpoint(resume)
            if model.stage != "rgb":
                raise StagingError(f"cannot resume rgb stage from {model.stage!r} checkpoint")
            return model, opt, it
        den = cfg.model
        if den.in_channels != 3 or den.cond_channels != 3 or den.use_cross_attention:
            den = replace(cfg.model, in_channels=3, cond_channels=3, use_cross_attention=False)
        params = init_params(den, seed=cfg.seed)
        return Model(cfg=den, params=params, stage="rgb"), Optimizer(cfg.optimizer, params.layout.total), 0

    if resume is None:
        raise StagingError(f"stage {cfg.stage!r} requires a checkpoint to resume from")
    prev_model, _, it, prev_opt = load_checkpoint(resume)
    if prev_model.stage == "rgb":
        params, den = augment_channels(prev_model.params, prev_model.cfg,
                                       use_cross_attention=cfg.model.use_cross_attention)
        model = Model(cfg=den, params=params, stage=cfg.stage)
        return model, Optimizer(cfg.optimizer, params.layout.total), 0
    # continuing a joint run
    expect = build_layout(replace(cfg.model, in_channels=6, cond_channels=6,
                                  use_cross_attention=prev_model.cfg.use_cross_attention))
    if expect.to_json() != prev_model.params.layout.to_json():
        raise LayoutError(
            "joint checkpoint layout does not match the configured model:\n"
            f"  checkpoint: {prev_model.params.layout.to_json()}\n"
            f"  config:     {expect.to_json()}"
        )
    model = Model(cfg=prev_model.cfg, params=prev_model.params, stage=cfg.stage)
    return model, prev_opt, it


def run_training(cfg: TrainConfig, out_dir, resume: str | None = None) -> dict:
    """Train per the config; writes metrics.jsonl and a final checkpoint.

    Returns a summary dict with the resolved weights, checkpoint path, and
    the in-memory metrics records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = load_dataset(cfg.data_dir, cfg.knn_k)
    model, opt, start_iter = _stage_model(cfg, resume)
    sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)

    weights = cfg.weights
    if cfg.stage == "joint+reg" and cfg.calibrate:
        if start_iter > 0:
            # mid-run resume: reuse the weights resolved at stage start so the
            # resumed run replays the uninterrupted one exactly
            _, prev_cfg, _, _ = load_checkpoint(resume)
            weights = prev_cfg.weights
        else:
            weights = calibrate_weights(model, scenes, cfg, sched)
        cfg = replace(cfg, weights=weights)

    records = []
    with open(out_dir / "metrics.jsonl", "w") as log:
        for it in range(start_iter, cfg.iterations):
            rng = np.random.default_rng([cfg.seed, it, 0])
            batch = rng.integers(0, len(scenes), size=cfg.batch_size)
            rec = train_step(model, scenes, batch, cfg, sched, opt, it)
            records.append(rec)
            log.write(rec.to_json_line() + "\n")

    res = scenes[0].joint_signal.shape[:3]
    ckpt = save_checkpoint(out_dir / "checkpoint", model, cfg, cfg.iterations, opt,
                           resolution=res)
    return {
        "checkpoint": str(ckpt),
        "weights": weights.to_dict(),
        "records": records,
        "stage": cfg.stage,
        "iterations": cfg.iterations,
    }
