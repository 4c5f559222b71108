"""Command-line entry point wiring the whole pipeline.

Subcommands: gen-data, prep, train, eval, sample, render. Every run writes
a manifest (command, fully resolved config, paths, seed, version,
timestamps) atomically at the end; re-running a command with the manifest's
config reproduces its outputs byte for byte (timestamps live only in the
manifest itself).

Exit codes: 0 success, 2 input/config error, 3 pipeline error, 4 staging
error. The environment variable POINTVID_SEED overrides every seed.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, scenegen, trackprep, trainlab
from .diffusion import make_schedule, sample_z0
from .errors import (
    FormatError,
    LayoutError,
    ParameterError,
    PipelineError,
    ProjectionError,
    ShapeError,
    StagingError,
)
from .tensorio import (
    ForegroundMask,
    JointVideo,
    PointGrid,
    RgbVideo,
    concat_vp,
    from_signal,
    read_ppm,
    read_tensor,
    slice_channels,
    write_ply,
    write_ppm_frames,
    write_tensor,
)

MIN_TRACKS = 4


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(path: Path, command: str, config: dict, inputs: list, outputs: list,
                    seed, started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "version": __version__,
        "started_utc": started,
        "finished_utc": _utc_now(),
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path)


def _child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w_s, h_s = text.lower().split("x")
        w, h = int(w_s), int(h_s)
    except ValueError:
        raise ParameterError(f"size must look like 32x32, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise ParameterError(f"size extents must be positive, got {text!r}")
    return w, h


# ---------------------------------------------------------------------------
# gen-data

def _gen_one_scene(args) -> str:
    out_dir, index, seed, frames, width, height, stride = args
    scene_dir = Path(out_dir) / f"scene_{index:03d}"
    scene_dir.mkdir(parents=True, exist_ok=True)
    for attempt in range(32):
        child = _child_seed(seed, index, attempt)
        spec = scenegen.random_scene(child, frames=frames, width=width, height=height)
        states = scenegen.simulate(spec)
        video, masks = scenegen.render(spec, states)
        tracks = scenegen.extract_tracks(spec, states, stride=stride)
        if tracks.n_points >= MIN_TRACKS and masks[0].any():
            break
    else:
        raise PipelineError(f"scene {index}: no visible scene after 32 attempts")
    write_tensor(video.tensor, scene_dir / "video.vpt")
    write_tensor(tracks.world.astype(np.float32), scene_dir / "tracks.vpt")
    write_tensor(masks[0].astype(np.float32), scene_dir / "mask.vpt")
    meta = {
        "spec": json.loads(spec.to_json()),
        "anchors": tracks.anchor_uv.tolist(),
        "object_ids": tracks.object_id.tolist(),
        "stride": stride,
    }
    (scene_dir / "scene.json").write_text(json.dumps(meta, indent=2))
    return str(scene_dir)


def cmd_gen_data(ns) -> int:
    started = _utc_now()
    width, height = _parse_size(ns.size)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(out, i, ns.seed, ns.frames, width, height, ns.stride) for i in range(ns.scenes)]
    if ns.jobs > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            scene_dirs = list(pool.map(_gen_one_scene, jobs))
    else:
        scene_dirs = [_gen_one_scene(j) for j in jobs]
    config = {"scenes": ns.scenes, "frames": ns.frames, "size": ns.size,
              "stride": ns.stride, "seed": ns.seed, "jobs": ns.jobs}
    _write_manifest(out / "manifest.json", "gen-data", config, [], scene_dirs, ns.seed, started)
    return 0


# ---------------------------------------------------------------------------
# prep

def _load_raw_scene(scene_dir: Path):
    video = RgbVideo(read_tensor(scene_dir / "video.vpt"))
    world = read_tensor(scene_dir / "tracks.vpt").astype(np.float64)
    mask = ForegroundMask(read_tensor(scene_dir / "mask.vpt") > 0.5)
    meta = json.loads((scene_dir / "scene.json").read_text())
    spec = scenegen.SceneSpec.from_json(json.dumps(meta["spec"]))
    tracks = scenegen.TrackSet(
        world=world,
        anchor_uv=np.asarray(meta["anchors"], dtype=np.int32).reshape(-1, 2),
        object_id=np.asarray(meta["object_ids"], dtype=np.int32),
    )
    return video, tracks, mask, spec


def _prep_one_scene(args) -> str:
    in_dir, out_root, sigma, outlier_prob, kalman_q, kalman_r, knn, smooth, seed, index = args
    scene_dir = Path(in_dir)
    video, tracks, mask, spec = _load_raw_scene(scene_dir)
    noisy = trackprep.inject_noise(
        tracks,
        trackprep.NoiseSpec(sigma=sigma, outlier_prob=outlier_prob,
                            seed=_child_seed(seed, index)),
    )
    if smooth:
        noisy = trackprep.kalman_smooth(
            noisy, trackprep.KalmanSpec(process_var=kalman_q, measure_var=kalman_r)
        )
    grid = trackprep.build_point_grid(
        noisy, mask, spec.camera, spec.camera.height, spec.camera.width, knn=knn
    )
    out_dir = Path(out_root) / scene_dir.name
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(grid.tensor, out_dir / "pointgrid.vpt")
    write_tensor(concat_vp(video, grid).tensor, out_dir / "joint.vpt")
    for name in ("video.vpt", "tracks.vpt", "mask.vpt", "scene.json"):
        if out_dir != scene_dir:
            (out_dir / name).write_bytes((scene_dir / name).read_bytes())
    return str(out_dir)


def cmd_prep(ns) -> int:
    started = _utc_now()
    in_dir = Path(getattr(ns, "in"))
    if not in_dir.is_dir():
        raise ParameterError(f"input directory {in_dir} does not exist")
    scene_dirs = sorted(d for d in in_dir.iterdir() if d.is_dir() and (d / "video.vpt").exists())
    if not scene_dirs:
        raise ParameterError(f"no generated scenes under {in_dir}")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [
        (d, out, ns.sigma, ns.outlier_prob, ns.kalman_q, ns.kalman_r, ns.knn,
         not ns.no_kalman, ns.seed, i)
        for i, d in enumerate(scene_dirs)
    ]
    if ns.jobs > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            outputs = list(pool.map(_prep_one_scene, jobs))
    else:
        outputs = [_prep_one_scene(j) for j in jobs]
    config = {"in": str(in_dir), "sigma": ns.sigma, "outlier_prob": ns.outlier_prob,
              "kalman_q": ns.kalman_q, "kalman_r": ns.kalman_r, "knn": ns.knn,
              "no_kalman": ns.no_kalman, "seed": ns.seed, "jobs": ns.jobs}
    _write_manifest(out / "manifest.json", "prep", config, [str(d) for d in scene_dirs],
                    outputs, ns.seed, started)
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(ns) -> int:
    started = _utc_now()
    cfg_dict = json.loads(Path(ns.config).read_text())
    cfg = trainlab.TrainConfig.from_dict(cfg_dict)
    if ns.stage:
        cfg = replace(cfg, stage=ns.stage)
    if ns.data:
        cfg = replace(cfg, data_dir=ns.data)
    if ns.seed is not None:
        cfg = replace(cfg, seed=ns.seed)
    out = Path(ns.out)
    summary = trainlab.run_training(cfg, out, resume=ns.resume)
    _write_manifest(
        out / "manifest.json", "train",
        {**cfg.to_dict(), "weights": summary["weights"], "resume": ns.resume},
        [cfg.data_dir] + ([ns.resume] if ns.resume else []),
        [summary["checkpoint"], str(out / "metrics.jsonl")],
        cfg.seed, started,
    )
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(ns) -> int:
    started = _utc_now()
    model, cfg, _, _ = trainlab.load_checkpoint(ns.ckpt)
    scenes = trainlab.load_dataset(ns.data, cfg.knn_k)
    sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
    report = trainlab.evaluate_scenes(
        model, scenes, sched,
        n_samples=ns.samples, t_eval=ns.t_eval, n_steps=ns.steps, seed=ns.seed or 0,
    )
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    _write_manifest(
        out.with_name(out.name + ".manifest.json"), "eval",
        {"ckpt": ns.ckpt, "data": ns.data, "samples": ns.samples,
         "t_eval": ns.t_eval, "steps": ns.steps, "seed": ns.seed or 0},
        [ns.ckpt, ns.data], [str(out)], ns.seed or 0, started,
    )
    return 0


# ---------------------------------------------------------------------------
# sample / render

def cmd_sample(ns) -> int:
    started = _utc_now()
    model, cfg, _, _ = trainlab.load_checkpoint(ns.ckpt)
    if model.cfg.in_channels != 6:
        raise StagingError("sample requires a joint (6-channel) checkpoint")
    cond_storage = read_ppm(ns.cond)
    meta = json.loads((Path(ns.ckpt) / "checkpoint.json").read_text())
    res = meta.get("resolution")
    if res and tuple(cond_storage.shape[:2]) != (res[1], res[2]):
        raise ParameterError(
            f"conditioning frame {cond_storage.shape[:2]} does not match "
            f"training resolution {(res[1], res[2])}"
        )
    frames = res[0] if res else 8
    h, w = cond_storage.shape[:2]
    sched = make_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)
    seed = ns.seed or 0
    rng = np.random.default_rng([seed, 424243])
    z = rng.standard_normal((frames, h, w, 6), dtype=np.float32)
    cond = (2.0 * cond_storage - 1.0).astype(np.float32)
    z0, _ = sample_z0(model.params, model.cfg, z, sched.steps, ns.steps, sched, cond,
                      grad_mode="none")
    storage = np.clip(from_signal(z0), 0.0, 1.0).astype(np.float32)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(storage, out / "joint.vpt")
    _write_manifest(out / "manifest.json", "sample",
                    {"ckpt": ns.ckpt, "cond": ns.cond, "steps": ns.steps, "seed": seed},
                    [ns.ckpt, ns.cond], [str(out / "joint.vpt")], seed, started)
    return 0


def _depth_color(d: float) -> int:
    return int(round(255.0 * (1.0 - min(max(d, 0.0), 1.0))))


def cmd_render(ns) -> int:
    started = _utc_now()
    joint = JointVideo(read_tensor(getattr(ns, "in")))
    video, grid = slice_channels(joint)
    t, h, w, _ = joint.shape
    if ns.scene:
        meta = json.loads(Path(ns.scene).read_text())
        cam = scenegen.CameraIntrinsics.from_dict(meta["spec"]["camera"])
    else:
        cam = scenegen.default_camera(w, h)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    clipped = RgbVideo(np.clip(video.tensor, 0.0, 1.0))
    frame_paths = write_ppm_frames(clipped, out)
    outputs = [str(p) for p in frame_paths]
    for f in range(t):
        uvd = grid.tensor[f].astype(np.float64)
        valid = (uvd[..., 2] * cam.far > cam.near) & (np.abs(uvd).sum(axis=-1) > 0)
        pts = []
        if valid.any():
            world = scenegen.unproject_normalized(uvd[valid], cam)
            for (x, y, z), d in zip(world, uvd[valid][:, 2]):
                c = _depth_color(float(d))
                pts.append((x, y, z, c, c, c))
        ply_path = out / f"points_{f:03d}.ply"
        write_ply(pts, ply_path)
        outputs.append(str(ply_path))
    _write_manifest(out / "manifest.json", "render",
                    {"in": getattr(ns, "in"), "scene": ns.scene},
                    [getattr(ns, "in")], outputs, None, started)
    return 0


# ---------------------------------------------------------------------------
# parser plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpd",
        description="Joint video + 3D-point diffusion laboratory",
    )
    parser.add_argument("--version", action="version", version=f"vpd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic scenes with ground-truth tracks")
    g.add_argument("--scenes", type=int, default=4)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", default="32x32")
    g.add_argument("--stride", type=int, default=4)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("prep", help="noise, smooth and pack tracks into point grids")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--outlier-prob", type=float, default=0.0)
    p.add_argument("--kalman-q", type=float, default=1e-4)
    p.add_argument("--kalman-r", type=float, default=1e-2)
    p.add_argument("--knn", type=int, default=3)
    p.add_argument("--no-kalman", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_prep)

    t = sub.add_parser("train", help="train a stage from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", choices=trainlab.STAGES)
    t.add_argument("--data")
    t.add_argument("--resume")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="point MSE / rigidity / smoothness report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--samples", type=int)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--t-eval", type=int)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="generate a joint tensor from noise")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cond", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("render", help="write PPM frames and per-frame PLY clouds")
    r.add_argument("--in", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--scene", help="scene.json providing the camera (default camera otherwise)")
    r.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    env_seed = os.environ.get("POINTVID_SEED")
    if env_seed is not None:
        try:
            override = int(env_seed)
        except ValueError:
            print(f"error: POINTVID_SEED must be an integer, got {env_seed!r}", file=sys.stderr)
            return 2
        if hasattr(ns, "seed"):
            ns.seed = override
    try:
        return ns.func(ns)
    except (ParameterError, FormatError, ShapeError, ProjectionError,
            FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return 3
    except (StagingError, LayoutError) as e:
        print(f"staging error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
