"""Post-processing of sparse 3D tracks into a pixel-aligned point grid.

The pipeline mirrors offline dataset preparation: simulated tracking noise
is injected, each track is smoothed by a constant-velocity Kalman filter
with a Rauch-Tung-Striebel backward pass, and the sparse tracks are packed
into a dense [T,H,W,3] grid. Foreground pixels without a track receive the
inverse-distance-weighted blend of their k nearest tracked pixels, nearest
in reference-frame pixel coordinates with ties broken by lower anchor
index (anchor counts are small enough that exact search beats a spatial
tree, and the explicit tie-break keeps results bit-reproducible on the
integer pixel grid); background pixels stay exactly zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, PipelineError, ShapeError
from .scenegen import CameraIntrinsics, TrackSet, normalize_uvd, project
from .tensorio import ForegroundMask, PointGrid


@dataclass(frozen=True)
class NoiseSpec:
    """Simulated tracking imprecision: i.i.d. Gaussian jitter plus occasional
    outlier samples with ``outlier_scale`` times the base deviation."""

    sigma: float
    outlier_prob: float = 0.0
    outlier_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        if not (0.0 <= self.outlier_prob <= 1.0):
            raise ParameterError(f"outlier_prob must be in [0,1], got {self.outlier_prob}")


@dataclass(frozen=True)
class KalmanSpec:
    process_var: float = 1e-4
    measure_var: float = 1e-2

    def __post_init__(self):
        if self.process_var <= 0 or self.measure_var <= 0:
            raise ParameterError("process_var and measure_var must be positive")


def inject_noise(tracks: TrackSet, spec: NoiseSpec) -> TrackSet:
    """Add per-sample Gaussian noise to frames 1..T-1; frame 0 stays exact
    so anchors remain valid. Deterministic for a given seed."""
    t, n, _ = tracks.world.shape
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, spec.sigma, size=(t, n, 3))
    hit = rng.random(size=(t, n)) < spec.outlier_prob
    extra = rng.normal(0.0, spec.outlier_scale * spec.sigma, size=(t, n, 3))
    noise = noise + np.where(hit[..., None], extra, 0.0)
    noise[0] = 0.0
    return TrackSet(
        world=tracks.world + noise,
        anchor_uv=tracks.anchor_uv,
        object_id=tracks.object_id,
    )


def kalman_smooth(tracks: TrackSet, spec: KalmanSpec) -> TrackSet:
    """Constant-velocity Kalman filter + RTS smoother, per point and axis.

    The state is (position, velocity) with unit frame spacing; exactly
    linear tracks pass through unchanged. Frame 0 is pinned to the input so
    anchor pixels keep their exact reference-frame positions. Tracks with
    fewer than 2 frames are returned unchanged with a warning.
    """
    t = tracks.n_frames
    if t < 2:
        warnings.warn("kalman_smooth: fewer than 2 frames, returning input unchanged")
        return tracks
    n = tracks.n_points
    if n == 0:
        return tracks
    z = tracks.world.reshape(t, n * 3).astype(np.float64)
    m = n * 3
    q, r = spec.process_var, spec.measure_var

    # discrete white-noise-acceleration process covariance, dt = 1
    q00, q01, q11 = 0.25 * q, 0.5 * q, q

    # filtered/predicted means [t,m,2]; covariances as (a,b,c) for [[a,b],[b,c]]
    xf = np.zeros((t, m, 2))
    pf = np.zeros((t, m, 3))
    xp = np.zeros((t, m, 2))
    pp = np.zeros((t, m, 3))

    xf[0, :, 0] = z[0]
    xf[0, :, 1] = z[1] - z[0]
    pf[0] = np.array([r, r, 2 * r])

    for k in range(1, t):
        a, b, c = pf[k - 1, :, 0], pf[k - 1, :, 1], pf[k - 1, :, 2]
        xp[k, :, 0] = xf[k - 1, :, 0] + xf[k - 1, :, 1]
        xp[k, :, 1] = xf[k - 1, :, 1]
        pa = a + 2 * b + c + q00
        pb = b + c + q01
        pc = c + q11
        pp[k] = np.stack([pa, pb, pc], axis=1)
        s = pa + r
        k0, k1 = pa / s, pb / s
        innov = z[k] - xp[k, :, 0]
        xf[k, :, 0] = xp[k, :, 0] + k0 * innov
        xf[k, :, 1] = xp[k, :, 1] + k1 * innov
        pf[k] = np.stack([pa * r / s, pb * r / s, pc - k1 * pb], axis=1)

    xs = xf.copy()
    for k in range(t - 2, -1, -1):
        a, b, c = pf[k, :, 0], pf[k, :, 1], pf[k, :, 2]
        pa, pb, pc = pp[k + 1, :, 0], pp[k + 1, :, 1], pp[k + 1, :, 2]
        det = pa * pc - pb * pb
        ia, ib, ic = pc / det, -pb / det, pa / det
        # C = P_f F^T P_pred^{-1} with F = [[1,1],[0,1]]
        f0, f1 = a + b, b + c  # P_f F^T rows
        c00 = f0 * ia + b * ib
        c01 = f0 * ib + b * ic
        c10 = f1 * ia + c * ib
        c11 = f1 * ib + c * ic
        d0 = xs[k + 1, :, 0] - xp[k + 1, :, 0]
        d1 = xs[k + 1, :, 1] - xp[k + 1, :, 1]
        xs[k, :, 0] = xf[k, :, 0] + c00 * d0 + c01 * d1
        xs[k, :, 1] = xf[k, :, 1] + c10 * d0 + c11 * d1

    out = xs[:, :, 0].reshape(t, n, 3)
    out[0] = tracks.world[0]
    return TrackSet(world=out, anchor_uv=tracks.anchor_uv, object_id=tracks.object_id)


def build_point_grid(
    tracks: TrackSet,
    mask: ForegroundMask,
    cam: CameraIntrinsics,
    height: int,
    width: int,
    knn: int = 3,
) -> PointGrid:
    """Pack tracks into a dense [T,H,W,3] grid of normalized (u,v,d).

    Tracked foreground pixels receive their own projected trajectory;
    remaining foreground pixels receive the inverse-distance-weighted blend
    of their ``knn`` nearest tracked pixels (an exact positional hit copies
    that track outright); background pixels stay zero. The reference-frame
    (u,v) entries of tracked pixels are snapped to the pixel's own
    normalized coordinates, which the projection round trip reproduces only
    up to float rounding.
    """
    if mask.grid.shape != (height, width):
        raise ShapeError(f"mask {mask.grid.shape} does not match [{height},{width}]")
    if (cam.height, cam.width) != (height, width):
        raise ShapeError(
            f"camera {cam.height}x{cam.width} does not match grid {height}x{width}"
        )
    t_frames = tracks.n_frames
    grid = np.zeros((t_frames, height, width, 3), dtype=np.float32)
    if not mask.grid.any():
        return PointGrid(grid)

    uv = tracks.anchor_uv
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
    keep = inside.copy()
    keep[inside] &= mask.grid[uv[inside, 1], uv[inside, 0]]
    kept = np.nonzero(keep)[0]
    if kept.size == 0:
        raise PipelineError("non-empty mask but no tracked points to interpolate from")

    # projected, normalized trajectories of the kept tracks, float64
    traj = np.zeros((kept.size, t_frames, 3))
    for j, i in enumerate(kept):
        traj[j] = normalize_uvd(project(tracks.world[:, i, :], cam), cam)
        traj[j, 0, 0] = uv[i, 0] / width
        traj[j, 0, 1] = uv[i, 1] / height

    traj32 = traj.astype(np.float32)
    anchor_pix = uv[kept].astype(np.float64)
    taken = np.zeros((height, width), dtype=bool)
    for j, i in enumerate(kept):
        grid[:, uv[i, 1], uv[i, 0], :] = traj32[j]
        taken[uv[i, 1], uv[i, 0]] = True

    todo = np.argwhere(mask.grid & ~taken)
    if todo.size:
        k = min(knn, kept.size)
        query = todo[:, ::-1].astype(np.float64)  # (u, v) order
        d2 = ((query[:, None, :] - anchor_pix[None, :, :]) ** 2).sum(axis=-1)
        # stable sort == ties broken by lower anchor index
        idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
        dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
        for row, (r, c) in enumerate(todo):
            d = dist[row]
            if d[0] == 0.0:
                grid[:, r, c, :] = traj32[idx[row, 0]]
                continue
            w = 1.0 / d
            w /= w.sum()
            blend = np.einsum("k,ktc->tc", w, traj[idx[row]])
            grid[:, r, c, :] = blend.astype(np.float32)
    return PointGrid(grid)


def grid_to_points(p: PointGrid, mask: ForegroundMask) -> tuple[np.ndarray, np.ndarray]:
    """Gather foreground pixels into a dense [T,N,3] batch.

    Returns (batch, pixels) where pixels is [N,2] (row, col) in row-major
    order. ``scatter_points`` is the exact inverse on the foreground.
    """
    if p.tensor.shape[1:3] != mask.grid.shape:
        raise ShapeError(
            f"grid {p.tensor.shape} and mask {mask.grid.shape} disagree on [H,W]"
        )
    pixels = np.argwhere(mask.grid)
    batch = p.tensor[:, pixels[:, 0], pixels[:, 1], :].copy()
    return batch, pixels


def scatter_points(batch: np.ndarray, pixels: np.ndarray, height: int, width: int) -> PointGrid:
    """Inverse of :func:`grid_to_points`: write the batch back on a zero grid."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 3 or batch.shape[2] != 3 or batch.shape[1] != len(pixels):
        raise ShapeError(f"batch {batch.shape} does not match {len(pixels)} pixels")
    grid = np.zeros((batch.shape[0], height, width, 3), dtype=np.float32)
    grid[:, pixels[:, 0], pixels[:, 1], :] = batch
    return PointGrid(grid)
