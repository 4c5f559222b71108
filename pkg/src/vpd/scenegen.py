"""Synthetic rigid-body scenes with exact ground-truth 3D tracks.

A scene is a handful of boxes and spheres falling onto a ground plane in
front of a static pinhole camera. Simulation is semi-implicit Euler;
rendering is flat-shaded per-pixel ray casting with a z-buffer, which gives
exact silhouettes, depths and body ids at any resolution. Tracks are
extracted by back-projecting reference-frame pixels onto their body and
advecting the attached body-local point rigidly, so pairwise distances on a
body are preserved to float64 precision.

Camera convention: the camera sits at the origin looking along +z, pixel
coordinates (u, v) have integer values at pixel centers, v grows downward,
and depth is the z coordinate in scene units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ProjectionError
from .tensorio import RgbVideo

BACKGROUND_GRAY = 0.5


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ParameterError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("image extents must be positive")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(**d)


@dataclass(frozen=True)
class Body:
    """Rigid body: a box (half-extents) or a sphere (radius)."""

    shape: str                       # "box" | "sphere"
    size: tuple[float, ...]          # box: 3 half-extents; sphere: (radius,)
    albedo: tuple[float, float, float]
    position: tuple[float, float, float]
    quat: tuple[float, float, float, float]   # (w, x, y, z), unit norm
    lin_vel: tuple[float, float, float] = (0.0, 0.0, 0.0)
    ang_vel: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ParameterError(f"unknown body shape {self.shape!r}")
        n = len(self.size)
        if (self.shape == "box" and n != 3) or (self.shape == "sphere" and n != 1):
            raise ParameterError(f"{self.shape} size needs {'3 extents' if self.shape == 'box' else '1 radius'}")
        if any(s <= 0 for s in self.size):
            raise ParameterError("body sizes must be positive")
        q = np.asarray(self.quat, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParameterError(f"quaternion not unit norm: {self.quat}")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape, "size": list(self.size), "albedo": list(self.albedo),
            "position": list(self.position), "quat": list(self.quat),
            "lin_vel": list(self.lin_vel), "ang_vel": list(self.ang_vel),
        }

    @staticmethod
    def from_dict(d: dict) -> "Body":
        return Body(
            shape=d["shape"], size=tuple(d["size"]), albedo=tuple(d["albedo"]),
            position=tuple(d["position"]), quat=tuple(d["quat"]),
            lin_vel=tuple(d.get("lin_vel", (0, 0, 0))),
            ang_vel=tuple(d.get("ang_vel", (0, 0, 0))),
        )


@dataclass(frozen=True)
class SceneSpec:
    bodies: tuple[Body, ...]
    gravity: tuple[float, float, float]
    ground_height: float
    restitution: float
    frames: int
    dt: float
    camera: CameraIntrinsics
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise ParameterError(f"need at least 2 frames, got {self.frames}")
        if self.dt <= 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if not (0.0 <= self.restitution <= 1.0):
            raise ParameterError(f"restitution must be in [0,1], got {self.restitution}")
        object.__setattr__(self, "bodies", tuple(self.bodies))

    def to_json(self) -> str:
        return json.dumps(
            {
                "bodies": [b.to_dict() for b in self.bodies],
                "gravity": list(self.gravity),
                "ground_height": self.ground_height,
                "restitution": self.restitution,
                "frames": self.frames,
                "dt": self.dt,
                "camera": self.camera.to_dict(),
                "seed": self.seed,
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        d = json.loads(text)
        return SceneSpec(
            bodies=tuple(Body.from_dict(b) for b in d["bodies"]),
            gravity=tuple(d["gravity"]),
            ground_height=d["ground_height"],
            restitution=d["restitution"],
            frames=d["frames"],
            dt=d["dt"],
            camera=CameraIntrinsics.from_dict(d["camera"]),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class SimStates:
    """Per-frame rigid transforms: positions [T,B,3] and quaternions [T,B,4]."""

    positions: np.ndarray
    quats: np.ndarray


@dataclass(frozen=True)
class TrackSet:
    """Sparse ground-truth 3D trajectories.

    world:     [T,N,3] float64 positions in scene units
    anchor_uv: [N,2] int32 frame-0 pixel coordinates (u=col, v=row)
    object_id: [N] int32 body index per point
    """

    world: np.ndarray
    anchor_uv: np.ndarray
    object_id: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.world, dtype=np.float64)
        if w.ndim != 3 or w.shape[2] != 3:
            raise ParameterError(f"world must be [T,N,3], got {w.shape}")
        uv = np.asarray(self.anchor_uv, dtype=np.int32).reshape(-1, 2)
        ids = np.asarray(self.object_id, dtype=np.int32).reshape(-1)
        if uv.shape[0] != w.shape[1] or ids.shape[0] != w.shape[1]:
            raise ParameterError("anchor/id counts do not match point count")
        object.__setattr__(self, "world", w)
        object.__setattr__(self, "anchor_uv", uv)
        object.__setattr__(self, "object_id", ids)

    @property
    def n_points(self) -> int:
        return self.world.shape[1]

    @property
    def n_frames(self) -> int:
        return self.world.shape[0]


# ---------------------------------------------------------------------------
# quaternions

def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def _rotation_step(omega: np.ndarray, dt: float) -> np.ndarray:
    angle = float(np.linalg.norm(omega)) * dt
    if angle < 1e-14:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = omega / np.linalg.norm(omega)
    half = angle / 2.0
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def _lowest_offset(body: Body, rot: np.ndarray) -> float:
    """Offset from body center to its support point (largest y, toward the ground)."""
    if body.shape == "sphere":
        return body.size[0]
    ex, ey, ez = body.size
    corners = np.array(
        [[sx * ex, sy * ey, sz * ez] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    )
    return float((corners @ rot.T)[:, 1].max())


# ---------------------------------------------------------------------------
# simulation

def simulate(spec: SceneSpec) -> SimStates:
    """Integrate the scene with semi-implicit Euler.

    Velocity is updated before position each step. When a body's lowest
    point passes below the ground plane while moving toward it, the vertical
    velocity is reflected and scaled by the restitution and the body is
    pushed back onto the plane. Angular velocity is constant (gravity exerts
    no torque about the center of mass).
    """
    b = len(spec.bodies)
    g = np.asarray(spec.gravity, dtype=np.float64)
    pos = np.array([body.position for body in spec.bodies], dtype=np.float64).reshape(b, 3)
    vel = np.array([body.lin_vel for body in spec.bodies], dtype=np.float64).reshape(b, 3)
    quat = np.array([body.quat for body in spec.bodies], dtype=np.float64).reshape(b, 4)
    omega = np.array([body.ang_vel for body in spec.bodies], dtype=np.float64).reshape(b, 3)

    positions = np.zeros((spec.frames, b, 3))
    quats = np.zeros((spec.frames, b, 4))
    positions[0] = pos
    quats[0] = quat

    for f in range(1, spec.frames):
        vel = vel + g * spec.dt
        pos = pos + vel * spec.dt
        for i, body in enumerate(spec.bodies):
            dq = _rotation_step(omega[i], spec.dt)
            q = _quat_mul(dq, quat[i])
            quat[i] = q / np.linalg.norm(q)
            low = pos[i, 1] + _lowest_offset(body, quat_to_matrix(quat[i]))
            if low > spec.ground_height and vel[i, 1] > 0.0:
                vel[i, 1] = -spec.restitution * vel[i, 1]
                pos[i, 1] -= low - spec.ground_height
        positions[f] = pos
        quats[f] = quat
    return SimStates(positions=positions, quats=quats)


# ---------------------------------------------------------------------------
# projection

def project(points, cam: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of world points [...,3] to (u, v, depth).

    u and v are pixel coordinates, depth is the raw z coordinate. Points at
    or in front of the near plane are rejected; depths beyond the far plane
    are allowed (they simply normalize to d > 1 downstream).
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= cam.near):
        raise ProjectionError(
            f"point depth {z.min():.6g} not beyond near plane {cam.near}"
        )
    u = cam.cx + cam.fx * (p[..., 0] / z)
    v = cam.cy + cam.fy * (p[..., 1] / z)
    return np.stack([u, v, z], axis=-1)


def unproject(uvd, cam: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project`: (u, v, depth) back to world coordinates."""
    q = np.asarray(uvd, dtype=np.float64)
    z = q[..., 2]
    x = (q[..., 0] - cam.cx) * z / cam.fx
    y = (q[..., 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=-1)


def normalize_uvd(uvd, cam: CameraIntrinsics) -> np.ndarray:
    """(u_px, v_px, depth) -> (u/W, v/H, depth/far)."""
    q = np.asarray(uvd, dtype=np.float64)
    scale = np.array([cam.width, cam.height, cam.far], dtype=np.float64)
    return q / scale


def denormalize_uvd(uvd_n, cam: CameraIntrinsics) -> np.ndarray:
    q = np.asarray(uvd_n, dtype=np.float64)
    scale = np.array([cam.width, cam.height, cam.far], dtype=np.float64)
    return q * scale


def unproject_normalized(uvd_n, cam: CameraIntrinsics) -> np.ndarray:
    """Normalized (u, v, d) channels straight to world coordinates."""
    return unproject(denormalize_uvd(uvd_n, cam), cam)


def unproject_normalized_vjp(uvd_n, cam: CameraIntrinsics, d_world) -> np.ndarray:
    """Pull a world-coordinate cotangent back through unproject_normalized."""
    q = np.asarray(uvd_n, dtype=np.float64)
    g = np.asarray(d_world, dtype=np.float64)
    u_px = q[..., 0] * cam.width
    v_px = q[..., 1] * cam.height
    z = q[..., 2] * cam.far
    d_u = g[..., 0] * cam.width * z / cam.fx
    d_v = g[..., 1] * cam.height * z / cam.fy
    d_d = cam.far * (
        g[..., 0] * (u_px - cam.cx) / cam.fx
        + g[..., 1] * (v_px - cam.cy) / cam.fy
        + g[..., 2]
    )
    return np.stack([d_u, d_v, d_d], axis=-1)


# ---------------------------------------------------------------------------
# rendering

def _ray_dirs(cam: CameraIntrinsics) -> np.ndarray:
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    return d.reshape(-1, 3)


def _intersect_sphere(dirs, center, radius):
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = -2.0 * dirs @ center
    c = center @ center - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0.0
    t = np.full(dirs.shape[0], np.inf)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - sq) / (2 * a)
    t[hit & (t_near > 0)] = t_near[hit & (t_near > 0)]
    return t


def _intersect_box(dirs, position, rot, half_extents):
    # slab test in the body frame; camera origin is at 0
    o = rot.T @ (-position)
    d = dirs @ rot  # row-vector form of rot.T @ dir
    e = np.asarray(half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-e - o) * inv
        t2 = (e - o) * inv
    near_t = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    far_t = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # axis-parallel rays miss unless the origin lies inside the slab
    par = np.abs(d) < 1e-15
    inside = np.abs(o)[None, :] <= e[None, :]
    near_t = np.where(par & ~inside, np.inf, near_t)
    far_t = np.where(par & ~inside, -np.inf, far_t)
    tmin = near_t.max(axis=1)
    tmax = far_t.min(axis=1)
    t = np.full(dirs.shape[0], np.inf)
    ok = (tmax >= tmin) & (tmin > 0)
    t[ok] = tmin[ok]
    return t


def raycast_frame(spec: SceneSpec, position, quat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray cast one frame; returns (albedo [H,W,3], depth [H,W], body_id [H,W]).

    body_id is -1 where no body is hit; depth is +inf there. Hits are
    clipped to depth in (near, far).
    """
    cam = spec.camera
    dirs = _ray_dirs(cam)
    n = dirs.shape[0]
    depth = np.full(n, np.inf)
    body_id = np.full(n, -1, dtype=np.int32)
    for i, body in enumerate(spec.bodies):
        pos = np.asarray(position[i], dtype=np.float64)
        if body.shape == "sphere":
            t = _intersect_sphere(dirs, pos, body.size[0])
        else:
            t = _intersect_box(dirs, pos, quat_to_matrix(np.asarray(quat[i])), body.size)
        z = t * 1.0  # dir_z == 1, so the ray parameter is the depth
        z[(z <= cam.near) | (z >= cam.far)] = np.inf
        closer = z < depth
        depth[closer] = z[closer]
        body_id[closer] = i
    albedo = np.full((n, 3), BACKGROUND_GRAY)
    for i, body in enumerate(spec.bodies):
        albedo[body_id == i] = body.albedo
    h, w = cam.height, cam.width
    return albedo.reshape(h, w, 3), depth.reshape(h, w), body_id.reshape(h, w)


def render(spec: SceneSpec, states: SimStates):
    """Flat-shaded render of all frames.

    Returns (RgbVideo, masks) where masks is a [T,H,W] boolean array of
    pixels covered by any body in each frame.
    """
    frames = []
    masks = []
    for f in range(spec.frames):
        albedo, _, body_id = raycast_frame(spec, states.positions[f], states.quats[f])
        frames.append(albedo.astype(np.float32))
        masks.append(body_id >= 0)
    return RgbVideo(np.stack(frames)), np.stack(masks)


# ---------------------------------------------------------------------------
# track extraction

def extract_tracks(spec: SceneSpec, states: SimStates, stride: int) -> TrackSet:
    """Sample frame-0 foreground pixels on a stride grid and advect them rigidly.

    Each sampled pixel is back-projected through its body's surface depth,
    expressed in body-local coordinates, and carried through every frame by
    that body's rigid transform, giving exact ground truth. If the stride
    grid misses a non-empty mask entirely, the first foreground pixel in
    row-major order is used so the track set is never empty for a visible
    scene.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    cam = spec.camera
    _, depth0, id0 = raycast_frame(spec, states.positions[0], states.quats[0])
    rows = np.arange(0, cam.height, stride)
    cols = np.arange(0, cam.width, stride)
    picked = [(r, c) for r in rows for c in cols if id0[r, c] >= 0]
    if not picked:
        fg = np.argwhere(id0 >= 0)
        if fg.size == 0:
            return TrackSet(
                world=np.zeros((spec.frames, 0, 3)),
                anchor_uv=np.zeros((0, 2), dtype=np.int32),
                object_id=np.zeros(0, dtype=np.int32),
            )
        picked = [tuple(fg[0])]

    anchors = np.array([[c, r] for r, c in picked], dtype=np.int32)
    ids = np.array([id0[r, c] for r, c in picked], dtype=np.int32)
    uvz = np.array([[c, r, depth0[r, c]] for r, c in picked], dtype=np.float64)
    world0 = unproject(uvz, cam)

    rot0 = {i: quat_to_matrix(states.quats[0, i]) for i in set(ids.tolist())}
    local = np.zeros_like(world0)
    for k, i in enumerate(ids):
        local[k] = rot0[int(i)].T @ (world0[k] - states.positions[0, int(i)])

    world = np.zeros((spec.frames, len(picked), 3))
    for f in range(spec.frames):
        for k, i in enumerate(ids):
            rot = quat_to_matrix(states.quats[f, int(i)])
            world[f, k] = rot @ local[k] + states.positions[f, int(i)]
    return TrackSet(world=world, anchor_uv=anchors, object_id=ids)


# ---------------------------------------------------------------------------
# scene sampling

def default_camera(width: int, height: int) -> CameraIntrinsics:
    """Deterministic camera for a given image size (used by the dataset CLI)."""
    return CameraIntrinsics(
        fx=1.2 * width, fy=1.2 * width,
        cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height, near=0.1, far=10.0,
    )


_PALETTE = [
    (0.90, 0.25, 0.20), (0.20, 0.55, 0.90), (0.95, 0.75, 0.15),
    (0.25, 0.75, 0.35), (0.70, 0.30, 0.80), (0.95, 0.45, 0.10),
]


def random_scene(seed: int, frames: int = 8, width: int = 32, height: int = 32) -> SceneSpec:
    """Deterministic random falling-bodies scene for dataset generation."""
    rng = np.random.default_rng(seed)
    cam = default_camera(width, height)
    n_bodies = int(rng.integers(1, 4))
    bodies = []
    for i in range(n_bodies):
        shape = "sphere" if rng.random() < 0.5 else "box"
        if shape == "sphere":
            size = (float(rng.uniform(0.35, 0.7)),)
        else:
            size = tuple(float(s) for s in rng.uniform(0.3, 0.6, size=3))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        half = rng.uniform(0.0, np.pi / 4)
        quat = (float(np.cos(half)), *(float(np.sin(half) * a) for a in axis))
        bodies.append(
            Body(
                shape=shape,
                size=size,
                albedo=_PALETTE[int(rng.integers(0, len(_PALETTE)))],
                position=(
                    float(rng.uniform(-1.2, 1.2)),
                    float(rng.uniform(-1.2, 0.2)),
                    float(rng.uniform(4.5, 6.5)),
                ),
                quat=quat,
                lin_vel=(
                    float(rng.uniform(-0.6, 0.6)),
                    float(rng.uniform(-0.5, 0.5)),
                    float(rng.uniform(-0.3, 0.3)),
                ),
                ang_vel=tuple(float(w) for w in rng.uniform(-1.5, 1.5, size=3)),
            )
        )
    return SceneSpec(
        bodies=tuple(bodies),
        gravity=(0.0, 4.0, 0.0),
        ground_height=1.6,
        restitution=float(rng.uniform(0.3, 0.7)),
        frames=frames,
        dt=1.0 / 8.0,
        camera=cam,
        seed=seed,
    )
