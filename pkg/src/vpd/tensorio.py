"""Dense tensor data model and all on-disk formats.

Tensors are float32 numpy arrays of up to 5 dimensions with finite entries.
The binary container (".vpt") stores them bit-exactly:

    magic "VPT1" | u32 ndim | ndim x u32 extents | raw float32 payload

All multi-byte integers and floats are little-endian; the payload is
row-major (C order). Videos are additionally exported as binary P6 PPM
frames and point clouds as ASCII PLY.

Value conventions: RGB and point channels are stored in [0, 1]; the
diffusion model operates on [-1, 1] via ``to_signal`` / ``from_signal``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError

MAGIC = b"VPT1"
MAX_DIMS = 5
# refuse payloads above 1 GiB; desk-scale tensors are orders of magnitude smaller
MAX_ELEMENTS = (1 << 30) // 4


def _as_tensor(data, max_dims: int = MAX_DIMS) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > max_dims:
        raise ParameterError(f"tensor must have 1..{max_dims} dims, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("tensor contains non-finite values")
    return np.ascontiguousarray(arr)


def write_tensor(t, path) -> None:
    """Write a float32 tensor to ``path`` in the binary container format."""
    arr = _as_tensor(t)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`, bit-exactly."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(blob) < 8:
        raise FormatError("truncated header", offset=len(blob))
    (ndim,) = struct.unpack_from("<I", blob, 4)
    if ndim < 1 or ndim > MAX_DIMS:
        raise FormatError(f"ndim {ndim} outside 1..{MAX_DIMS}", offset=4)
    if len(blob) < 8 + 4 * ndim:
        raise FormatError("truncated extents", offset=len(blob))
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    count = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero extent", offset=8 + 4 * i)
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError(f"dim overflow: {dims}", offset=8 + 4 * i)
    offset = 8 + 4 * ndim
    need = count * 4
    have = len(blob) - offset
    if have < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {have}", offset=len(blob)
        )
    if have > need:
        raise FormatError(f"trailing data: {have - need} extra bytes", offset=offset + need)
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).copy()


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RgbVideo:
    """[T,H,W,3] color video with values stored in [0, 1]."""

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float32)
        if t.ndim != 4 or t.shape[-1] != 3:
            raise ShapeError(f"RgbVideo needs [T,H,W,3], got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ParameterError("RgbVideo contains non-finite values")
        if t.min() < 0.0 or t.max() > 1.0:
            raise ParameterError(
                f"RgbVideo values outside [0,1]: min {t.min()}, max {t.max()}"
            )
        object.__setattr__(self, "tensor", _frozen(t))

    @property
    def shape(self):
        return self.tensor.shape


@dataclass(frozen=True)
class PointGrid:
    """[T,H,W,3] pixel-aligned point channels (u, v, d).

    u and v are image coordinates divided by width and height, d is depth
    divided by the camera far plane; all nominally in [0, 1] (tracks that
    drift out of frame may exceed the range slightly). Background pixels
    are exactly zero in every frame and channel.
    """

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float32)
        if t.ndim != 4 or t.shape[-1] != 3:
            raise ShapeError(f"PointGrid needs [T,H,W,3], got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ParameterError("PointGrid contains non-finite values")
        object.__setattr__(self, "tensor", _frozen(t))

    @property
    def shape(self):
        return self.tensor.shape


@dataclass(frozen=True)
class JointVideo:
    """[T,H,W,6] channel concatenation: RGB in 0..2, (u,v,d) in 3..5."""

    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float32)
        if t.ndim != 4 or t.shape[-1] != 6:
            raise ShapeError(f"JointVideo needs [T,H,W,6], got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ParameterError("JointVideo contains non-finite values")
        object.__setattr__(self, "tensor", _frozen(t))

    @property
    def shape(self):
        return self.tensor.shape


@dataclass(frozen=True)
class ForegroundMask:
    """H x W boolean mask of object pixels on the reference frame."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ShapeError(f"ForegroundMask needs [H,W], got {g.shape}")
        g = g.astype(bool).copy()
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape

    def count(self) -> int:
        return int(self.grid.sum())


def concat_vp(v: RgbVideo, p: PointGrid) -> JointVideo:
    """Concatenate color and point channels into a [T,H,W,6] tensor."""
    if v.tensor.shape[:3] != p.tensor.shape[:3]:
        raise ShapeError(
            f"video {v.tensor.shape} and point grid {p.tensor.shape} disagree on [T,H,W]"
        )
    return JointVideo(np.concatenate([v.tensor, p.tensor], axis=-1))


def slice_channels(j: JointVideo) -> tuple[RgbVideo, PointGrid]:
    """Split a joint tensor back into its RGB video and point grid."""
    return RgbVideo(j.tensor[..., :3]), PointGrid(j.tensor[..., 3:])


def check_point_grid(p: PointGrid, mask: ForegroundMask) -> float:
    """Max absolute point-channel value over masked-out pixels (0 when clean)."""
    if p.tensor.shape[1:3] != mask.grid.shape:
        raise ShapeError(
            f"grid {p.tensor.shape} and mask {mask.grid.shape} disagree on [H,W]"
        )
    bg = ~mask.grid
    if not bg.any():
        return 0.0
    return float(np.abs(p.tensor[:, bg, :]).max(initial=0.0))


def to_signal(x: np.ndarray) -> np.ndarray:
    """Map storage range [0,1] to the diffusion range [-1,1]."""
    return 2.0 * np.asarray(x) - 1.0


def from_signal(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_signal`."""
    return (np.asarray(x) + 1.0) / 2.0


def write_ppm_frames(v: RgbVideo, out_dir) -> list[Path]:
    """Write one binary P6 PPM per frame, named frame_000.ppm, frame_001.ppm, ...

    Bytes are round(255 * value) with ties to even.
    """
    t = v.tensor
    if t.min() < 0.0 or t.max() > 1.0:
        raise ParameterError("PPM export requires values in [0,1]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, h, w, _ = t.shape
    paths = []
    data = np.rint(t.astype(np.float64) * 255.0).astype(np.uint8)
    for i in range(t.shape[0]):
        path = out_dir / f"frame_{i:03d}.ppm"
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(data[i].tobytes(order="C"))
        paths.append(path)
    return paths


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into an [H,W,3] float32 array in [0,1]."""
    blob = Path(path).read_bytes()
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", offset=pos)
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"not a P6 PPM: magic {fields[0]!r}", offset=0)
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise FormatError(f"bad PPM header field: {e}", offset=0) from None
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}", offset=0)
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    if len(blob) - pos < need:
        raise FormatError("truncated PPM payload", offset=len(blob))
    img = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return (img.reshape(h, w, 3).astype(np.float32)) / 255.0


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def write_ply(points, path) -> None:
    """Write an ASCII PLY point cloud.

    ``points`` is a sequence of (x, y, z) or (x, y, z, r, g, b) tuples with
    finite coordinates and uchar colors.
    """
    rows = [tuple(p) for p in points]
    with_color = bool(rows) and len(rows[0]) == 6
    for p in rows:
        if len(p) != (6 if with_color else 3):
            raise ParameterError("mixed point arities in PLY export")
        if not all(np.isfinite(c) for c in p[:3]):
            raise ParameterError(f"non-finite PLY coordinate: {p[:3]}")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(rows)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if with_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(header) + "\n")
        for p in rows:
            line = " ".join(_fmt(c) for c in p[:3])
            if with_color:
                line += " " + " ".join(str(int(c)) for c in p[3:])
            f.write(line + "\n")
