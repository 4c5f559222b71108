"""Desk-scale laboratory for 3D-point-augmented video diffusion.

Synthetic rigid-body scenes provide RGB videos with exact 3D ground-truth
tracks; the preparation pipeline packs (possibly noisy, Kalman-smoothed)
tracks into pixel-aligned point grids; a small pixel-space DDIM model
diffuses video and point channels jointly; geometric losses regularize the
recovered point trajectories during training. Every numerical component is
covered by an independent oracle in the test suite.
"""

import os as _os

# small-matrix workloads run faster single-threaded, and a fixed thread count
# keeps BLAS reductions bit-reproducible; only effective if numpy is not
# already loaded
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
_os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"

from .errors import (
    FormatError,
    LayoutError,
    ParameterError,
    PipelineError,
    ProjectionError,
    ShapeError,
    StagingError,
    VpdError,
)

__all__ = [
    "FormatError",
    "LayoutError",
    "ParameterError",
    "PipelineError",
    "ProjectionError",
    "ShapeError",
    "StagingError",
    "VpdError",
    "__version__",
]
