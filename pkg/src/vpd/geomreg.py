"""Geometric regularization losses on [T,N,3] point batches.

The reconstruction loss penalizes deviation from ground truth plus first-
and second-difference temporal roughness; the rigidity loss penalizes
per-frame changes of reference-frame neighbor distances. Both are evaluated
in world coordinates in double precision and return analytic gradients that
the finite-difference oracle checks to tight tolerances. Per-frame norms
are means over points of per-point Euclidean norms, so values are
comparable across scenes with different point counts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    """Term weights c0..c2 for the reconstruction loss, top-level weights for
    the combined objective, and the cadence (apply regularization every
    ``cadence_k`` iterations)."""

    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    lambda_diff: float = 1.0
    lambda_recon: float = 0.0
    lambda_rigid: float = 0.0
    cadence_k: int = 5

    def __post_init__(self):
        vals = (self.c0, self.c1, self.c2, self.lambda_diff, self.lambda_recon, self.lambda_rigid)
        if any(v < 0 for v in vals):
            raise ParameterError(f"loss weights must be non-negative: {vals}")
        if self.cadence_k < 1:
            raise ParameterError(f"cadence_k must be >= 1, got {self.cadence_k}")

    def to_dict(self) -> dict:
        return {
            "c0": self.c0, "c1": self.c1, "c2": self.c2,
            "lambda_diff": self.lambda_diff, "lambda_recon": self.lambda_recon,
            "lambda_rigid": self.lambda_rigid, "cadence_k": self.cadence_k,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**d)


@dataclass(frozen=True)
class NeighborGraph:
    """kNN pairs on the reference frame with their rest distances.

    pairs:     [P,2] int32 with i < j, deduplicated
    rest_dist: [P] float64 frame-0 distances of the batch that built it
    k:         neighbor count used
    """

    pairs: np.ndarray
    rest_dist: np.ndarray
    k: int

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int32).reshape(-1, 2)
        rest = np.asarray(self.rest_dist, dtype=np.float64).reshape(-1)
        if pairs.shape[0] != rest.shape[0]:
            raise ParameterError("pair/rest count mismatch")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "rest_dist", rest)

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]


def _as_batch(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"point batch must be [T,N,3], got {arr.shape}")
    return arr


def build_neighbor_graph(p0, k: int) -> NeighborGraph:
    """kNN pairs of the frame-0 configuration ``p0`` [N,3].

    Neighbors are the k nearest by Euclidean distance excluding self, ties
    broken by lower index; pairs are deduplicated.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.ndim != 2 or p0.shape[1] != 3:
        raise ShapeError(f"frame-0 points must be [N,3], got {p0.shape}")
    n = p0.shape[0]
    if n <= k:
        raise ParameterError(f"need more points than neighbors: N={n}, k={k}")
    diff = p0[:, None, :] - p0[None, :, :]
    d2 = np.einsum("ijc,ijc->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    pair_set = set()
    for i in range(n):
        order = np.lexsort((np.arange(n), d2[i]))[:k]
        for j in order:
            pair_set.add((min(i, int(j)), max(i, int(j))))
    pairs = np.array(sorted(pair_set), dtype=np.int32)
    rest = np.sqrt(d2[pairs[:, 0], pairs[:, 1]])
    return NeighborGraph(pairs=pairs, rest_dist=rest, k=k)


def _norm_term(diff: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over frames of the mean per-point norm, plus d(term)/d(diff)."""
    t, n, _ = diff.shape
    norms = np.sqrt(np.einsum("tnc,tnc->tn", diff, diff))
    value = float(norms.mean(axis=1).sum())
    # subgradient 0 at exactly-zero norms
    safe = np.where(norms > 0.0, norms, 1.0)
    grad = np.where(norms[..., None] > 0.0, diff / safe[..., None] / n, 0.0)
    return value, grad


def recon_terms(pt, gt) -> tuple[tuple[float, float, float], tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Raw (unweighted) reconstruction terms and their gradients w.r.t. pt.

    term0: sum over frames of mean point distance to ground truth
    term1: same on first temporal differences (frames 1..)
    term2: same on second temporal differences (frames 2..)
    """
    pt = _as_batch(pt)
    gt = _as_batch(gt)
    if pt.shape != gt.shape:
        raise ShapeError(f"prediction {pt.shape} and ground truth {gt.shape} differ")
    t = pt.shape[0]

    v0, g_local0 = _norm_term(pt - gt)
    g0 = g_local0

    g1 = np.zeros_like(pt)
    if t >= 2:
        v1, gd = _norm_term(pt[1:] - pt[:-1])
        g1[1:] += gd
        g1[:-1] -= gd
    else:
        v1 = 0.0

    g2 = np.zeros_like(pt)
    if t >= 3:
        v2, ga = _norm_term(pt[2:] - 2.0 * pt[1:-1] + pt[:-2])
        g2[2:] += ga
        g2[1:-1] -= 2.0 * ga
        g2[:-2] += ga
    else:
        v2 = 0.0
    return (v0, v1, v2), (g0, g1, g2)


def recon_loss(pt, gt, w: LossWeights) -> tuple[float, np.ndarray]:
    """Weighted reconstruction loss and its gradient w.r.t. ``pt``."""
    (v0, v1, v2), (g0, g1, g2) = recon_terms(pt, gt)
    loss = w.c0 * v0 + w.c1 * v1 + w.c2 * v2
    grad = w.c0 * g0 + w.c1 * g1 + w.c2 * g2
    return float(loss), grad


def rigid_loss(pt, graph: NeighborGraph) -> tuple[float, np.ndarray]:
    """Sum over frames >= 1 and graph pairs of squared deviation of the pair
    distance from its rest distance; gradient w.r.t. ``pt``."""
    pt = _as_batch(pt)
    t, n, _ = pt.shape
    if graph.n_pairs and int(graph.pairs.max()) >= n:
        raise ParameterError(
            f"graph references point {int(graph.pairs.max())} but batch has {n}"
        )
    grad = np.zeros_like(pt)
    if t < 2 or graph.n_pairs == 0:
        return 0.0, grad
    i, j = graph.pairs[:, 0], graph.pairs[:, 1]
    diff = pt[1:, i, :] - pt[1:, j, :]                      # [T-1, P, 3]
    dist = np.sqrt(np.einsum("tpc,tpc->tp", diff, diff))
    dev = dist - graph.rest_dist[None, :]
    loss = float(np.einsum("tp,tp->", dev, dev))
    safe = np.where(dist > 0.0, dist, 1.0)
    coeff = np.where(dist > 0.0, 2.0 * dev / safe, 0.0)     # d(dev^2)/d(dist) / dist
    g_pair = coeff[..., None] * diff
    for f in range(1, t):
        np.add.at(grad[f], i, g_pair[f - 1])
        np.add.at(grad[f], j, -g_pair[f - 1])
    return loss, grad


def total_loss(l_diff: float, l_recon: float, l_rigid: float, w: LossWeights) -> float:
    """Weighted combination of the three objectives."""
    for name, v in (("l_diff", l_diff), ("l_recon", l_recon), ("l_rigid", l_rigid)):
        if not np.isfinite(v):
            raise ParameterError(f"{name} is not finite: {v}")
    return w.lambda_diff * l_diff + w.lambda_recon * l_recon + w.lambda_rigid * l_rigid


def calibrate_c(sample_batches) -> tuple[float, float, float]:
    """Choose c weights so the three raw reconstruction terms start at the
    same scale: c0 = 1, c_i = mean(term0) / mean(term_i).

    ``sample_batches`` is a sequence of (prediction, ground truth) pairs from
    initial model outputs. Terms with zero mean get weight 0 with a warning.
    """
    batches = list(sample_batches)
    if not batches:
        raise ParameterError("calibrate_c needs at least one sample batch")
    sums = np.zeros(3)
    for pt, gt in batches:
        (v0, v1, v2), _ = recon_terms(pt, gt)
        sums += (v0, v1, v2)
    means = sums / len(batches)
    return calibrate_c_from_means(tuple(means))


def calibrate_c_from_means(means: tuple[float, float, float]) -> tuple[float, float, float]:
    m0, m1, m2 = (float(m) for m in means)
    if m0 == 0.0 and m1 == 0.0 and m2 == 0.0:
        warnings.warn("calibrate_c: all reconstruction terms are zero; using (1, 0, 0)")
        return (1.0, 0.0, 0.0)
    out = [1.0, 0.0, 0.0]
    for idx, m in ((1, m1), (2, m2)):
        if m == 0.0:
            warnings.warn(f"calibrate_c: term {idx} has zero mean; weight set to 0")
        else:
            out[idx] = m0 / m
    return tuple(out)


def fd_gradient_oracle(loss_fn, pt, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``pt``, double precision.

    ``loss_fn`` maps a [T,N,3] array to a scalar. Intentionally independent
    of any analytic gradient code path.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    base = np.asarray(pt, dtype=np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(loss_fn(base))
        flat[i] = orig - h
        lo = float(loss_fn(base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
