"""Noise schedule, forward noising, and deterministic DDIM sampling.

The schedule is linear in beta with cumulative products alpha_bar fixed at
construction (alpha_bar[0] = 1, strictly decreasing). Sampling is the
eta = 0 update: re-estimate the clean signal from the predicted noise, then
re-noise it at the target step. ``sample_z0`` runs a uniformly spaced
sub-schedule down to step 0 and can restrict differentiation to the final
step only, which is how the training loop recovers a clean estimate for the
geometric losses without backpropagating through the whole chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, denoise_backward, denoise_forward
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    alpha_bar: np.ndarray  # [steps + 1], alpha_bar[0] == 1, strictly decreasing

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.steps + 1,):
            raise ParameterError(f"alpha_bar must have {self.steps + 1} entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise ParameterError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if not np.all(np.diff(ab) < 0):
            raise ParameterError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0:
            raise ParameterError(f"alpha_bar[{self.steps}] must stay positive, got {ab[-1]}")
        ab = ab.copy()
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)


def make_schedule(steps: int, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    """Linear-beta schedule with beta_t interpolated over t = 1..steps."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if steps == 1:
        betas = np.array([beta_min])
    else:
        betas = np.linspace(beta_min, beta_max, steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(steps=steps, alpha_bar=alpha_bar)


def _check_step(t: int, sched: NoiseSchedule):
    if not (0 <= t <= sched.steps):
        raise ParameterError(f"step {t} outside 0..{sched.steps}")


def add_noise(z0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} and eps {eps.shape} differ")
    _check_step(t, sched)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse update from step t to t_prev < t."""
    if t_prev >= t:
        raise ParameterError(f"t_prev {t_prev} must be below t {t}")
    _check_step(t, sched)
    _check_step(t_prev, sched)
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * z0_hat + np.sqrt(1.0 - ab_p) * eps_hat


def sub_schedule(t: int, n_steps: int) -> list[int]:
    """Uniformly spaced steps from t down to 0 (at most n_steps intervals)."""
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if t < 1:
        raise ParameterError(f"start step must be >= 1, got {t}")
    raw = np.rint(np.linspace(t, 0, n_steps + 1)).astype(int)
    times = [int(raw[0])]
    for v in raw[1:]:
        if int(v) < times[-1]:
            times.append(int(v))
    if times[-1] != 0:
        times.append(0)
    return times


def sample_z0(
    params: DenoiserParams,
    cfg: DenoiserConfig,
    z_t: np.ndarray,
    t: int,
    n_steps: int,
    sched: NoiseSchedule,
    cond_frame: np.ndarray,
    grad_mode: str = "none",
    dtype=np.float32,
    predictor=None,
):
    """Iterate DDIM from (z_t, t) down to step 0.

    grad_mode "none" returns (z0, None); "final_step_only" treats every step
    before the last as a constant and returns (z0, cache) for
    :func:`sample_z0_grad`, which differentiates only through the final
    noise prediction and update. ``predictor`` overrides the denoiser with
    ``predictor(z, step) -> eps`` (used by inversion oracles in tests).
    """
    if grad_mode not in ("none", "final_step_only"):
        raise ParameterError(f"unknown grad_mode {grad_mode!r}")
    times = sub_schedule(t, n_steps)
    z = np.asarray(z_t, dtype=dtype)

    def predict(zc, step, want_cache):
        if predictor is not None:
            return np.asarray(predictor(zc, step), dtype=dtype), None
        return denoise_forward(params, cfg, zc, step, cond_frame, dtype=dtype,
                               want_cache=want_cache)

    for idx in range(len(times) - 1):
        t_cur, t_next = times[idx], times[idx + 1]
        final = idx == len(times) - 2
        want = final and grad_mode == "final_step_only"
        eps_hat, fwd_cache = predict(z, t_cur, want)
        z_next = ddim_step(z, eps_hat, t_cur, t_next, sched)
        if final and grad_mode == "final_step_only":
            ab_t = sched.alpha_bar[t_cur]
            ab_p = sched.alpha_bar[t_next]
            # d z_next / d eps_hat for the final update
            coeff = np.sqrt(1.0 - ab_p) - np.sqrt(ab_p) * np.sqrt(1.0 - ab_t) / np.sqrt(ab_t)
            cache = {"fwd": fwd_cache, "coeff": float(coeff), "t_last": t_cur}
            return z_next, cache
        z = z_next
    return z, None


def sample_z0_grad(params: DenoiserParams, cfg: DenoiserConfig, cache: dict, d_z0: np.ndarray) -> np.ndarray:
    """Parameter gradient of a scalar with cotangent ``d_z0`` on the
    final-step-only output of :func:`sample_z0`."""
    if cache is None or cache.get("fwd") is None:
        raise ParameterError("sample_z0 was not run with grad_mode='final_step_only'")
    d_eps = cache["coeff"] * np.asarray(d_z0)
    return denoise_backward(params, cfg, cache["fwd"], d_eps)


def diff_loss(eps_hat: np.ndarray, eps: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements (double accumulation) and its
    gradient w.r.t. eps_hat."""
    a = np.asarray(eps_hat)
    b = np.asarray(eps)
    if a.shape != b.shape:
        raise ShapeError(f"eps_hat {a.shape} and eps {b.shape} differ")
    diff = a.astype(np.float64) - b.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad
