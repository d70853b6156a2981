"""Uncertainty-guided depth regularization against monocular priors.

A monocular depth prior is only meaningful up to an unknown scale and shift,
so each view first solves the weighted least-squares alignment
(s, t) = argmin sum_p w(p) (s * z_render(p) + t - z_prior(p))^2 in closed
form, then penalizes the aligned residual with a Huber loss weighted by the
per-pixel uncertainty map. (s, t) are treated as constants in the backward
pass; the gradient with respect to the rendered depth is w * rho'(r) * s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_VALID_PIXELS = 16
DEGENERATE_DET = 1e-12


@dataclass
class DepthAlignment:
    scale: float
    shift: float
    valid_mask: np.ndarray
    degenerate: bool = False


@dataclass
class CurriculumSchedule:
    """Linear ramp of the depth-loss weight: 0 before start_step, lambda_max
    from full_step on."""

    start_step: int = 500
    full_step: int = 5000
    lambda_max: float = 0.05

    def __post_init__(self):
        if not self.start_step < self.full_step:
            raise ValueError("curriculum needs start_step < full_step")

    def weight(self, step: int) -> float:
        if step <= self.start_step:
            return 0.0
        if step >= self.full_step:
            return self.lambda_max
        return self.lambda_max * (step - self.start_step) / (self.full_step - self.start_step)


def align_scale_shift(z_render: np.ndarray, z_prior: np.ndarray,
                      weights: np.ndarray,
                      min_valid: int = MIN_VALID_PIXELS) -> DepthAlignment | None:
    """Closed-form weighted least-squares (s, t); None when fewer than
    `min_valid` pixels are usable (depth term skipped for the view).

    A constant rendered depth makes the normal equations rank-deficient; the
    convention then is s = 0, t = weighted mean of the prior, flagged.
    """
    z_render = np.asarray(z_render, dtype=np.float64)
    z_prior = np.asarray(z_prior, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (z_render.shape == z_prior.shape == weights.shape):
        raise ValueError(
            f"shape mismatch: render {z_render.shape}, prior {z_prior.shape}, weights {weights.shape}"
        )
    valid = (weights > 0) & np.isfinite(z_render) & np.isfinite(z_prior)
    if int(valid.sum()) < min_valid:
        return None

    w = weights[valid]
    zr = z_render[valid]
    zp = z_prior[valid]
    sw = w.sum()
    szz = np.sum(w * zr * zr)
    sz = np.sum(w * zr)
    det = szz * sw - sz * sz
    if det <= DEGENERATE_DET * max(szz * sw, 1.0):
        return DepthAlignment(scale=0.0, shift=float(np.sum(w * zp) / sw),
                              valid_mask=valid, degenerate=True)
    szp = np.sum(w * zr * zp)
    sp = np.sum(w * zp)
    s = (szp * sw - sz * sp) / det
    t = (szz * sp - sz * szp) / det
    return DepthAlignment(scale=float(s), shift=float(t), valid_mask=valid)


def huber(r, delta: float):
    """Huber penalty: 0.5 r^2 inside |r| <= delta, linear delta(|r| - delta/2) outside."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(r, delta: float):
    """d(huber)/dr: r inside the quadratic branch, delta * sign(r) outside."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    r = np.asarray(r, dtype=np.float64)
    out = np.where(np.abs(r) <= delta, r, delta * np.sign(r))
    return float(out) if out.ndim == 0 else out


def robust_delta(residuals: np.ndarray, floor: float = 1e-6) -> float:
    """Huber scale from the residual spread: 1.4826 * MAD, floored."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        return floor
    mad = np.median(np.abs(r - np.median(r)))
    return max(1.4826 * mad, floor)


def depth_loss(z_render: np.ndarray, z_prior: np.ndarray, weights: np.ndarray,
               alignment: DepthAlignment, delta: float):
    """Uncertainty-weighted Huber penalty on aligned residuals.

    Returns (loss, d_loss/d_z_render) with the gradient zero outside the
    alignment's valid mask.
    """
    z_render = np.asarray(z_render, dtype=np.float64)
    z_prior = np.asarray(z_prior, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (z_render.shape == z_prior.shape == weights.shape == alignment.valid_mask.shape):
        raise ValueError("depth_loss inputs must share one shape")

    mask = alignment.valid_mask
    r = alignment.scale * z_render[mask] + alignment.shift - z_prior[mask]
    w = weights[mask]
    loss = float(np.sum(w * huber(r, delta)))
    grad = np.zeros_like(z_render)
    grad[mask] = w * huber_grad(r, delta) * alignment.scale
    return loss, grad


def default_uncertainty(z_prior: np.ndarray) -> np.ndarray:
    """Fallback weight map when no uncertainty file exists: down-weight depth
    discontinuities, w = clamp(1 - |grad z| / q95(|grad z|), 0, 1)."""
    z = np.asarray(z_prior, dtype=np.float64)
    z_filled = np.nan_to_num(z, nan=0.0)
    gy, gx = np.gradient(z_filled)
    mag = np.hypot(gx, gy)
    q95 = float(np.quantile(mag, 0.95))
    if q95 <= 0:
        w = np.ones_like(z)
    else:
        w = np.clip(1.0 - mag / q95, 0.0, 1.0)
    w[~np.isfinite(z)] = 0.0
    return w
