"""Photometric metrics and cleanliness indicators under camera jitter.

PSNR and windowed SSIM cover pixel fidelity; the three cleanliness scores
target floater symptoms directly: matter rendered outside a foreground
silhouette, depth instability under small camera perturbations, and PSNR
drift of static regions across jittered views.

The SSIM core also exposes its analytic gradient (adjoint of the separable
window filtering); the trainer reuses it inside the photometric loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .model import Camera

PSNR_SENTINEL = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


class MetricUndefined(RuntimeError):
    """A metric has no defined value on the given inputs (e.g. no coverage)."""


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at the 99 dB sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL)


def _gaussian_window(win: int, sigma: float) -> np.ndarray:
    x = np.arange(win) - (win - 1) / 2.0
    k = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable windowed sums, cropped to windows fully inside the image."""
    m = len(k) // 2
    out = ndimage.correlate1d(img, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out[m:img.shape[0] - m, m:img.shape[1] - m]


def _filter_adjoint(grad_valid: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filter_valid for a symmetric kernel."""
    m = len(k) // 2
    full = np.zeros(shape)
    full[m:shape[0] - m, m:shape[1] - m] = grad_valid
    out = ndimage.correlate1d(full, k, axis=0, mode="constant")
    out = ndimage.correlate1d(out, k, axis=1, mode="constant")
    return out


def ssim_single(x: np.ndarray, y: np.ndarray, win: int = SSIM_WINDOW,
                sigma: float = SSIM_SIGMA, with_grad: bool = False):
    """Mean SSIM over valid windows for one channel; optionally also
    d(mean SSIM)/dx."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < win:
        raise ValueError(f"image {x.shape} smaller than the {win}x{win} SSIM window")

    k = _gaussian_window(win, sigma)
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    sxx = _filter_valid(x * x, k)
    syy = _filter_valid(y * y, k)
    sxy = _filter_valid(x * y, k)

    var_x = sxx - mu_x * mu_x
    var_y = syy - mu_y * mu_y
    cov = sxy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    denom = b1 * b2
    s_map = a1 * a2 / denom
    value = float(s_map.mean())
    if not with_grad:
        return value, None

    n = s_map.size
    # partials of S wrt the five filtered fields (see quotient rule)
    d_mu_x = (2.0 * mu_y * (a2 - a1) - s_map * 2.0 * mu_x * (b2 - b1)) / denom / n
    d_sxx = (-s_map / b2) / n
    d_sxy = (2.0 * a1 / denom) / n
    grad = _filter_adjoint(d_mu_x, k, x.shape)
    grad += 2.0 * x * _filter_adjoint(d_sxx, k, x.shape)
    grad += y * _filter_adjoint(d_sxy, k, x.shape)
    return value, grad


def to_luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Standard windowed SSIM on the luma channel, mean over valid windows."""
    value, _ = ssim_single(to_luma(a), to_luma(b))
    return value


@dataclass
class JitterSpec:
    """Deterministic camera perturbations for the stability metrics."""

    sigma_translation: float = 0.005
    sigma_rotation: float = np.deg2rad(0.2)
    samples: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "sigma_translation": self.sigma_translation,
            "sigma_rotation": self.sigma_rotation,
            "samples": self.samples,
            "seed": self.seed,
        }


def _rodrigues(rotvec: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(rotvec)
    if theta < 1e-12:
        return np.eye(3)
    k = rotvec / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def jitter_camera(cam: Camera, rng: np.random.Generator, spec: JitterSpec) -> Camera:
    d_rot = _rodrigues(rng.standard_normal(3) * spec.sigma_rotation)
    d_center = rng.standard_normal(3) * spec.sigma_translation
    rotation = d_rot @ cam.rotation
    center = cam.center + d_center
    return Camera(
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
        rotation=rotation, translation=-rotation @ center,
        width=cam.width, height=cam.height, cam_id=cam.cam_id,
    )


def jittered_cameras(cam: Camera, spec: JitterSpec) -> list[Camera]:
    rng = np.random.default_rng(spec.seed)
    return [jitter_camera(cam, rng, spec) for _ in range(spec.samples)]


def silhouette_leakage(render_fn, cam: Camera, fg_mask: np.ndarray,
                       threshold: float = 0.05) -> float:
    """Fraction of pixels outside the foreground mask where accumulated
    opacity (1 - T_bg) exceeds `threshold`."""
    fg_mask = np.asarray(fg_mask, dtype=bool)
    if fg_mask.shape != (cam.height, cam.width):
        raise ValueError(f"mask {fg_mask.shape} does not match camera {(cam.height, cam.width)}")
    outside = ~fg_mask
    n_outside = int(outside.sum())
    if n_outside == 0:
        warnings.warn("silhouette_leakage: mask covers the full frame; defined as 0")
        return 0.0
    out = render_fn(cam)
    opacity = 1.0 - out.final_transmittance
    return float(np.count_nonzero(opacity[outside] > threshold) / n_outside)


def depth_stability(render_fn, cam: Camera, jitter: JitterSpec,
                    tolerance: float | None = None) -> float:
    """Fraction of pixels (covered in every render) whose depth moves at most
    `tolerance` across jittered poses. Default tolerance: 1% of the median
    base depth."""
    if jitter.samples < 2:
        raise ValueError("depth_stability needs at least 2 jitter samples")
    base = render_fn(cam)
    depths = [render_fn(jcam).depth for jcam in jittered_cameras(cam, jitter)]
    covered = np.isfinite(base.depth)
    for d in depths:
        covered &= np.isfinite(d)
    if not covered.any():
        raise MetricUndefined("depth_stability: no pixel is covered in all renders")
    if tolerance is None:
        tolerance = 0.01 * float(np.nanmedian(base.depth))
    worst = np.zeros_like(base.depth)
    for d in depths:
        worst = np.maximum(worst, np.abs(np.where(covered, d - base.depth, 0.0)))
    return float(np.count_nonzero(worst[covered] <= tolerance) / covered.sum())


def background_consistency(render_fn, cams, static_masks, jitter: JitterSpec,
                           references=None) -> float:
    """Mean masked PSNR of jittered renders against each camera's reference
    render (or the provided reference images)."""
    cams = list(cams)
    masks = list(static_masks)
    if len(masks) != len(cams):
        raise ValueError("one static mask per camera required")
    scores = []
    for i, cam in enumerate(cams):
        mask = np.asarray(masks[i], dtype=bool)
        if not mask.any():
            raise ValueError(f"background_consistency: empty static mask for camera {cam.cam_id or i}")
        ref = references[i] if references is not None else render_fn(cam).color
        for jcam in jittered_cameras(cam, jitter):
            img = render_fn(jcam).color
            mse = float(np.mean((img[mask] - ref[mask]) ** 2))
            scores.append(PSNR_SENTINEL if mse == 0.0 else min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL))
    return float(np.mean(scores))


@dataclass
class MetricsReport:
    psnr_per_view: list = field(default_factory=list)
    ssim_per_view: list = field(default_factory=list)
    psnr_mean: float | None = None
    ssim_mean: float | None = None
    silhouette_leakage: float | None = None
    depth_stability: float | None = None
    background_consistency: float | None = None
    jitter: dict = field(default_factory=dict)
    lpips: None = None  # intentionally absent: needs a pretrained network

    def to_json_dict(self) -> dict:
        return {
            "psnr_per_view": self.psnr_per_view,
            "psnr_mean": self.psnr_mean,
            "ssim_per_view": self.ssim_per_view,
            "ssim_mean": self.ssim_mean,
            "silhouette_leakage": self.silhouette_leakage,
            "depth_stability": self.depth_stability,
            "background_consistency": self.background_consistency,
            "jitter": self.jitter,
            "lpips": None,
        }

    def to_text(self) -> str:
        rows = [
            ("PSNR (dB, mean)", self.psnr_mean),
            ("SSIM (mean)", self.ssim_mean),
            ("silhouette leakage", self.silhouette_leakage),
            ("depth stability", self.depth_stability),
            ("background consistency (dB)", self.background_consistency),
            ("LPIPS", "n/a (no perceptual net)"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = ["metric".ljust(width) + "  value", "-" * (width + 9)]
        for name, value in rows:
            if isinstance(value, float):
                lines.append(f"{name.ljust(width)}  {value:.4f}")
            else:
                lines.append(f"{name.ljust(width)}  {value}")
        return "\n".join(lines)


def evaluate_scene(scene, jitter: JitterSpec | None = None,
                   fg_masks=None, static_masks=None,
                   depth_tolerance: float | None = None) -> MetricsReport:
    """PSNR/SSIM against scene targets plus cleanliness indicators.

    fg_masks / static_masks are per-camera boolean grids; the corresponding
    indicators are skipped (None) when masks are absent.
    """
    from .renderer import render  # deferred to keep module import light

    if jitter is None:
        extent = scene.extent()
        jitter = JitterSpec(sigma_translation=0.0025 * max(extent, 1e-6))

    def render_fn(cam):
        return render(scene, cam)

    report = MetricsReport(jitter=jitter.to_dict())
    for cam, target in zip(scene.cameras, scene.targets):
        if target is None:
            continue
        out = render_fn(cam)
        report.psnr_per_view.append(psnr(out.color, target))
        report.ssim_per_view.append(ssim(out.color, target))
    if report.psnr_per_view:
        report.psnr_mean = float(np.mean(report.psnr_per_view))
        report.ssim_mean = float(np.mean(report.ssim_per_view))

    if fg_masks is not None:
        leaks = [silhouette_leakage(render_fn, cam, mask)
                 for cam, mask in zip(scene.cameras, fg_masks) if mask is not None]
        if leaks:
            report.silhouette_leakage = float(np.mean(leaks))
    stab_scores = []
    for cam in scene.cameras:
        try:
            stab_scores.append(depth_stability(render_fn, cam, jitter, tolerance=depth_tolerance))
        except MetricUndefined:
            continue
    if stab_scores:
        report.depth_stability = float(np.mean(stab_scores))
    if static_masks is not None:
        cams, masks = [], []
        for cam, mask in zip(scene.cameras, static_masks):
            if mask is not None and np.asarray(mask).any():
                cams.append(cam)
                masks.append(mask)
        if cams:
            report.background_consistency = background_consistency(render_fn, cams, masks, jitter)
    return report
