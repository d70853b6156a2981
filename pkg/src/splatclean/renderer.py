"""Forward splatting renderer with an exact analytic backward pass.

The forward pass projects each Gaussian to an EWA 2D footprint (low-pass
floored), sorts front-to-back by camera depth, and alpha-blends per pixel with
early termination once transmittance drops below 1e-4. Blending uses the
effective alpha sigmoid(opacity) * sigmoid(importance) * G(pixel), capped at
1 - 1e-4 so the reverse-replay backward never divides by zero.

The footprint kernel is truncated at 3 sigma with a C1 window:
G = exp(-power) * w(power) with w = 1 for power <= 3.0, a cubic smoothstep
down to 0 at power = 4.5 (the 3-sigma Mahalanobis cutoff), and 0 beyond.
G is exactly 1 at the footprint center and both G and its derivative vanish
at the cutoff, so truncation introduces neither jumps nor kinks for
finite-difference probes to trip over; center-weight identities hold exactly.

Outputs: color, normalized blended depth (NaN where nothing was hit),
final transmittance, and each Gaussian's maximum pixel contribution T*alpha.

The backward pass differentiates the exact function the forward computed
(including the 3-sigma footprint cutoff and per-pixel termination) with
respect to centers, log-scales, opacity/importance logits, and the DC SH
triplet, for both a color adjoint and an optional depth adjoint. Verified
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .images import save_pfm, save_png
from .model import Camera, Scene, quaternions_to_matrices, sigmoid

T_STOP = 1e-4           # per-pixel early termination threshold on transmittance
MAX_ALPHA = 1.0 - 1e-4  # blending alpha ceiling (keeps 1/(1-alpha) finite)
LOWPASS = 0.3           # px^2 added to the 2D covariance diagonal
POWER_CUT = 4.5         # 0.5 * (3 sigma)^2 Mahalanobis cutoff
WINDOW_START = 3.0      # smoothstep window onset (pure Gaussian below this)
DEPTH_EPS = 1e-8        # min accumulated opacity for a defined depth
DEFAULT_NEAR = 0.01

_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)

from .model import SH_C0 as _SH_C0  # noqa: E402  (shared constant)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """SH basis values for unit directions (N, 3) -> (N, (degree+1)^2)."""
    n = dirs.shape[0]
    k = (degree + 1) ** 2
    basis = np.empty((n, k))
    basis[:, 0] = _SH_C0
    if degree < 1:
        return basis
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis[:, 1] = -_SH_C1 * y
    basis[:, 2] = _SH_C1 * z
    basis[:, 3] = -_SH_C1 * x
    if degree < 2:
        return basis
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    basis[:, 4] = _SH_C2[0] * xy
    basis[:, 5] = _SH_C2[1] * yz
    basis[:, 6] = _SH_C2[2] * (2.0 * zz - xx - yy)
    basis[:, 7] = _SH_C2[3] * xz
    basis[:, 8] = _SH_C2[4] * (xx - yy)
    if degree < 3:
        return basis
    basis[:, 9] = _SH_C3[0] * y * (3.0 * xx - yy)
    basis[:, 10] = _SH_C3[1] * xy * z
    basis[:, 11] = _SH_C3[2] * y * (4.0 * zz - xx - yy)
    basis[:, 12] = _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    basis[:, 13] = _SH_C3[4] * x * (4.0 * zz - xx - yy)
    basis[:, 14] = _SH_C3[5] * z * (xx - yy)
    basis[:, 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return basis


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions, shape (N, K, 3)."""
    n = dirs.shape[0]
    k = (degree + 1) ** 2
    grad = np.zeros((n, k, 3))
    if degree < 1:
        return grad
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    grad[:, 1, 1] = -_SH_C1
    grad[:, 2, 2] = _SH_C1
    grad[:, 3, 0] = -_SH_C1
    if degree < 2:
        return grad
    xx, yy, zz = x * x, y * y, z * z
    grad[:, 4, 0] = _SH_C2[0] * y
    grad[:, 4, 1] = _SH_C2[0] * x
    grad[:, 5, 1] = _SH_C2[1] * z
    grad[:, 5, 2] = _SH_C2[1] * y
    grad[:, 6, 0] = _SH_C2[2] * (-2.0 * x)
    grad[:, 6, 1] = _SH_C2[2] * (-2.0 * y)
    grad[:, 6, 2] = _SH_C2[2] * (4.0 * z)
    grad[:, 7, 0] = _SH_C2[3] * z
    grad[:, 7, 2] = _SH_C2[3] * x
    grad[:, 8, 0] = _SH_C2[4] * (2.0 * x)
    grad[:, 8, 1] = _SH_C2[4] * (-2.0 * y)
    if degree < 3:
        return grad
    grad[:, 9, 0] = _SH_C3[0] * 6.0 * x * y
    grad[:, 9, 1] = _SH_C3[0] * (3.0 * xx - 3.0 * yy)
    grad[:, 10, 0] = _SH_C3[1] * y * z
    grad[:, 10, 1] = _SH_C3[1] * x * z
    grad[:, 10, 2] = _SH_C3[1] * x * y
    grad[:, 11, 0] = _SH_C3[2] * (-2.0 * x * y)
    grad[:, 11, 1] = _SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    grad[:, 11, 2] = _SH_C3[2] * (8.0 * y * z)
    grad[:, 12, 0] = _SH_C3[3] * (-6.0 * x * z)
    grad[:, 12, 1] = _SH_C3[3] * (-6.0 * y * z)
    grad[:, 12, 2] = _SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    grad[:, 13, 0] = _SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    grad[:, 13, 1] = _SH_C3[4] * (-2.0 * x * y)
    grad[:, 13, 2] = _SH_C3[4] * (8.0 * x * z)
    grad[:, 14, 0] = _SH_C3[5] * (2.0 * x * z)
    grad[:, 14, 1] = _SH_C3[5] * (-2.0 * y * z)
    grad[:, 14, 2] = _SH_C3[5] * (xx - yy)
    grad[:, 15, 0] = _SH_C3[6] * (3.0 * xx - 3.0 * yy)
    grad[:, 15, 1] = _SH_C3[6] * (-6.0 * x * y)
    return grad


@dataclass
class GradBuffer:
    """Per-Gaussian gradients produced by render_backward (zeroed on creation)."""

    d_center: np.ndarray
    d_opacity_logit: np.ndarray
    d_importance_logit: np.ndarray
    d_sh_dc: np.ndarray
    d_log_scales: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradBuffer":
        return cls(
            d_center=np.zeros((n, 3)),
            d_opacity_logit=np.zeros(n),
            d_importance_logit=np.zeros(n),
            d_sh_dc=np.zeros((n, 3)),
            d_log_scales=np.zeros((n, 3)),
        )

    def check_finite(self):
        for name in ("d_center", "d_opacity_logit", "d_importance_logit", "d_sh_dc", "d_log_scales"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"non-finite gradient in {name}")


@dataclass
class _ForwardCache:
    valid_idx: np.ndarray       # compact -> full index map
    order: np.ndarray           # blending order over compact indices
    means2d: np.ndarray         # (V, 2)
    conics: np.ndarray          # (V, 3) packed (a, b, c)
    covs2d: np.ndarray          # (V, 2, 2)
    x_cam: np.ndarray           # (V, 3)
    radii: np.ndarray           # (V,)
    base_alpha: np.ndarray      # (V,) sigmoid(op) * sigmoid(imp)
    colors: np.ndarray          # (V, 3) evaluated SH colors
    color_clamped: np.ndarray   # (V, 3) bool, True where clamped at 0
    dirs: np.ndarray            # (V, 3) unit view directions
    dist: np.ndarray            # (V,) center-to-camera distances
    n_proc: np.ndarray          # (H, W) int32
    cover_cnt: np.ndarray       # (H, W) int32
    depth_num: np.ndarray       # (H, W) blended depth numerator


@dataclass
class RenderOutput:
    """Forward render products.

    depth is the normalized blended depth and is NaN wherever the accumulated
    opacity stayed below DEPTH_EPS (nothing was hit).
    """

    color: np.ndarray
    depth: np.ndarray
    final_transmittance: np.ndarray
    contributions: np.ndarray
    alpha_sum: np.ndarray
    cache: _ForwardCache | None = None


def project(g, cam: Camera, near: float = DEFAULT_NEAR):
    """Project a single Gaussian: (mean2d, cov2d, z, valid).

    cov2d is the EWA projection J W Sigma W^T J^T with the low-pass floor
    added to its diagonal. valid is False when the center sits at or behind
    the near plane; the other outputs are then zero-filled.
    """
    cloud_like = _single_arrays(g)
    means2d, covs, z, valid, _, _ = _project_arrays(
        cloud_like["centers"], cloud_like["log_scales"], cloud_like["rotations"], cam, near
    )
    if not valid[0]:
        return np.zeros(2), np.zeros((2, 2)), float(z[0]), False
    return means2d[0], covs[0], float(z[0]), True


def _single_arrays(g):
    return {
        "centers": g.center.reshape(1, 3),
        "log_scales": g.log_scales.reshape(1, 3),
        "rotations": g.rotation.reshape(1, 4),
    }


def _project_arrays(centers, log_scales, rotations, cam: Camera, near: float):
    """Vectorized projection of all Gaussians; returns full-length arrays."""
    x_cam = centers @ cam.rotation.T + cam.translation
    z = x_cam[:, 2]
    valid = z > near

    n = centers.shape[0]
    means2d = np.zeros((n, 2))
    covs = np.zeros((n, 2, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        means2d[:, 0] = np.where(valid, cam.fx * x_cam[:, 0] / z + cam.cx, 0.0)
        means2d[:, 1] = np.where(valid, cam.fy * x_cam[:, 1] / z + cam.cy, 0.0)

    if np.any(valid):
        vi = np.flatnonzero(valid)
        xc = x_cam[vi]
        rot = quaternions_to_matrices(rotations[vi])
        scales = np.exp(log_scales[vi])
        # camera-frame sqrt factor: (W R) S, covariance = F F^T
        wr = np.einsum("ab,nbc->nac", cam.rotation, rot)
        f = wr * scales[:, None, :]
        m_cam = np.einsum("nab,ncb->nac", f, f)

        zi = xc[:, 2]
        jac = np.zeros((len(vi), 2, 3))
        jac[:, 0, 0] = cam.fx / zi
        jac[:, 0, 2] = -cam.fx * xc[:, 0] / (zi * zi)
        jac[:, 1, 1] = cam.fy / zi
        jac[:, 1, 2] = -cam.fy * xc[:, 1] / (zi * zi)
        cov2 = np.einsum("nab,nbc,ndc->nad", jac, m_cam, jac)
        cov2[:, 0, 0] += LOWPASS
        cov2[:, 1, 1] += LOWPASS
        covs[vi] = cov2
    return means2d, covs, z, valid, x_cam, None


def _conics_and_radii(covs):
    a = covs[:, 0, 0]
    b = covs[:, 0, 1]
    c = covs[:, 1, 1]
    det = a * c - b * b
    inv = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(3.0 * np.sqrt(lam_max))
    return inv, radii


def _eval_colors(cloud, cam: Camera, idx):
    """SH colors (clamped at 0) plus backward inputs for the selected Gaussians."""
    delta = cloud.centers[idx] - cam.center
    dist = np.linalg.norm(delta, axis=1)
    dist = np.maximum(dist, 1e-12)
    dirs = delta / dist[:, None]
    degree = cloud.sh_degree
    basis = sh_basis(dirs, degree)
    coeffs = np.concatenate([cloud.sh_dc[idx][:, None, :], cloud.sh_rest[idx]], axis=1)
    raw = np.einsum("nk,nkc->nc", basis, coeffs) + 0.5
    clamped = raw < 0.0
    return np.maximum(raw, 0.0), clamped, dirs, dist, coeffs


@njit(cache=True)
def _forward_kernel(order, means, conics, base_alpha, colors, depths, radii,
                    height, width, out_color, out_t, out_alpha, out_depth_num,
                    contrib, n_proc, cover_cnt):
    for oi in range(order.size):
        k = order[oi]
        mx = means[k, 0]
        my = means[k, 1]
        r = radii[k]
        x0 = int(np.ceil(mx - r))
        x1 = int(np.floor(mx + r)) + 1
        y0 = int(np.ceil(my - r))
        y1 = int(np.floor(my + r)) + 1
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width:
            x1 = width
        if y1 > height:
            y1 = height
        ca = conics[k, 0]
        cb = conics[k, 1]
        cc = conics[k, 2]
        for y in range(y0, y1):
            dy = y - my
            for x in range(x0, x1):
                dx = x - mx
                power = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                if power > 4.5 or power < 0.0:
                    continue
                cover_cnt[y, x] += 1
                t = out_t[y, x]
                if t < 1e-4:
                    continue
                if power <= 3.0:
                    win = 1.0
                else:
                    s = (4.5 - power) / 1.5
                    win = s * s * (3.0 - 2.0 * s)
                alpha = base_alpha[k] * np.exp(-power) * win
                if alpha > 0.9999:
                    alpha = 0.9999
                w = t * alpha
                out_color[y, x, 0] += w * colors[k, 0]
                out_color[y, x, 1] += w * colors[k, 1]
                out_color[y, x, 2] += w * colors[k, 2]
                out_depth_num[y, x] += w * depths[k]
                out_alpha[y, x] += w
                if w > contrib[k]:
                    contrib[k] = w
                out_t[y, x] = t * (1.0 - alpha)
                n_proc[y, x] += 1


@njit(cache=True)
def _backward_kernel(order, means, conics, base_alpha, colors, depths, radii,
                     height, width, n_proc, cover_rem, t_final, depth_num,
                     d_color_map, d_depth_map, use_depth,
                     suffix_rgb, suffix_z, cur_t,
                     d_mean, d_conic, d_base, d_colors, d_z):
    for oi in range(order.size - 1, -1, -1):
        k = order[oi]
        mx = means[k, 0]
        my = means[k, 1]
        r = radii[k]
        x0 = int(np.ceil(mx - r))
        x1 = int(np.floor(mx + r)) + 1
        y0 = int(np.ceil(my - r))
        y1 = int(np.floor(my + r)) + 1
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width:
            x1 = width
        if y1 > height:
            y1 = height
        ca = conics[k, 0]
        cb = conics[k, 1]
        cc = conics[k, 2]
        for y in range(y0, y1):
            dy = y - my
            for x in range(x0, x1):
                dx = x - mx
                power = 0.5 * (ca * dx * dx + cc * dy * dy) + cb * dx * dy
                if power > 4.5 or power < 0.0:
                    continue
                cover_rem[y, x] -= 1
                if cover_rem[y, x] >= n_proc[y, x]:
                    continue  # was skipped in the forward pass (terminated pixel)
                eraw = np.exp(-power)
                if power <= 3.0:
                    win = 1.0
                    dwin = 0.0
                else:
                    s = (4.5 - power) / 1.5
                    win = s * s * (3.0 - 2.0 * s)
                    dwin = -6.0 * s * (1.0 - s) / 1.5  # d(win)/d(power)
                g = eraw * win
                alpha = base_alpha[k] * g
                clamped = alpha > 0.9999
                if clamped:
                    alpha = 0.9999
                om = 1.0 - alpha
                t_before = cur_t[y, x] / om
                w = t_before * alpha

                g_alpha = 0.0
                for ch in range(3):
                    g_alpha += d_color_map[y, x, ch] * (
                        t_before * colors[k, ch] - suffix_rgb[y, x, ch] / om
                    )
                if use_depth:
                    dd = d_depth_map[y, x]
                    if dd != 0.0:
                        acc = 1.0 - t_final[y, x]
                        if acc > 1e-8:
                            d_num = t_before * depths[k] - suffix_z[y, x] / om
                            d_acc = t_final[y, x] / om
                            g_alpha += dd * (d_num * acc - depth_num[y, x] * d_acc) / (acc * acc)
                            d_z[k] += dd * w / acc

                if not clamped:
                    d_base[k] += g_alpha * g
                    # dG/dpower = eraw * (dwin - win); d_g carries -dG/dpower
                    d_g = g_alpha * base_alpha[k] * eraw * (win - dwin)
                    d_mean[k, 0] += d_g * (ca * dx + cb * dy)
                    d_mean[k, 1] += d_g * (cc * dy + cb * dx)
                    d_conic[k, 0] -= d_g * 0.5 * dx * dx
                    d_conic[k, 1] -= d_g * dx * dy
                    d_conic[k, 2] -= d_g * 0.5 * dy * dy

                for ch in range(3):
                    d_colors[k, ch] += d_color_map[y, x, ch] * w

                suffix_rgb[y, x, 0] += w * colors[k, 0]
                suffix_rgb[y, x, 1] += w * colors[k, 1]
                suffix_rgb[y, x, 2] += w * colors[k, 2]
                suffix_z[y, x] += w * depths[k]
                cur_t[y, x] = t_before


def render(scene: Scene, cam: Camera, near: float = DEFAULT_NEAR) -> RenderOutput:
    """Alpha-blend the scene into `cam` front-to-back."""
    cloud = scene.gaussians
    height, width = cam.height, cam.width
    n = len(cloud)

    out_color = np.zeros((height, width, 3))
    out_t = np.ones((height, width))
    out_alpha = np.zeros((height, width))
    depth_num = np.zeros((height, width))
    n_proc = np.zeros((height, width), dtype=np.int32)
    cover_cnt = np.zeros((height, width), dtype=np.int32)
    contributions = np.zeros(n)

    if n:
        means2d, covs, zs, valid, _, _ = _project_arrays(
            cloud.centers, cloud.log_scales, cloud.rotations, cam, near
        )
        valid_idx = np.flatnonzero(valid)
    else:
        valid_idx = np.zeros(0, dtype=np.int64)

    if valid_idx.size:
        vm = means2d[valid_idx]
        vc = covs[valid_idx]
        vz = zs[valid_idx]
        conics, radii = _conics_and_radii(vc)
        base_alpha = sigmoid(cloud.opacity_logits[valid_idx]) * sigmoid(cloud.importance_logits[valid_idx])
        colors, clamped, dirs, dist, _ = _eval_colors(cloud, cam, valid_idx)
        order = np.argsort(vz, kind="stable")
        contrib_v = np.zeros(valid_idx.size)
        _forward_kernel(
            np.ascontiguousarray(order), np.ascontiguousarray(vm),
            np.ascontiguousarray(conics), np.ascontiguousarray(base_alpha),
            np.ascontiguousarray(colors), np.ascontiguousarray(vz),
            np.ascontiguousarray(radii), height, width,
            out_color, out_t, out_alpha, depth_num, contrib_v, n_proc, cover_cnt,
        )
        contributions[valid_idx] = contrib_v
        cache = _ForwardCache(
            valid_idx=valid_idx, order=order, means2d=vm, conics=conics, covs2d=vc,
            x_cam=(cloud.centers[valid_idx] @ cam.rotation.T + cam.translation),
            radii=radii, base_alpha=base_alpha, colors=colors, color_clamped=clamped,
            dirs=dirs, dist=dist, n_proc=n_proc, cover_cnt=cover_cnt, depth_num=depth_num,
        )
    else:
        cache = _ForwardCache(
            valid_idx=valid_idx, order=np.zeros(0, dtype=np.int64),
            means2d=np.zeros((0, 2)), conics=np.zeros((0, 3)), covs2d=np.zeros((0, 2, 2)),
            x_cam=np.zeros((0, 3)), radii=np.zeros(0), base_alpha=np.zeros(0),
            colors=np.zeros((0, 3)), color_clamped=np.zeros((0, 3), dtype=bool),
            dirs=np.zeros((0, 3)), dist=np.zeros(0),
            n_proc=n_proc, cover_cnt=cover_cnt, depth_num=depth_num,
        )

    out_color += out_t[:, :, None] * scene.background_color[None, None, :]
    acc = 1.0 - out_t
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(acc > DEPTH_EPS, depth_num / acc, np.nan)

    return RenderOutput(
        color=out_color, depth=depth, final_transmittance=out_t,
        contributions=contributions, alpha_sum=out_alpha, cache=cache,
    )


def render_backward(scene: Scene, cam: Camera, d_color: np.ndarray,
                    d_depth: np.ndarray | None = None,
                    out: RenderOutput | None = None,
                    near: float = DEFAULT_NEAR) -> GradBuffer:
    """Exact gradients of the rendered image (and optionally the depth map)
    with respect to the Gaussian parameters.

    d_color is the adjoint of `color` (H, W, 3); d_depth, when given, is the
    adjoint of `depth` (H, W) and must be zero wherever depth is NaN.
    Reuses the forward cache in `out` when provided, otherwise re-renders.
    """
    height, width = cam.height, cam.width
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (height, width, 3):
        raise ValueError(f"d_color shape {d_color.shape} != {(height, width, 3)}")
    if d_depth is not None:
        d_depth = np.asarray(d_depth, dtype=np.float64)
        if d_depth.shape != (height, width):
            raise ValueError(f"d_depth shape {d_depth.shape} != {(height, width)}")

    if out is None or out.cache is None:
        out = render(scene, cam, near=near)
    cache = out.cache

    cloud = scene.gaussians
    grads = GradBuffer.zeros(len(cloud))
    vi = cache.valid_idx
    if vi.size == 0:
        return grads

    v = vi.size
    d_mean = np.zeros((v, 2))
    d_conic = np.zeros((v, 3))
    d_base = np.zeros(v)
    d_colors = np.zeros((v, 3))
    d_z = np.zeros(v)

    suffix_rgb = out.final_transmittance[:, :, None] * scene.background_color[None, None, :]
    suffix_rgb = np.ascontiguousarray(suffix_rgb)
    suffix_z = np.zeros((height, width))
    cur_t = out.final_transmittance.copy()
    cover_rem = cache.cover_cnt.copy()
    use_depth = d_depth is not None
    d_depth_arr = d_depth if use_depth else np.zeros((height, width))

    _backward_kernel(
        np.ascontiguousarray(cache.order), np.ascontiguousarray(cache.means2d),
        np.ascontiguousarray(cache.conics), np.ascontiguousarray(cache.base_alpha),
        np.ascontiguousarray(cache.colors), np.ascontiguousarray(cache.x_cam[:, 2]),
        np.ascontiguousarray(cache.radii), height, width,
        cache.n_proc, cover_rem, out.final_transmittance, cache.depth_num,
        np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth_arr), use_depth,
        suffix_rgb, suffix_z, cur_t,
        d_mean, d_conic, d_base, d_colors, d_z,
    )

    # --- chain from footprint quantities to Gaussian parameters -------------
    so = sigmoid(cloud.opacity_logits[vi])
    si = sigmoid(cloud.importance_logits[vi])
    grads.d_opacity_logit[vi] = d_base * si * so * (1.0 - so)
    grads.d_importance_logit[vi] = d_base * so * si * (1.0 - si)

    # conic -> 2D covariance: G_cov = -A G_conic A with the packed off-diagonal
    # split across both entries of the full-matrix gradient
    conic_full = np.zeros((v, 2, 2))
    conic_full[:, 0, 0] = cache.conics[:, 0]
    conic_full[:, 0, 1] = conic_full[:, 1, 0] = cache.conics[:, 1]
    conic_full[:, 1, 1] = cache.conics[:, 2]
    g_conic = np.zeros((v, 2, 2))
    g_conic[:, 0, 0] = d_conic[:, 0]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_conic[:, 1, 1] = d_conic[:, 2]
    g_cov = -np.einsum("nab,nbc,ncd->nad", conic_full, g_conic, conic_full)

    xc = cache.x_cam
    zi = xc[:, 2]
    jac = np.zeros((v, 2, 3))
    jac[:, 0, 0] = cam.fx / zi
    jac[:, 0, 2] = -cam.fx * xc[:, 0] / (zi * zi)
    jac[:, 1, 1] = cam.fy / zi
    jac[:, 1, 2] = -cam.fy * xc[:, 1] / (zi * zi)

    rot = quaternions_to_matrices(cloud.rotations[vi])
    scales = np.exp(cloud.log_scales[vi])
    wr = np.einsum("ab,nbc->nac", cam.rotation, rot)
    f = wr * scales[:, None, :]
    m_cam = np.einsum("nab,ncb->nac", f, f)

    # covariance -> log-scales (through Sigma_cam = (W R) S^2 (W R)^T)
    g_mcam = np.einsum("nba,nbc,ncd->nad", jac, g_cov, jac)
    # d/d(s_a^2) = (W R)_a^T G (W R)_a ; d/d(log s_a) = 2 s_a^2 * that
    col_quads = np.einsum("nia,nij,nja->na", wr, g_mcam, wr)
    grads.d_log_scales[vi] = 2.0 * (scales ** 2) * col_quads

    # covariance -> camera-space position through the Jacobian entries
    g_jac = 2.0 * np.einsum("nab,nbc,ncd->nad", g_cov, jac, m_cam)
    d_xcam = np.zeros((v, 3))
    inv_z2 = 1.0 / (zi * zi)
    inv_z3 = inv_z2 / zi
    d_xcam[:, 0] += g_jac[:, 0, 2] * (-cam.fx * inv_z2)
    d_xcam[:, 1] += g_jac[:, 1, 2] * (-cam.fy * inv_z2)
    d_xcam[:, 2] += (
        g_jac[:, 0, 0] * (-cam.fx * inv_z2)
        + g_jac[:, 0, 2] * (2.0 * cam.fx * xc[:, 0] * inv_z3)
        + g_jac[:, 1, 1] * (-cam.fy * inv_z2)
        + g_jac[:, 1, 2] * (2.0 * cam.fy * xc[:, 1] * inv_z3)
    )

    # projected mean path (J^T d_mean) and blended-depth z path
    d_xcam += np.einsum("nab,na->nb", jac, d_mean)
    d_xcam[:, 2] += d_z

    d_center = np.einsum("ba,nb->na", cam.rotation, d_xcam)

    # SH color paths: DC coefficient and view direction (clamp-gated)
    d_raw = np.where(cache.color_clamped, 0.0, d_colors)
    grads.d_sh_dc[vi] = d_raw * _SH_C0

    degree = cloud.sh_degree
    if degree > 0:
        coeffs = np.concatenate([cloud.sh_dc[vi][:, None, :], cloud.sh_rest[vi]], axis=1)
        bgrad = sh_basis_grad(cache.dirs, degree)          # (V, K, 3)
        d_dir = np.einsum("nc,nkc,nkd->nd", d_raw, coeffs, bgrad)
        eye = np.eye(3)[None, :, :]
        proj = (eye - cache.dirs[:, :, None] * cache.dirs[:, None, :]) / cache.dist[:, None, None]
        d_center += np.einsum("nab,na->nb", proj, d_dir)

    grads.d_center[vi] = d_center
    return grads


def visibility_hits(out: RenderOutput, threshold: float = 0.01) -> np.ndarray:
    """True where a Gaussian's max pixel contribution T*alpha reaches threshold."""
    return out.contributions >= threshold


def dump_render(out: RenderOutput, directory, stem: str) -> None:
    """Debug dump: color PNG plus depth / transmittance PFMs."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_png(out.color, d / f"{stem}_color.png")
    save_pfm(np.nan_to_num(out.depth, nan=0.0), d / f"{stem}_depth.pfm")
    save_pfm(out.final_transmittance, d / f"{stem}_transmittance.pfm")
