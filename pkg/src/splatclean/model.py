"""Core data types for anisotropic Gaussian splat scenes.

Conventions used across the package:

- quaternions are (w, x, y, z) and kept unit-norm,
- per-axis scales are stored in log space (exp gives the std-dev in scene units),
- opacity and learned importance are stored as logits; the rendered blending
  alpha is sigmoid(opacity_logit) * sigmoid(importance_logit) * G(pixel),
- SH colors follow the standard 3DGS convention: the DC triplet is scaled by
  Y00 = 0.28209479... and offset by +0.5 at evaluation time,
- camera poses are world-to-camera rigid transforms (x_cam = R @ x + t) with
  the camera looking along +z.

Bulk storage is struct-of-arrays (`GaussianCloud`); `Gaussian` is the
single-primitive view used at API boundaries and in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

SH_C0 = 0.28209479177387814


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    """Inverse of sigmoid; p must lie strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def normalize_quaternions(q: NDArray[np.float64]) -> NDArray[np.float64]:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quaternions_to_matrices(q: NDArray[np.float64]) -> NDArray[np.float64]:
    """Unit quaternions (..., 4) as (w, x, y, z) to rotation matrices (..., 3, 3)."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def sh_coeff_count(degree: int) -> int:
    """Number of SH coefficient triplets for a given degree."""
    return (degree + 1) ** 2


def sh_degree_from_rest(rest_count: int) -> int:
    """Solve 3*((L+1)^2 - 1) = rest_count for L; raises if no integer solution."""
    for degree in range(4):
        if 3 * (sh_coeff_count(degree) - 1) == rest_count:
            return degree
    raise ValueError(f"f_rest property count {rest_count} matches no SH degree in [0, 3]")


@dataclass
class Gaussian:
    """One anisotropic Gaussian primitive.

    sh_coeffs has shape (K, 3) with K = (L+1)^2 triplets; triplet 0 is the DC
    term, the remainder are the view-dependent coefficients.
    """

    center: NDArray[np.float64]
    log_scales: NDArray[np.float64]
    rotation: NDArray[np.float64]
    opacity_logit: float
    sh_coeffs: NDArray[np.float64]
    importance_logit: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        self.opacity_logit = float(self.opacity_logit)
        self.importance_logit = float(self.importance_logit)

    @property
    def opacity(self) -> float:
        return sigmoid(self.opacity_logit)

    @property
    def importance(self) -> float:
        return sigmoid(self.importance_logit)


def covariance_scales(g: Gaussian) -> NDArray[np.float64]:
    """Per-axis std-devs exp(log_scales), sorted ascending (s1 <= s2 <= s3)."""
    return np.sort(np.exp(g.log_scales))


class GaussianCloud:
    """Struct-of-arrays container for N Gaussians; sequence-like over `Gaussian`.

    All arrays are float64 and owned by the cloud. Mutating operations
    (`append_cloud`, `take`, `delete`) keep every field aligned.
    """

    __slots__ = ("centers", "log_scales", "rotations", "opacity_logits",
                 "sh_dc", "sh_rest", "importance_logits", "normals")

    def __init__(self, centers, log_scales, rotations, opacity_logits,
                 sh_dc, sh_rest, importance_logits, normals=None):
        n = len(centers)
        self.centers = np.asarray(centers, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.sh_dc = np.asarray(sh_dc, dtype=np.float64).reshape(n, 3)
        rest = np.asarray(sh_rest, dtype=np.float64)
        if rest.ndim != 3:
            rest = rest.reshape(n, -1, 3) if rest.size else rest.reshape(n, 0, 3)
        self.sh_rest = rest
        self.importance_logits = np.asarray(importance_logits, dtype=np.float64).reshape(n)
        if normals is None:
            normals = np.zeros((n, 3))
        self.normals = np.asarray(normals, dtype=np.float64).reshape(n, 3)

    @classmethod
    def empty(cls, sh_degree: int) -> "GaussianCloud":
        rest = sh_coeff_count(sh_degree) - 1
        return cls(
            centers=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0),
            sh_dc=np.zeros((0, 3)), sh_rest=np.zeros((0, rest, 3)),
            importance_logits=np.zeros(0),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], sh_degree: int | None = None) -> "GaussianCloud":
        if sh_degree is None:
            if not gaussians:
                raise ValueError("sh_degree required for an empty Gaussian list")
            sh_degree = int(np.sqrt(gaussians[0].sh_coeffs.shape[0])) - 1
        k = sh_coeff_count(sh_degree)
        for g in gaussians:
            if g.sh_coeffs.shape[0] != k:
                raise ValueError(
                    f"Gaussian has {g.sh_coeffs.shape[0]} SH triplets, scene degree {sh_degree} needs {k}"
                )
        n = len(gaussians)
        cloud = cls.empty(sh_degree)
        if n == 0:
            return cloud
        cloud.centers = np.stack([g.center for g in gaussians])
        cloud.log_scales = np.stack([g.log_scales for g in gaussians])
        cloud.rotations = np.stack([g.rotation for g in gaussians])
        cloud.opacity_logits = np.array([g.opacity_logit for g in gaussians])
        cloud.sh_dc = np.stack([g.sh_coeffs[0] for g in gaussians])
        cloud.sh_rest = np.stack([g.sh_coeffs[1:] for g in gaussians])
        cloud.importance_logits = np.array([g.importance_logit for g in gaussians])
        cloud.normals = np.zeros((n, 3))
        return cloud

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh_rest.shape[1] + 1)) - 1

    @property
    def opacities(self) -> NDArray[np.float64]:
        return sigmoid(self.opacity_logits)

    @property
    def importances(self) -> NDArray[np.float64]:
        return sigmoid(self.importance_logits)

    def sorted_scales(self) -> NDArray[np.float64]:
        """exp(log_scales) sorted ascending per Gaussian, shape (N, 3)."""
        return np.sort(np.exp(self.log_scales), axis=1)

    def sh_rest_energy(self) -> NDArray[np.float64]:
        """L2 norm of the non-DC SH coefficients per Gaussian."""
        return np.sqrt(np.sum(self.sh_rest ** 2, axis=(1, 2)))

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        i = int(i)
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(f"Gaussian index {i} out of range for cloud of {len(self)}")
        sh = np.concatenate([self.sh_dc[i:i + 1], self.sh_rest[i]], axis=0)
        return Gaussian(
            center=self.centers[i].copy(),
            log_scales=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=sh.copy(),
            importance_logit=float(self.importance_logits[i]),
        )

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.centers.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.opacity_logits.copy(), self.sh_dc.copy(), self.sh_rest.copy(),
            self.importance_logits.copy(), self.normals.copy(),
        )

    def take(self, indices) -> "GaussianCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            self.centers[idx], self.log_scales[idx], self.rotations[idx],
            self.opacity_logits[idx], self.sh_dc[idx], self.sh_rest[idx],
            self.importance_logits[idx], self.normals[idx],
        )

    def delete(self, indices) -> "GaussianCloud":
        """New cloud with `indices` removed; survivors keep their relative order."""
        keep = np.ones(len(self), dtype=bool)
        keep[np.asarray(indices, dtype=np.int64)] = False
        return self.take(np.flatnonzero(keep))

    def append_cloud(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh_rest.shape[1] != self.sh_rest.shape[1]:
            raise ValueError("SH degree mismatch between clouds")
        return GaussianCloud(
            np.concatenate([self.centers, other.centers]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh_dc, other.sh_dc]),
            np.concatenate([self.sh_rest, other.sh_rest]),
            np.concatenate([self.importance_logits, other.importance_logits]),
            np.concatenate([self.normals, other.normals]),
        )

    def validate(self):
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("non-finite Gaussian centers")
        scales = np.exp(self.log_scales)
        if not (np.all(np.isfinite(scales)) and np.all(scales > 0)):
            raise ValueError("exp(log_scales) must be finite and positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if len(self) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("quaternions drifted from unit norm beyond 1e-6")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid pose (x_cam = R @ x + t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]
    width: int
    height: int
    cam_id: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation not orthonormal (max deviation {err:.2e})")

    @property
    def center(self) -> NDArray[np.float64]:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        return points @ self.rotation.T + self.translation


@dataclass
class Scene:
    """Gaussian cloud plus the per-view training data that drives it.

    targets / depth_priors / uncertainty_maps are lists aligned with cameras;
    entries may be None when a view carries no such data.
    """

    gaussians: GaussianCloud
    cameras: list[Camera] = field(default_factory=list)
    targets: list = field(default_factory=list)
    depth_priors: list = field(default_factory=list)
    uncertainty_maps: list = field(default_factory=list)
    background_color: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64).reshape(3)
        if not self.targets:
            self.targets = [None] * len(self.cameras)
        if not self.depth_priors:
            self.depth_priors = [None] * len(self.cameras)
        if not self.uncertainty_maps:
            self.uncertainty_maps = [None] * len(self.cameras)
        self.validate()

    @property
    def sh_degree(self) -> int:
        return self.gaussians.sh_degree

    def validate(self):
        for name, grids in (("targets", self.targets), ("depth_priors", self.depth_priors),
                            ("uncertainty_maps", self.uncertainty_maps)):
            if len(grids) != len(self.cameras):
                raise ValueError(f"{name} list length {len(grids)} != camera count {len(self.cameras)}")
            for cam, grid in zip(self.cameras, grids):
                if grid is None:
                    continue
                if grid.shape[:2] != (cam.height, cam.width):
                    raise ValueError(
                        f"{name} grid {grid.shape[:2]} does not match camera {cam.cam_id or '?'} "
                        f"size {(cam.height, cam.width)}"
                    )

    def extent(self) -> float:
        """Diagonal of the axis-aligned bounding box of all centers."""
        c = self.gaussians.centers
        if len(c) == 0:
            return 0.0
        return float(np.linalg.norm(c.max(axis=0) - c.min(axis=0)))

    def copy(self) -> "Scene":
        return Scene(
            gaussians=self.gaussians.copy(),
            cameras=list(self.cameras),
            targets=list(self.targets),
            depth_priors=list(self.depth_priors),
            uncertainty_maps=list(self.uncertainty_maps),
            background_color=self.background_color.copy(),
        )
