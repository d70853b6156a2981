"""Synthetic labeled scenes: the oracle substrate for pruning tests.

make_box_scene builds an open-faced room of jittered surface disks plus three
planted populations with controlled statistics:

  - thin: wire-like strings (smallest scale far below the surface 10th
    percentile, anisotropy >= 50) with floater-like evidence stats, so only
    the detail guards can save them;
  - glint: isolated low-opacity sparks carrying large non-DC SH energy;
  - floater: unsupported isotropic blobs hovering off the walls, guaranteed
    isolated (min distance to any non-floater >= the isolation threshold),
    excluded from the rendered targets so they are photometrically
    unsupported, and rejection-sampled so no detail guard can claim them.

Placement keeps planted Gaussians inside wall-adjacent cap-grid cells (the
populated ones), since per-cell removal caps floor to zero in empty space.
Every construction guarantee is re-verified by brute force in the test suite;
the generator never self-certifies.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evidence import EvidenceLedger
from .images import load_mask_png, load_pfm, load_png, save_mask_png, save_pfm, save_png
from .model import SH_C0, Camera, GaussianCloud, Scene, logit
from .ply import load_ply, save_ply
from .renderer import render

WALL_TANGENT_SCALE = 0.027
WALL_NORMAL_SCALE = 0.004
WIRE_LONG_SCALE = 0.06
WIRE_THIN_SCALE = 0.0008
GLINT_SCALE = 0.012
# hover bands are stratified so a floater's k-nearest neighbors are always a
# single wall patch: floaters sit low, wires/glints high, and the bands are
# separated by more than a floater's 16-NN reach
HOVER_FLOATER = (0.105, 0.13)
HOVER_PLANTED = (0.28, 0.42)
FLOATER_MIN_SPACING = 0.22


@dataclass
class BoxRecipe:
    surface_count: int = 10000
    floater_count: int = 100
    thin_count: int = 200
    glint_count: int = 200
    near_cluster_count: int = 0
    camera_count: int = 16
    image_size: int = 96
    seed: int = 0
    half_size: float = 1.0
    cameras_inside: bool = True
    camera_distance: float = 0.82
    isolation_frac: float = 0.02
    sh_degree: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    surface_color_jitter: float = 0.02
    surface_rest_sigma: float = 0.02
    glint_rest_sigma: float = 0.4
    perturb_colors: float = 0.04
    perturb_opacity: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledScene:
    scene: Scene
    labels: np.ndarray
    recipe: dict
    fg_masks: list = field(default_factory=list)
    clean_indices: np.ndarray | None = None


# wall id -> (fixed axis, sign); +z face stays open
_WALLS = [(2, -1.0), (0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0)]
_WALL_COLORS = np.array([
    [0.75, 0.72, 0.66],
    [0.62, 0.30, 0.26],
    [0.28, 0.44, 0.62],
    [0.45, 0.52, 0.30],
    [0.55, 0.42, 0.58],
])


def _look_at(eye, target, up=(0.0, 1.0, 0.0)):
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def _rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    return (rgb - 0.5) / SH_C0


def _wall_points(recipe: BoxRecipe, rng: np.random.Generator):
    """Jittered grids on the five closed faces; returns (centers, log_scales,
    colors) with axis-aligned disk scales."""
    h = recipe.half_size
    per_wall = recipe.surface_count // len(_WALLS)
    counts = [per_wall] * len(_WALLS)
    counts[0] += recipe.surface_count - per_wall * len(_WALLS)

    centers, log_scales, colors = [], [], []
    for wall_id, (axis, sign) in enumerate(_WALLS):
        n = counts[wall_id]
        side = int(np.ceil(np.sqrt(n)))
        spacing = 2.0 * h / side
        u, v = np.meshgrid(np.arange(side), np.arange(side))
        uv = np.stack([u.ravel(), v.ravel()], axis=1)[:n].astype(np.float64)
        uv = (uv + 0.5) * spacing - h
        uv += rng.uniform(-0.3, 0.3, uv.shape) * spacing

        pts = np.zeros((n, 3))
        tang_axes = [a for a in range(3) if a != axis]
        pts[:, tang_axes[0]] = uv[:, 0]
        pts[:, tang_axes[1]] = uv[:, 1]
        pts[:, axis] = sign * h

        ls = np.zeros((n, 3))
        ls[:, tang_axes] = np.log(WALL_TANGENT_SCALE * rng.uniform(0.85, 1.2, (n, 2)))
        ls[:, axis] = np.log(WALL_NORMAL_SCALE * rng.uniform(0.8, 1.25, n))

        base = _WALL_COLORS[wall_id]
        low_freq = 0.08 * np.stack([
            np.sin(2.1 * uv[:, 0] + wall_id), np.cos(1.7 * uv[:, 1] - wall_id),
            np.sin(1.3 * (uv[:, 0] + uv[:, 1])),
        ], axis=1)
        col = np.clip(base + low_freq + rng.normal(0, recipe.surface_color_jitter, (n, 3)),
                      0.05, 0.95)
        centers.append(pts)
        log_scales.append(ls)
        colors.append(col)
    return np.concatenate(centers), np.concatenate(log_scales), np.concatenate(colors)


def _hover_point(recipe: BoxRecipe, rng: np.random.Generator, band):
    """Random point offset into the room from a random closed wall."""
    h = recipe.half_size
    axis, sign = _WALLS[int(rng.integers(len(_WALLS)))]
    offset = rng.uniform(*band) * h
    p = rng.uniform(-0.8 * h, 0.8 * h, 3)
    p[axis] = sign * (h - offset)
    return p


def _wire_strings(recipe: BoxRecipe, rng: np.random.Generator):
    """Strings of elongated Gaussians hovering parallel to a wall; spacing is
    wide enough that mean-kNN isolation holds."""
    h = recipe.half_size
    n = recipe.thin_count
    per_string = 25
    n_strings = max(1, int(np.ceil(n / per_string)))
    centers, log_scales = [], []
    made = 0
    for s in range(n_strings):
        count = min(per_string, n - made)
        made += count
        axis, sign = _WALLS[int(rng.integers(len(_WALLS)))]
        tang_axes = [a for a in range(3) if a != axis]
        long_axis = tang_axes[int(rng.integers(2))]
        other_axis = tang_axes[1 - tang_axes.index(long_axis)]
        offset = rng.uniform(*HOVER_PLANTED) * h
        lateral = rng.uniform(-0.7 * h, 0.7 * h)
        start = rng.uniform(-0.75 * h, -0.65 * h)
        span = rng.uniform(1.3, 1.45) * h
        ts = start + span * np.arange(count) / per_string
        pts = np.zeros((count, 3))
        pts[:, axis] = sign * (h - offset)
        pts[:, other_axis] = lateral
        pts[:, long_axis] = ts
        ls = np.full((count, 3), np.log(WIRE_THIN_SCALE))
        ls[:, long_axis] = np.log(WIRE_LONG_SCALE)
        centers.append(pts)
        log_scales.append(ls)
    return np.concatenate(centers), np.concatenate(log_scales)


def _min_dist(points: np.ndarray, q: np.ndarray) -> float:
    d = points - q
    return float(np.sqrt((d * d).sum(axis=1).min()))


def _neighbor_color_variance(centers: np.ndarray, colors: np.ndarray, q: np.ndarray,
                             k: int = 16) -> float:
    d = centers - q
    dist2 = (d * d).sum(axis=1)
    nbrs = np.argpartition(dist2, k)[:k]
    return float(np.var(colors[nbrs], axis=0).sum())


def make_box_scene(recipe: BoxRecipe) -> LabeledScene:
    rng = np.random.default_rng(recipe.seed)
    h = recipe.half_size
    rest_b = (recipe.sh_degree + 1) ** 2 - 1

    wall_pts, wall_ls, wall_rgb = _wall_points(recipe, rng)
    n_wall = len(wall_pts)

    wire_pts, wire_ls = _wire_strings(recipe, rng) if recipe.thin_count else (
        np.zeros((0, 3)), np.zeros((0, 3)))

    glint_pts = []
    for _ in range(recipe.glint_count):
        for _attempt in range(200):
            p = _hover_point(recipe, rng, HOVER_PLANTED)
            others = np.concatenate([wall_pts, wire_pts] + ([np.stack(glint_pts)] if glint_pts else []))
            if _min_dist(others, p) >= 0.09 * h:
                glint_pts.append(p)
                break
        else:
            raise RuntimeError("glint placement failed after bounded rejection sampling")
    glint_pts = np.stack(glint_pts) if glint_pts else np.zeros((0, 3))

    cluster_anchor = np.array([1.55 * h, 0.45 * h, 1.75 * h])
    span_hi = np.array([h, h, h])
    if recipe.near_cluster_count:
        span_hi = np.maximum(span_hi, cluster_anchor)
    extent_guess = float(np.linalg.norm(span_hi + h))

    # the scene starts from perturbed wall colors (training has photometric
    # work to do); targets render from the clean ones
    wall_rgb_start = np.clip(
        wall_rgb + rng.normal(0, recipe.perturb_colors, wall_rgb.shape), 0.02, 0.98)
    wall_opacity = rng.uniform(3.0, 4.0, n_wall)
    wall_opacity_start = wall_opacity + rng.normal(0, recipe.perturb_opacity, n_wall)

    # isolation guarantee for floaters: min distance to ANY non-floater center
    min_sep = max(1.15 * recipe.isolation_frac * extent_guess, HOVER_FLOATER[0] * h)
    non_floater_pts = np.concatenate([wall_pts, wire_pts, glint_pts])
    var_budget = None
    if n_wall > 64:
        sample = rng.choice(n_wall, size=min(400, n_wall), replace=False)
        v_samples = [
            _neighbor_color_variance(wall_pts, wall_rgb_start, wall_pts[i]) for i in sample
        ]
        var_budget = float(np.percentile(v_samples, 35.0))

    # variance rejection runs against every already-placed point with its
    # actual color, so an accepted floater's k-NN color variance is known to
    # sit below the budget at construction time
    wire_rgb = np.tile(np.array([0.3, 0.3, 0.32]), (len(wire_pts), 1))
    glint_rgb = np.tile(np.array([0.85, 0.82, 0.7]), (len(glint_pts), 1))
    placed_pts = np.concatenate([wall_pts, wire_pts, glint_pts])
    placed_rgb = np.concatenate([wall_rgb_start, wire_rgb, glint_rgb])

    floater_pts = []
    floater_rgb = []
    for _ in range(recipe.floater_count):
        for _attempt in range(600):
            p = _hover_point(recipe, rng, HOVER_FLOATER)
            if _min_dist(non_floater_pts, p) < min_sep:
                continue
            if floater_pts and _min_dist(np.stack(floater_pts), p) < FLOATER_MIN_SPACING * h:
                continue
            if var_budget is not None and _neighbor_color_variance(
                    placed_pts, placed_rgb, p) > var_budget:
                continue
            nearest_wall = int(np.argmin(((wall_pts - p) ** 2).sum(axis=1)))
            floater_pts.append(p)
            floater_rgb.append(wall_rgb_start[nearest_wall])
            placed_pts = np.concatenate([placed_pts, p[None, :]])
            placed_rgb = np.concatenate([placed_rgb, floater_rgb[-1][None, :]])
            break
        else:
            raise RuntimeError("floater placement failed after bounded rejection sampling")
    floater_pts = np.stack(floater_pts) if floater_pts else np.zeros((0, 3))
    floater_rgb = np.stack(floater_rgb) if floater_rgb else np.zeros((0, 3))

    cluster_pts = np.zeros((0, 3))
    if recipe.near_cluster_count:
        cluster_pts = cluster_anchor + rng.normal(0, 0.02 * h, (recipe.near_cluster_count, 3))

    def _block(pts, log_scales, rgb, opacity_logits, importance_logits, rest):
        n = len(pts)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return GaussianCloud(
            centers=pts, log_scales=log_scales, rotations=rot,
            opacity_logits=opacity_logits, sh_dc=_rgb_to_dc(rgb), sh_rest=rest,
            importance_logits=importance_logits,
        )

    # surfaces: opaque, trainable-importance, mild view-dependent noise;
    # the trainable copy starts from the perturbed colors/opacities
    wall_rest = rng.normal(0, recipe.surface_rest_sigma, (n_wall, rest_b, 3))
    wall_cloud = _block(
        wall_pts, wall_ls, wall_rgb_start,
        opacity_logits=wall_opacity_start,
        importance_logits=np.full(n_wall, 1.0),
        rest=wall_rest,
    )
    wall_cloud_clean = _block(
        wall_pts, wall_ls, wall_rgb,
        opacity_logits=wall_opacity,
        importance_logits=np.full(n_wall, 1.0),
        rest=wall_rest,
    )

    def _weak_stats(n):
        """Opacity/importance both under the candidate thresholds with their
        product below the render visibility threshold."""
        alpha = rng.uniform(0.015, 0.035, n)
        omega = rng.uniform(0.12, 0.26, n)
        return logit(alpha), logit(omega)

    n_wire = len(wire_pts)
    wa, wo = _weak_stats(n_wire)
    wire_cloud = _block(
        wire_pts, wire_ls, wire_rgb,
        opacity_logits=wa, importance_logits=wo,
        rest=np.zeros((n_wire, rest_b, 3)),
    )

    n_glint = len(glint_pts)
    ga, go = _weak_stats(n_glint)
    glint_cloud = _block(
        glint_pts, np.full((n_glint, 3), np.log(GLINT_SCALE)),
        glint_rgb,
        opacity_logits=ga, importance_logits=go,
        rest=rng.normal(0, recipe.glint_rest_sigma, (n_glint, rest_b, 3)),
    )

    n_float = len(floater_pts)
    fa, fo = _weak_stats(n_float)
    floater_cloud = _block(
        floater_pts,
        np.log(rng.uniform(0.008, 0.018, (n_float, 3)) * rng.uniform(0.9, 1.1, (n_float, 1))),
        floater_rgb,
        opacity_logits=fa, importance_logits=fo,
        rest=np.zeros((n_float, rest_b, 3)),
    )

    n_cluster = len(cluster_pts)
    cluster_cloud = None
    if n_cluster:
        ca = logit(np.full(n_cluster, 0.038))
        co = logit(np.full(n_cluster, 0.25))
        cluster_cloud = _block(
            cluster_pts, np.full((n_cluster, 3), np.log(0.06 * h)),
            np.tile(np.array([0.6, 0.55, 0.5]), (n_cluster, 1)),
            opacity_logits=ca, importance_logits=co,
            rest=np.zeros((n_cluster, rest_b, 3)),
        )

    clean = wall_cloud_clean.append_cloud(wire_cloud).append_cloud(glint_cloud)
    full = wall_cloud.append_cloud(wire_cloud).append_cloud(glint_cloud).append_cloud(floater_cloud)
    if cluster_cloud is not None:
        full = full.append_cloud(cluster_cloud)
    labels = np.array(
        ["surface"] * n_wall + ["thin"] * n_wire + ["glint"] * n_glint
        + ["floater"] * (n_float + n_cluster), dtype=object,
    )
    clean_indices = np.arange(len(clean), dtype=np.int64)

    # cameras: inward-facing ring (inside the room, or pulled back past the opening)
    cameras = []
    size = recipe.image_size
    for i in range(recipe.camera_count):
        ang = 2.0 * np.pi * i / recipe.camera_count
        if recipe.cameras_inside:
            eye = np.array([0.3 * h * np.cos(ang), 0.3 * h * np.sin(ang),
                            recipe.camera_distance * h])
            target = np.array([0.12 * h * np.cos(ang + 2.2), 0.12 * h * np.sin(ang + 2.2),
                               -0.3 * h])
            fx = size / 2.0
        else:
            eye = np.array([0.35 * h * np.cos(ang), 0.35 * h * np.sin(ang),
                            recipe.camera_distance * h])
            target = np.array([0.0, 0.0, 0.0])
            fx = size / 2.0 * 1.15
        rot, t = _look_at(eye, target)
        cameras.append(Camera(fx=fx, fy=fx, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                              rotation=rot, translation=t, width=size, height=size,
                              cam_id=f"cam{i:02d}"))

    # targets from the clean scene only: floaters get no photometric support
    clean_scene = Scene(gaussians=clean, cameras=cameras,
                        background_color=np.asarray(recipe.background, dtype=np.float64))
    targets = []
    fg_masks = []
    for cam in cameras:
        out = render(clean_scene, cam)
        targets.append(out.color.copy())
        fg_masks.append((1.0 - out.final_transmittance) > 0.5)

    scene = Scene(gaussians=full, cameras=cameras, targets=targets,
                  background_color=np.asarray(recipe.background, dtype=np.float64))
    return LabeledScene(scene=scene, labels=labels, recipe=recipe.to_dict(),
                        fg_masks=fg_masks, clean_indices=clean_indices)


def make_depth_priors(labeled: LabeledScene, scale_range=(1.5, 2.5),
                      shift_range=(0.2, 1.0), edge_noise: float = 0.0,
                      seed: int = 0):
    """Per-view monocular-style priors: clean-scene depth warped by a random
    affine (s*, t*), optional localized noise with matching low uncertainty.

    Sets scene.depth_priors / scene.uncertainty_maps and returns
    (priors, uncertainties, affines).
    """
    rng = np.random.default_rng(seed)
    scene = labeled.scene
    clean = Scene(
        gaussians=scene.gaussians.take(labeled.clean_indices),
        cameras=scene.cameras,
        background_color=scene.background_color,
    )
    priors, uncerts, affines = [], [], []
    for cam in scene.cameras:
        depth = render(clean, cam).depth
        s_true = float(rng.uniform(*scale_range))
        t_true = float(rng.uniform(*shift_range))
        prior = s_true * depth + t_true
        w = np.where(np.isfinite(prior), 1.0, 0.0)
        if edge_noise > 0:
            hgt, wid = prior.shape
            cy, cx = rng.integers(0, hgt), rng.integers(0, wid)
            yy, xx = np.mgrid[0:hgt, 0:wid]
            patch = (np.abs(yy - cy) < hgt // 6) & (np.abs(xx - cx) < wid // 6)
            prior = np.where(patch & np.isfinite(prior),
                             prior + rng.normal(0, edge_noise, prior.shape), prior)
            w = np.where(patch, 0.05, w)
        priors.append(np.nan_to_num(prior, nan=0.0))
        uncerts.append(np.where(np.isfinite(depth), w, 0.0))
        affines.append((s_true, t_true))
    scene.depth_priors = priors
    scene.uncertainty_maps = uncerts
    return priors, uncerts, affines


def replay_removals(labels: np.ndarray, trace) -> dict:
    """Track labels through a training trace's densify/cleanup events.

    Returns removed-by-label totals, the per-cleanup removed labels, and the
    final label array (spawned Gaussians get the label 'densified')."""
    labels = np.asarray(labels, dtype=object).copy()
    removed_by_label: dict[str, int] = {}
    cleanup_log = []
    for event in trace.events:
        if event["kind"] == "densify":
            labels = np.concatenate([labels, np.array(["densified"] * event["spawned"],
                                                      dtype=object)])
            if event["removed"]:
                labels = np.delete(labels, np.asarray(event["removed"], dtype=np.int64))
        elif event["kind"] == "cleanup":
            removed_idx = np.asarray(event["removed"], dtype=np.int64)
            removed_labels = [str(labels[i]) for i in removed_idx]
            for tag in removed_labels:
                removed_by_label[tag] = removed_by_label.get(tag, 0) + 1
            cleanup_log.append({"step": event["step"], "labels": removed_labels})
            if removed_idx.size:
                labels = np.delete(labels, removed_idx)
    return {
        "removed_by_label": removed_by_label,
        "cleanups": cleanup_log,
        "final_labels": labels,
    }


def save_bundle(directory, labeled: LabeledScene) -> None:
    """Write the on-disk scene bundle the CLI consumes: PLY, camera JSON,
    target PNGs, silhouette masks, prior/uncertainty PFMs, labels JSON."""
    d = Path(directory)
    (d / "targets").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(exist_ok=True)
    scene = labeled.scene
    save_ply(scene.gaussians, d / "scene.ply")
    cams = []
    for cam in scene.cameras:
        cams.append({
            "id": cam.cam_id, "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
        })
    with open(d / "cameras.json", "w") as f:
        json.dump({"background": scene.background_color.tolist(), "cameras": cams},
                  f, indent=2, sort_keys=True)
    for cam, target in zip(scene.cameras, scene.targets):
        if target is not None:
            save_png(target, d / "targets" / f"{cam.cam_id}.png")
    for cam, mask in zip(scene.cameras, labeled.fg_masks):
        save_mask_png(mask, d / "masks" / f"{cam.cam_id}.png")
    if any(p is not None for p in scene.depth_priors):
        (d / "priors").mkdir(exist_ok=True)
        for cam, prior, w in zip(scene.cameras, scene.depth_priors, scene.uncertainty_maps):
            if prior is None:
                continue
            save_pfm(prior, d / "priors" / f"{cam.cam_id}_depth.pfm")
            if w is not None:
                save_pfm(w, d / "priors" / f"{cam.cam_id}_uncert.pfm")
    with open(d / "labels.json", "w") as f:
        json.dump({"labels": [str(x) for x in labeled.labels], "recipe": labeled.recipe},
                  f, indent=2, sort_keys=True)


def load_bundle(directory):
    """Read a bundle; returns (scene, labels, recipe, fg_masks). Labels and
    masks may be None for externally produced bundles."""
    d = Path(directory)
    cloud = load_ply(d / "scene.ply")
    with open(d / "cameras.json") as f:
        cam_data = json.load(f)
    cameras = [
        Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
               rotation=np.asarray(c["rotation"]), translation=np.asarray(c["translation"]),
               width=c["width"], height=c["height"], cam_id=c["id"])
        for c in cam_data["cameras"]
    ]
    targets = []
    masks = []
    priors = []
    uncerts = []
    for cam in cameras:
        tpath = d / "targets" / f"{cam.cam_id}.png"
        targets.append(load_png(tpath) if tpath.exists() else None)
        mpath = d / "masks" / f"{cam.cam_id}.png"
        masks.append(load_mask_png(mpath) if mpath.exists() else None)
        dpath = d / "priors" / f"{cam.cam_id}_depth.pfm"
        priors.append(load_pfm(dpath) if dpath.exists() else None)
        upath = d / "priors" / f"{cam.cam_id}_uncert.pfm"
        uncerts.append(load_pfm(upath) if upath.exists() else None)
    scene = Scene(gaussians=cloud, cameras=cameras, targets=targets,
                  depth_priors=priors, uncertainty_maps=uncerts,
                  background_color=np.asarray(cam_data.get("background", [0, 0, 0])))
    labels = None
    recipe = None
    lpath = d / "labels.json"
    if lpath.exists():
        with open(lpath) as f:
            data = json.load(f)
        labels = np.array(data["labels"], dtype=object)
        recipe = data.get("recipe")
    return scene, labels, recipe, masks


def make_offline_ledger(scene: Scene, min_age: int = 500,
                        visibility_threshold: float = 0.01) -> EvidenceLedger:
    """Evidence for a scene with no training history: visibility from one
    render per camera, zero gradient EMA, ages past the stabilization gate."""
    n = len(scene.gaussians)
    ledger = EvidenceLedger.zeros(n)
    ledger.age = np.full(n, min_age, dtype=np.int64)
    for cam in scene.cameras:
        out = render(scene, cam)
        ledger.visibility += (out.contributions >= visibility_threshold).astype(np.int64)
    return ledger
