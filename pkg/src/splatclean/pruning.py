"""Detail-aware floater pruning.

A cleanup pass runs three stages over the live Gaussians:

1. candidate pooling — flag Gaussians whose four running statistics all sit
   at or below conservative thresholds (visibility count, opacity, learned
   importance, center-gradient EMA); only age-stabilized Gaussians qualify;
2. detail guards — exempt candidates that look like real fine structure:
   high non-DC SH energy, high local color variance, wire-like thinness, or
   extreme anisotropy, with thresholds taken adaptively as percentiles of the
   non-candidate population;
3. isolation-ranked removal — keep only candidates whose mean k-nearest-
   neighbor distance exceeds a fraction of the scene extent, rank by a
   composite floater score, and greedily remove under per-cell and per-scene
   caps (floored, so under-removal is the failure mode).
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .evidence import EvidenceLedger
from .model import SH_C0, Scene, sigmoid
from .neighbors import knn


@dataclass
class PruneConfig:
    """Thresholds and caps for one cleanup pass.

    Candidate thresholds follow the published defaults (visibility 2.0,
    opacity 0.04, importance 0.35, gradient EMA 5e-4, k = 16, caps 1% per
    cell / 0.2% per scene). cap_grid_res = 4 suits desk-scale populations;
    million-splat scenes want 32.
    """

    max_visibility: float = 2.0
    max_opacity: float = 0.04
    max_importance: float = 0.35
    max_grad_ema: float = 5e-4
    k_neighbors: int = 16
    isolation_frac: float = 0.02       # of scene extent
    cell_cap_frac: float = 0.01
    scene_cap_frac: float = 0.002
    cap_grid_res: int = 4
    score_weights: tuple = (0.5, 0.25, 0.25)
    min_age: int = 500
    visibility_as_ratio: bool = False  # compare visibility/age instead of the raw count
    disable_detail_guards: bool = False
    sh_energy_pct: float = 70.0
    color_var_pct: float = 70.0
    thinness_pct: float = 10.0
    aniso_pct: float = 90.0

    def __post_init__(self):
        for name in ("max_visibility", "max_opacity", "max_importance", "max_grad_ema",
                     "isolation_frac"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("cell_cap_frac", "scene_cap_frac"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        w = np.asarray(self.score_weights, dtype=np.float64)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("score_weights must be 3 nonnegative values summing to 1")
        self.score_weights = tuple(float(x) for x in w)


@dataclass
class PruneReport:
    """Everything one pass decided, with enough detail to audit it."""

    base_candidates: np.ndarray
    guarded: np.ndarray
    guard_reasons: list
    prune_pool: np.ndarray
    pool_isolation: np.ndarray
    pool_scores: np.ndarray
    pool_dhat: np.ndarray
    pool_importance: np.ndarray
    removed: np.ndarray
    removed_scores: np.ndarray
    cell_population: dict = field(default_factory=dict)
    cell_removed: dict = field(default_factory=dict)
    guard_thresholds: dict = field(default_factory=dict)
    guards_degenerate: bool = False
    extent: float = 0.0
    total_count: int = 0

    def to_json_dict(self) -> dict:
        reasons_hist: dict[str, int] = {}
        for r in self.guard_reasons:
            reasons_hist[r] = reasons_hist.get(r, 0) + 1
        return {
            "total_count": self.total_count,
            "extent": self.extent,
            "base_candidates": [int(i) for i in self.base_candidates],
            "guarded": [int(i) for i in self.guarded],
            "guard_reasons": list(self.guard_reasons),
            "guard_reason_histogram": reasons_hist,
            "guard_thresholds": {k: float(v) for k, v in self.guard_thresholds.items()},
            "guards_degenerate": self.guards_degenerate,
            "prune_pool": [int(i) for i in self.prune_pool],
            "pool_isolation": [float(x) for x in self.pool_isolation],
            "pool_scores": [float(x) for x in self.pool_scores],
            "pool_dhat": [float(x) for x in self.pool_dhat],
            "pool_importance": [float(x) for x in self.pool_importance],
            "removed": [int(i) for i in self.removed],
            "removed_scores": [float(x) for x in self.removed_scores],
            "cell_population": {str(k): int(v) for k, v in self.cell_population.items()},
            "cell_removed": {str(k): int(v) for k, v in self.cell_removed.items()},
        }

    def summary(self) -> dict:
        return {
            "total": self.total_count,
            "candidates": int(len(self.base_candidates)),
            "guarded": int(len(self.guarded)),
            "pool": int(len(self.prune_pool)),
            "removed": int(len(self.removed)),
        }


def pool_candidates(cloud, ledger: EvidenceLedger, cfg: PruneConfig) -> np.ndarray:
    """Indices whose four evidence statistics all sit at or below threshold
    (closed comparisons); only age-stabilized Gaussians are considered."""
    if len(cloud) != len(ledger):
        raise ValueError(f"ledger length {len(ledger)} != Gaussian count {len(cloud)}")
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    if cfg.visibility_as_ratio:
        vis = ledger.visibility / np.maximum(ledger.age, 1)
    else:
        vis = ledger.visibility
    mask = (
        ledger.stabilization_gate(cfg.min_age)
        & (vis <= cfg.max_visibility)
        & (cloud.opacities <= cfg.max_opacity)
        & (cloud.importances <= cfg.max_importance)
        & (ledger.grad_ema <= cfg.max_grad_ema)
    )
    return np.flatnonzero(mask).astype(np.int64)


def knn_isolation(centers: np.ndarray, queries, k: int) -> np.ndarray:
    """Mean Euclidean distance from each query to its k nearest other points
    (all points form the reference set). Exact."""
    dists, _ = knn(centers, queries, k)
    return np.mean(dists, axis=1)


def detail_guards(cloud, candidates: np.ndarray, cfg: PruneConfig,
                  neighbor_colors_var: np.ndarray | None = None):
    """Split candidates into (guarded indices, reasons, thresholds, degenerate).

    A candidate is guarded when ANY of: non-DC SH energy >= adaptive high
    percentile; local color variance >= adaptive high percentile; smallest
    scale <= adaptive low percentile (wire-like); anisotropy >= adaptive high
    percentile. Thresholds come from the non-candidate population; with fewer
    than k non-candidates the guards are degenerate and everything is guarded
    (conservative).
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    n = len(cloud)
    empty = (np.zeros(0, dtype=np.int64), [], {}, False)
    if candidates.size == 0:
        return empty

    non_mask = np.ones(n, dtype=bool)
    non_mask[candidates] = False
    non_idx = np.flatnonzero(non_mask)
    if non_idx.size < cfg.k_neighbors:
        warnings.warn(
            "detail guards degenerate: fewer non-candidates than k; guarding every candidate"
        )
        return candidates.copy(), ["degenerate"] * candidates.size, {}, True

    sh_energy = cloud.sh_rest_energy()
    scales = cloud.sorted_scales()
    thin = scales[:, 0]
    aniso = scales[:, 2] / scales[:, 0]

    if neighbor_colors_var is None:
        neighbor_colors_var = local_color_variance(cloud, cfg.k_neighbors)

    thresholds = {
        "sh_energy": float(np.percentile(sh_energy[non_idx], cfg.sh_energy_pct)),
        "color_var": float(np.percentile(neighbor_colors_var[non_idx], cfg.color_var_pct)),
        "thinness": float(np.percentile(thin[non_idx], cfg.thinness_pct)),
        "aniso": float(np.percentile(aniso[non_idx], cfg.aniso_pct)),
    }

    # strict comparisons: when a non-candidate statistic is degenerate (zero
    # spread, threshold equal to the candidate's value) the guard carries no
    # information and must not fire, e.g. an isotropic population where every
    # anisotropy equals the 90th percentile exactly
    guarded = []
    reasons = []
    for i in candidates:
        if sh_energy[i] > thresholds["sh_energy"]:
            guarded.append(i); reasons.append("sh")
        elif neighbor_colors_var[i] > thresholds["color_var"]:
            guarded.append(i); reasons.append("variance")
        elif thin[i] < thresholds["thinness"]:
            guarded.append(i); reasons.append("thin")
        elif aniso[i] > thresholds["aniso"]:
            guarded.append(i); reasons.append("aniso")
    return np.asarray(guarded, dtype=np.int64), reasons, thresholds, False


def local_color_variance(cloud, k: int) -> np.ndarray:
    """Per-Gaussian total variance (trace over RGB) of the DC colors of its k
    nearest neighbors."""
    n = len(cloud)
    if n <= k:
        return np.zeros(n)
    _, nbrs = knn(cloud.centers, np.arange(n, dtype=np.int64), k)
    dc_rgb = 0.5 + SH_C0 * cloud.sh_dc
    neighbor_colors = dc_rgb[nbrs]                    # (N, k, 3)
    return np.sum(np.var(neighbor_colors, axis=1), axis=1)


def composite_score(isolation: np.ndarray, alpha: np.ndarray, importance: np.ndarray,
                    cfg: PruneConfig, extent: float):
    """Floater score: weighted sum of normalized isolation and the two weak
    evidence margins. Higher = more floater-like. Returns (scores, d_hat)."""
    iso_ref = cfg.isolation_frac * extent
    d_hat = np.minimum(np.asarray(isolation, dtype=np.float64) / max(iso_ref, 1e-12), 2.0) / 2.0
    w_iso, w_alpha, w_omega = cfg.score_weights
    scores = (
        w_iso * d_hat
        + w_alpha * (1.0 - np.asarray(alpha, dtype=np.float64) / cfg.max_opacity)
        + w_omega * (1.0 - np.asarray(importance, dtype=np.float64) / cfg.max_importance)
    )
    return scores, d_hat


def _cap_grid_cells(centers: np.ndarray, res: int) -> np.ndarray:
    lo = centers.min(axis=0)
    span = np.maximum(centers.max(axis=0) - lo, 1e-12)
    coords = np.clip(np.floor((centers - lo) / span * res).astype(np.int64), 0, res - 1)
    return (coords[:, 0] * res + coords[:, 1]) * res + coords[:, 2]


def apply_caps_and_remove(scene: Scene, ledger: EvidenceLedger,
                          pool: np.ndarray, scores: np.ndarray,
                          isolation: np.ndarray, cfg: PruneConfig,
                          report: PruneReport | None = None) -> PruneReport:
    """Isolation filter, score-descending greedy acceptance under floored
    per-cell and per-scene caps, then committed removal from scene + ledger.

    Ties in score break by ascending index so passes are deterministic.
    """
    cloud = scene.gaussians
    n = len(cloud)
    pool = np.asarray(pool, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    isolation = np.asarray(isolation, dtype=np.float64)
    extent = scene.extent()

    if report is None:
        _, d_hat = composite_score(isolation, cloud.opacities[pool],
                                   cloud.importances[pool], cfg, extent)
        report = PruneReport(
            base_candidates=pool.copy(), guarded=np.zeros(0, dtype=np.int64),
            guard_reasons=[], prune_pool=pool.copy(), pool_isolation=isolation.copy(),
            pool_scores=scores.copy(), pool_dhat=d_hat,
            pool_importance=cloud.importances[pool], removed=np.zeros(0, dtype=np.int64),
            removed_scores=np.zeros(0), extent=extent, total_count=n,
        )

    if n == 0 or pool.size == 0:
        report.removed = np.zeros(0, dtype=np.int64)
        report.removed_scores = np.zeros(0)
        return report

    eligible = isolation >= cfg.isolation_frac * extent
    elig_idx = pool[eligible]
    elig_scores = scores[eligible]

    cells = _cap_grid_cells(cloud.centers, cfg.cap_grid_res)
    cell_ids, counts = np.unique(cells, return_counts=True)
    population = dict(zip(cell_ids.tolist(), counts.tolist()))
    global_cap = int(np.floor(cfg.scene_cap_frac * n))
    cell_caps = {c: int(np.floor(cfg.cell_cap_frac * p)) for c, p in population.items()}

    order = np.lexsort((elig_idx, -elig_scores))  # score desc, index asc on ties
    accepted = []
    accepted_scores = []
    cell_taken: dict[int, int] = {}
    for oi in order:
        if len(accepted) >= global_cap:
            break
        gi = int(elig_idx[oi])
        cell = int(cells[gi])
        if cell_taken.get(cell, 0) + 1 > cell_caps[cell]:
            continue
        cell_taken[cell] = cell_taken.get(cell, 0) + 1
        accepted.append(gi)
        accepted_scores.append(float(elig_scores[oi]))

    removed = np.asarray(accepted, dtype=np.int64)
    report.removed = removed
    report.removed_scores = np.asarray(accepted_scores)
    report.cell_population = population
    report.cell_removed = cell_taken

    if removed.size:
        scene.gaussians = cloud.delete(removed)
        ledger.remove(removed)
    return report


def run_prune_pass(scene: Scene, ledger: EvidenceLedger, cfg: PruneConfig) -> PruneReport:
    """One full cleanup pass: pool, guard, isolate, score, cap, remove."""
    cloud = scene.gaussians
    n = len(cloud)
    extent = scene.extent()
    base = pool_candidates(cloud, ledger, cfg)

    if cfg.disable_detail_guards or base.size == 0:
        guarded = np.zeros(0, dtype=np.int64)
        reasons: list = []
        thresholds: dict = {}
        degenerate = False
    else:
        guarded, reasons, thresholds, degenerate = detail_guards(cloud, base, cfg)

    pool = np.setdiff1d(base, guarded)
    if pool.size:
        isolation = knn_isolation(cloud.centers, pool, cfg.k_neighbors)
        scores, d_hat = composite_score(isolation, cloud.opacities[pool],
                                        cloud.importances[pool], cfg, extent)
    else:
        isolation = np.zeros(0)
        scores = np.zeros(0)
        d_hat = np.zeros(0)

    report = PruneReport(
        base_candidates=base, guarded=guarded, guard_reasons=reasons,
        prune_pool=pool, pool_isolation=isolation, pool_scores=scores,
        pool_dhat=d_hat, pool_importance=cloud.importances[pool] if pool.size else np.zeros(0),
        removed=np.zeros(0, dtype=np.int64), removed_scores=np.zeros(0),
        guard_thresholds=thresholds, guards_degenerate=degenerate,
        extent=extent, total_count=n,
    )
    return apply_caps_and_remove(scene, ledger, pool, scores, isolation, cfg, report=report)


def isolation_importance_grid(report: PruneReport, bins: int = 5):
    """Bin pool members by (normalized isolation, importance); returns
    (removal_rate (bins, bins) with NaN for empty cells, counts)."""
    rate = np.full((bins, bins), np.nan)
    counts = np.zeros((bins, bins), dtype=np.int64)
    if report.prune_pool.size == 0:
        return rate, counts
    removed = set(int(i) for i in report.removed)
    d_bin = np.clip((report.pool_dhat * bins).astype(np.int64), 0, bins - 1)
    w_bin = np.clip((report.pool_importance / max(report.pool_importance.max(), 1e-12)
                     * bins).astype(np.int64), 0, bins - 1)
    hits = np.zeros((bins, bins), dtype=np.int64)
    for gi, db, wb in zip(report.prune_pool, d_bin, w_bin):
        counts[db, wb] += 1
        if int(gi) in removed:
            hits[db, wb] += 1
    nz = counts > 0
    rate[nz] = hits[nz] / counts[nz]
    return rate, counts


def sensitivity_sweep(scene: Scene, ledger: EvidenceLedger, labels,
                      cfg: PruneConfig, visibility_values, grad_ema_values,
                      passes: int = 6):
    """Replay `passes` cleanup passes for each threshold setting on copies of
    the given state; report per-setting floater recall and protected-label
    damage. One row per setting; the (max_visibility, max_grad_ema) default
    pair appears once."""
    labels = np.asarray(labels)
    settings = []
    for v in visibility_values:
        settings.append({"max_visibility": float(v), "max_grad_ema": cfg.max_grad_ema})
    for g in grad_ema_values:
        s = {"max_visibility": cfg.max_visibility, "max_grad_ema": float(g)}
        if s not in settings:
            settings.append(s)

    rows = []
    n_floaters = int(np.sum(labels == "floater"))
    for setting in settings:
        trial_cfg = replace(cfg, **setting)
        trial_scene = scene.copy()
        trial_ledger = copy.deepcopy(ledger)
        trial_labels = labels.copy()
        removed_by_label: dict[str, int] = {}
        for _ in range(passes):
            rep = run_prune_pass(trial_scene, trial_ledger, trial_cfg)
            for gi in rep.removed:
                tag = str(trial_labels[int(gi)])
                removed_by_label[tag] = removed_by_label.get(tag, 0) + 1
            if rep.removed.size:
                trial_labels = np.delete(trial_labels, rep.removed)
        recall = removed_by_label.get("floater", 0) / n_floaters if n_floaters else 0.0
        rows.append({
            "max_visibility": setting["max_visibility"],
            "max_grad_ema": setting["max_grad_ema"],
            "floater_recall": recall,
            "removed_by_label": removed_by_label,
            "total_removed": int(sum(removed_by_label.values())),
        })
    return rows
