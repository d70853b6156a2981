"""Evidence-driven floater suppression for 3D Gaussian splat scenes.

A numpy library covering: Gaussian scene types with 3DGS-compatible PLY I/O,
a differentiable splatting renderer, the per-Gaussian evidence ledger,
detail-aware floater pruning with adaptive caps, uncertainty-weighted
monocular-depth regularization, cleanliness metrics under camera jitter, a
desk-scale trainer, and labeled synthetic scenes for end-to-end validation.
"""

from .depth_reg import (CurriculumSchedule, DepthAlignment, align_scale_shift,
                        default_uncertainty, depth_loss, huber, huber_grad, robust_delta)
from .evidence import EvidenceLedger
from .metrics import (JitterSpec, MetricsReport, MetricUndefined, background_consistency,
                      depth_stability, evaluate_scene, psnr, silhouette_leakage, ssim)
from .model import Camera, Gaussian, GaussianCloud, Scene, covariance_scales, logit, sigmoid
from .neighbors import brute_force_knn, grid_knn, knn
from .ply import PlyFormatError, PlyParseError, load_ply, save_ply
from .pruning import (PruneConfig, PruneReport, apply_caps_and_remove, composite_score,
                      detail_guards, isolation_importance_grid, knn_isolation,
                      local_color_variance, pool_candidates, run_prune_pass,
                      sensitivity_sweep)
from .renderer import (GradBuffer, RenderOutput, project, render, render_backward,
                       visibility_hits)
from .synth import (BoxRecipe, LabeledScene, load_bundle, make_box_scene, make_depth_priors,
                    make_offline_ledger, replay_removals, save_bundle)
from .trainer import (AdamState, TrainConfig, TrainTrace, TrainingDiverged, densify,
                      load_checkpoint, photometric_loss, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BoxRecipe", "Camera", "CurriculumSchedule", "DepthAlignment",
    "EvidenceLedger", "Gaussian", "GaussianCloud", "GradBuffer", "JitterSpec",
    "LabeledScene", "MetricUndefined", "MetricsReport", "PlyFormatError", "PlyParseError",
    "PruneConfig", "PruneReport", "RenderOutput", "Scene", "TrainConfig", "TrainTrace",
    "TrainingDiverged", "align_scale_shift", "apply_caps_and_remove",
    "background_consistency", "brute_force_knn", "composite_score", "covariance_scales",
    "default_uncertainty", "densify", "depth_loss", "depth_stability", "detail_guards",
    "evaluate_scene", "grid_knn", "huber", "huber_grad", "isolation_importance_grid",
    "knn", "knn_isolation", "load_bundle", "load_checkpoint", "load_ply",
    "local_color_variance", "logit", "make_box_scene", "make_depth_priors",
    "make_offline_ledger", "photometric_loss", "pool_candidates", "project", "psnr",
    "render", "render_backward", "replay_removals", "robust_delta", "run_prune_pass",
    "save_bundle", "save_checkpoint", "save_ply", "sensitivity_sweep",
    "sigmoid", "silhouette_leakage", "ssim", "train", "visibility_hits",
]
