"""Command-line entry points: synth | train | prune | eval | report.

Every command resolves its configuration (JSON file -> flag overrides ->
defaults), writes the resolved snapshot plus a manifest of produced artifacts
into the run directory, and exits 0/1/2 for ok / user error / internal error.
Errors are also emitted as one JSON object on stderr for machine consumption.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .depth_reg import CurriculumSchedule
from .evidence import EvidenceLedger
from .metrics import JitterSpec, evaluate_scene
from .model import Scene
from .ply import load_ply, save_ply
from .pruning import PruneConfig, run_prune_pass, sensitivity_sweep
from .synth import (BoxRecipe, load_bundle, make_box_scene, make_depth_priors,
                    make_offline_ledger, replay_removals, save_bundle)
from .trainer import TrainConfig, TrainTrace, save_checkpoint, train


class UserError(ValueError):
    """Bad input from the operator: missing files, malformed config."""


def _dataclass_from_dict(cls, data: dict, context: str):
    """Build a dataclass instance rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise UserError(f"unknown key(s) {sorted(unknown)} in {context}; allowed: {sorted(known)}")
    return cls(**data)


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file not found: {p}")
    try:
        with open(p) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise UserError(f"config {p} is not valid JSON: {e}") from None


def _resolve_section(config: dict, section: str, allowed: set) -> dict:
    data = config.get(section, {})
    if not isinstance(data, dict):
        raise UserError(f"config section '{section}' must be an object")
    unknown = set(config) - allowed
    if unknown:
        raise UserError(f"unknown config section(s) {sorted(unknown)}; allowed: {sorted(allowed)}")
    return dict(data)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_artifacts(out_dir: Path, command: str, resolved: dict):
    with open(out_dir / "config.resolved.json", "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out_dir))] = _sha256(p)
    with open(out_dir / "manifest.json", "w") as f:
        json.dump({"command": command, "files": files}, f, indent=2, sort_keys=True)


def _svg_line_plot(series: list, title: str, path: Path, width=640, height=320):
    """Deterministic minimal SVG line plot; series = [(name, xs, ys, color)]."""
    pad = 42
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif">{title}</text>',
    ]
    all_x = [x for _, xs, _, _ in series for x in xs]
    all_y = [y for _, _, ys, _ in series for y in ys if np.isfinite(y)]
    if all_x and all_y:
        x0, x1 = min(all_x), max(all_x)
        y0, y1 = min(all_y), max(all_y)
        if x1 == x0:
            x1 = x0 + 1
        if y1 == y0:
            y1 = y0 + 1

        def sx(x):
            return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

        def sy(y):
            return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

        lines.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
                     f'y2="{height - pad}" stroke="black"/>')
        lines.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
        lines.append(f'<text x="{pad}" y="{height - pad + 16}" font-size="10" '
                     f'font-family="sans-serif">{x0:g}</text>')
        lines.append(f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="end" '
                     f'font-size="10" font-family="sans-serif">{x1:g}</text>')
        lines.append(f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{y0:.4g}</text>')
        lines.append(f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{y1:.4g}</text>')
        for li, (name, xs, ys, color) in enumerate(series):
            pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if np.isfinite(y))
            lines.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>')
            lines.append(f'<text x="{width - pad}" y="{pad + 14 * li + 10}" text-anchor="end" '
                         f'font-size="11" font-family="sans-serif" fill="{color}">{name}</text>')
    lines.append("</svg>")
    path.write_text("\n".join(lines))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = _load_config(args.config)
    section = _resolve_section(config, "synth", {"synth"})
    priors = bool(section.pop("priors", True))
    prior_seed = int(section.pop("prior_seed", 0))
    edge_noise = float(section.pop("edge_noise", 0.0))
    for flag in ("seed", "surface_count", "floater_count", "thin_count", "glint_count",
                 "camera_count", "image_size", "near_cluster_count"):
        value = getattr(args, flag, None)
        if value is not None:
            section[flag] = value
    if args.cameras_outside:
        section["cameras_inside"] = False
        section.setdefault("camera_distance", 3.2)
    recipe = _dataclass_from_dict(BoxRecipe, section, "synth")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labeled = make_box_scene(recipe)
    if priors:
        make_depth_priors(labeled, edge_noise=edge_noise, seed=prior_seed)
    save_bundle(out, labeled)
    resolved = {"synth": {**recipe.to_dict(), "priors": priors,
                          "prior_seed": prior_seed, "edge_noise": edge_noise}}
    _write_run_artifacts(out, "synth", resolved)
    print(f"wrote scene bundle with {len(labeled.scene.gaussians)} Gaussians to {out}")
    return 0


def _build_train_config(section: dict, args) -> TrainConfig:
    prune_data = section.pop("prune", {})
    sched_data = section.pop("depth_schedule", {})
    for flag in ("steps", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            section[flag] = value
    cfg = _dataclass_from_dict(TrainConfig, section, "train")
    cfg.prune = _dataclass_from_dict(PruneConfig, prune_data, "train.prune")
    cfg.depth_schedule = _dataclass_from_dict(CurriculumSchedule, sched_data, "train.depth_schedule")
    return cfg


def cmd_train(args) -> int:
    scene_dir = Path(args.scene)
    if not scene_dir.exists():
        raise UserError(f"scene bundle not found: {scene_dir}")
    config = _load_config(args.config)
    section = _resolve_section(config, "train", {"train"})
    cfg = _build_train_config(section, args)

    scene, labels, _, _ = load_bundle(scene_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ledger = EvidenceLedger.zeros(len(scene.gaussians))

    def snapshot(snap_scene: Scene, snap_ledger, step):
        d = out / "precleanup"
        d.mkdir(exist_ok=True)
        save_ply(snap_scene.gaussians, d / "gaussians.ply")
        snap_ledger.save(d / "evidence.bin")
        with open(d / "step.json", "w") as f:
            json.dump({"step": step}, f)

    scene, trace = train(scene, cfg, ledger=ledger, on_precleanup=snapshot)
    save_checkpoint(out, scene, ledger, trace)
    if labels is not None:
        with open(out / "label_replay.json", "w") as f:
            replay = replay_removals(labels, trace)
            json.dump({"removed_by_label": replay["removed_by_label"],
                       "cleanups": replay["cleanups"]}, f, indent=2, sort_keys=True)

    resolved = {"train": _config_dict(cfg)}
    _write_run_artifacts(out, "train", resolved)
    final = trace.records[-1] if trace.records else {}
    print(f"trained {cfg.steps} steps; final count {len(scene.gaussians)}"
          + (f", holdout PSNR {final.get('psnr_holdout'):.2f} dB" if final.get("psnr_holdout") else ""))
    return 0


def _config_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _config_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_config_dict(x) for x in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_prune(args) -> int:
    in_path = Path(args.input)
    if not in_path.exists():
        raise UserError(f"input PLY not found: {in_path}")
    config = _load_config(args.config)
    section = _resolve_section(config, "prune", {"prune"})
    passes = int(section.pop("passes", 1))
    import_importance = float(section.pop("import_importance", 0.5))
    cfg = _dataclass_from_dict(PruneConfig, section, "prune")

    cloud = load_ply(in_path, default_importance=import_importance)
    offline = args.evidence is None
    cameras = []
    background = np.zeros(3)
    if args.cameras:
        bundle_scene, _, _, _ = load_bundle(Path(args.cameras))
        cameras = bundle_scene.cameras
        background = bundle_scene.background_color
    scene = Scene(gaussians=cloud, cameras=cameras, background_color=background)

    if offline:
        if not cameras:
            raise UserError("offline prune (no --evidence sidecar) needs --cameras to "
                            "synthesize visibility")
        ledger = make_offline_ledger(scene, min_age=cfg.min_age)
    else:
        ledger = EvidenceLedger.load(args.evidence)
        if len(ledger) != len(cloud):
            raise UserError(f"evidence sidecar holds {len(ledger)} records for "
                            f"{len(cloud)} Gaussians")

    reports = []
    for _ in range(passes):
        reports.append(run_prune_pass(scene, ledger, cfg))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_ply(scene.gaussians, out_path)

    report_doc = {
        "offline_mode": offline,
        "offline_note": ("visibility synthesized from one render per camera; gradient EMA "
                         "fixed at 0, so that clause is vacuous and the effective policy is "
                         "opacity + visibility + importance + isolation") if offline else None,
        "input_count": int(len(cloud)),
        "passes": [r.to_json_dict() for r in reports],
        "total_removed": int(sum(len(r.removed) for r in reports)),
        "output_count": int(len(scene.gaussians)),
    }
    report_path = Path(args.report) if args.report else out_path.with_suffix(".report.json")
    with open(report_path, "w") as f:
        json.dump(report_doc, f, sort_keys=True)
    resolved = {"prune": {**_config_dict(cfg), "passes": passes,
                          "import_importance": import_importance}}
    run_dir = out_path.parent
    _write_run_artifacts(run_dir, "prune", resolved)
    print(f"removed {report_doc['total_removed']} of "
          f"{report_doc['total_removed'] + len(scene.gaussians)} Gaussians"
          + (" (offline mode)" if offline else ""))
    return 0


def cmd_eval(args) -> int:
    scene_dir = Path(args.scene)
    if not scene_dir.exists():
        raise UserError(f"scene bundle not found: {scene_dir}")
    config = _load_config(args.config)
    section = _resolve_section(config, "eval", {"eval"})
    jitter_data = section.pop("jitter", {})
    leak_threshold = float(section.pop("leak_threshold", 0.05))
    depth_tolerance = section.pop("depth_tolerance", None)
    sweep_cfg = section.pop("sweep", {})
    if section:
        raise UserError(f"unknown key(s) {sorted(section)} in eval config")

    scene, labels, _, masks = load_bundle(scene_dir)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        ply_path = ckpt / "gaussians.ply" if ckpt.is_dir() else ckpt
        if not ply_path.exists():
            raise UserError(f"checkpoint not found: {ply_path}")
        scene.gaussians = load_ply(ply_path)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    jitter = (_dataclass_from_dict(JitterSpec, jitter_data, "eval.jitter") if jitter_data
              else JitterSpec(sigma_translation=0.0025 * max(scene.extent(), 1e-6)))
    report = evaluate_scene(scene, jitter=jitter, fg_masks=masks, static_masks=masks,
                            depth_tolerance=depth_tolerance)
    with open(out / "metrics.json", "w") as f:
        json.dump(report.to_json_dict(), f, sort_keys=True)
    with open(out / "metrics.csv", "w") as f:
        f.write("view,psnr,ssim\n")
        for i, (p, s) in enumerate(zip(report.psnr_per_view, report.ssim_per_view)):
            f.write(f"{i},{p},{s}\n")
    print(report.to_text())

    trace_path = Path(args.checkpoint or scene_dir) / "trace.json"
    if args.checkpoint and trace_path.exists():
        trace = TrainTrace.load(trace_path)
        steps = [r["step"] for r in trace.records]
        _svg_line_plot(
            [("holdout PSNR (dB)", steps, [r["psnr_holdout"] for r in trace.records], "#1f77b4")],
            "photometric quality over training", out / "trace_psnr.svg")
        _svg_line_plot(
            [("total loss", steps, [r["loss"] for r in trace.records], "#d62728")],
            "training loss", out / "trace_loss.svg")
        _svg_line_plot(
            [("Gaussian count", steps, [r["count"] for r in trace.records], "#2ca02c"),
             ("cumulative pruned", steps,
              list(np.cumsum([r["pruned"] for r in trace.records])), "#d62728")],
            "population dynamics", out / "trace_population.svg")

    if sweep_cfg:
        if labels is None:
            raise UserError("threshold sweep needs a labeled bundle")
        snap_dir = Path(args.checkpoint or "") / "precleanup"
        if not snap_dir.exists():
            raise UserError(f"threshold sweep needs the training pre-cleanup snapshot at {snap_dir}")
        snap_cloud = load_ply(snap_dir / "gaussians.ply")
        snap_ledger = EvidenceLedger.load(snap_dir / "evidence.bin")
        snap_scene = Scene(gaussians=snap_cloud, cameras=scene.cameras,
                           background_color=scene.background_color)
        # labels at snapshot time: replay densify events up to the snapshot step
        trace = TrainTrace.load(Path(args.checkpoint) / "trace.json")
        with open(snap_dir / "step.json") as f:
            snap_step = json.load(f)["step"]
        pre_trace = TrainTrace(records=[], events=[e for e in trace.events
                                                   if e["step"] < snap_step
                                                   or (e["step"] == snap_step and e["kind"] == "densify")])
        snap_labels = replay_removals(labels, pre_trace)["final_labels"]
        prune_cfg = _dataclass_from_dict(PruneConfig, sweep_cfg.get("prune", {}), "eval.sweep.prune")
        rows = sensitivity_sweep(
            snap_scene, snap_ledger, snap_labels, prune_cfg,
            visibility_values=sweep_cfg.get("visibility", [1.0, 2.0, 3.0]),
            grad_ema_values=sweep_cfg.get("grad_ema", [1e-4, 5e-4, 1e-3]),
            passes=int(sweep_cfg.get("passes", 6)),
        )
        with open(out / "sensitivity.json", "w") as f:
            json.dump(rows, f, sort_keys=True)
        with open(out / "sensitivity.csv", "w") as f:
            f.write("max_visibility,max_grad_ema,floater_recall,total_removed\n")
            for r in rows:
                f.write(f"{r['max_visibility']},{r['max_grad_ema']},"
                        f"{r['floater_recall']},{r['total_removed']}\n")
        print("\nthreshold sensitivity (floater recall):")
        for r in rows:
            print(f"  vis<={r['max_visibility']:<4g} grad<={r['max_grad_ema']:<8g} "
                  f"recall={r['floater_recall']:.3f} removed={r['total_removed']}")

    resolved = {"eval": {"jitter": jitter.to_dict(), "leak_threshold": leak_threshold,
                         "depth_tolerance": depth_tolerance, "sweep": sweep_cfg}}
    _write_run_artifacts(out, "eval", resolved)
    return 0


def cmd_report(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise UserError(f"report file not found: {path}")
    with open(path) as f:
        data = json.load(f)

    if "passes" in data:  # prune report
        print(f"prune report ({'offline' if data.get('offline_mode') else 'training'} mode)")
        if data.get("offline_note"):
            print(f"  note: {data['offline_note']}")
        for i, p in enumerate(data["passes"]):
            hist = p.get("guard_reason_histogram", {})
            used = {k: v for k, v in p.get("cell_removed", {}).items()}
            print(f"  pass {i}: total={p['total_count']} candidates={len(p['base_candidates'])} "
                  f"guarded={len(p['guarded'])} pool={len(p['prune_pool'])} "
                  f"removed={len(p['removed'])}")
            if hist:
                print(f"    guard reasons: {json.dumps(hist, sort_keys=True)}")
            if used:
                cap_cells = len(used)
                print(f"    cap utilization: removals spread over {cap_cells} cells")
        print(f"  total removed: {data['total_removed']} -> {data['output_count']} remain")
    elif "records" in data:  # training trace
        records = data["records"]
        print(f"training trace: {len(records)} steps")
        if records:
            first, last = records[0], records[-1]
            print(f"  loss {first['loss']:.5f} -> {last['loss']:.5f}")
            print(f"  count {first['count']} -> {last['count']}")
            cleanups = [e for e in data["events"] if e["kind"] == "cleanup"]
            print(f"  cleanup passes: {[e['step'] for e in cleanups]}")
            print(f"  total pruned: {sum(len(e['removed']) for e in cleanups)}")
    elif "psnr_mean" in data:  # metrics report
        width = 30
        for key in ("psnr_mean", "ssim_mean", "silhouette_leakage", "depth_stability",
                    "background_consistency"):
            print(f"{key.ljust(width)} {data.get(key)}")
    else:
        raise UserError(f"{path} is not a recognized report format")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatclean",
        description="Evidence-driven floater pruning for Gaussian splat scenes",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap (execution is single-threaded and deterministic; "
                             "the flag is accepted for interface stability)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic scene bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--surface-count", dest="surface_count", type=int)
    p.add_argument("--floater-count", dest="floater_count", type=int)
    p.add_argument("--thin-count", dest="thin_count", type=int)
    p.add_argument("--glint-count", dest="glint_count", type=int)
    p.add_argument("--camera-count", dest="camera_count", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--near-cluster", dest="near_cluster_count", type=int)
    p.add_argument("--cameras-outside", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a scene bundle with periodic cleanup")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="clean a splat PLY (offline mode without a sidecar)")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--evidence", help="evidence sidecar from training")
    p.add_argument("--cameras", help="bundle directory providing cameras for offline visibility")
    p.add_argument("--config")
    p.add_argument("--report")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="metrics report, trace plots, optional threshold sweep")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="pretty-print a JSON report")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UserError as e:
        json.dump({"error": {"type": "user", "message": str(e)}}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports anything
        json.dump({"error": {"type": "internal", "message": f"{type(e).__name__}: {e}"}},
                  sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
