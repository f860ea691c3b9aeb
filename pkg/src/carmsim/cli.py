"""Command-line orchestration: simulate, calibrate, position, vtr, evaluate, all.

Batch-oriented, no interactive mode. Exit codes: 0 success, 1 pipeline
failure, 2 usage or config error. Reports embed the fully resolved config
and are byte-stable for a fixed seed (timing fields aside).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bodyfit, geometry, kernels, metrics, scenesim, temporal, triangulation, vtr
from .config import RunConfig, load_config
from .errors import (CarmsimError, ConfigError, InsufficientKeypoints,
                     InsufficientViews)
from .observation import (JointId, NoiseConfig, dump_observations,
                          load_observations, synth_detect)

log = logging.getLogger(__name__)

MARKER_FILE_VERSION = 1
SUCCESS_THRESHOLD_MM = 25.0


# ---------------------------------------------------------------- pipeline

def noise_from_config(cfg, seed):
    return NoiseConfig(pixel_sigma=cfg.noise.pixel_sigma,
                       dropout_prob=cfg.noise.dropout_prob,
                       outlier_prob=cfg.noise.outlier_prob,
                       outlier_magnitude=cfg.noise.outlier_magnitude,
                       seed=seed)


def marker_observations(scene, sigma, seed):
    """Synthetic marker pixel observations per camera for PnP calibration."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCA11]))
    doc = {"format_version": MARKER_FILE_VERSION, "cameras": {}}
    for cam in scene.cameras:
        pix = geometry.project(cam, scene.markers)
        pix = pix + rng.normal(0.0, sigma, size=pix.shape)
        k = cam.intrinsics
        doc["cameras"][cam.id] = {
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                           "image_width": k.image_width, "image_height": k.image_height},
            "correspondences": [
                {"point_room": p.tolist(), "pixel": q.tolist()}
                for p, q in zip(scene.markers, pix)
            ],
        }
    return doc


def calibrate_from_markers(doc, robust=True):
    """Recovered rig and per-camera reprojection RMS from a marker document."""
    if doc.get("format_version") != MARKER_FILE_VERSION:
        raise ConfigError(f"unsupported marker file version {doc.get('format_version')}")
    cameras, rms = [], {}
    for cid in sorted(doc["cameras"]):
        entry = doc["cameras"][cid]
        intr = geometry.Intrinsics(**entry["intrinsics"])
        corr = [geometry.Correspondence(point_room=c["point_room"], point_pixel=c["pixel"])
                for c in entry["correspondences"]]
        extr = geometry.solve_pnp(corr, intr, robust=robust)
        cam = geometry.CameraModel(id=cid, intrinsics=intr, extrinsics=extr)
        errs = [geometry.reprojection_error(cam, c.point_pixel, c.point_room) for c in corr]
        cameras.append(cam)
        rms[cid] = float(np.sqrt(np.mean(np.square(errs))))
    return cameras, rms


def run_positioning(cfg, outdir=None):
    """detect -> triangulate -> consolidate -> fit -> locate, per frame."""
    scene = scenesim.generate_scene(cfg.scene.seed, cfg.scene.preset)
    script = scenesim.preset_script(scene, cfg.n_frames)
    base_noise = noise_from_config(cfg, cfg.scene.seed)

    if cfg.use_calibrated_rig:
        markers_doc = marker_observations(scene, cfg.scene.marker_sigma, cfg.scene.seed)
        rig, rig_rms = calibrate_from_markers(markers_doc)
    else:
        markers_doc, rig, rig_rms = None, scene.cameras, {}
    cameras = {cam.id: cam for cam in rig}

    thresholds = temporal.ReliabilityThresholds(
        rho_min=cfg.temporal.rho_min, vis_min=cfg.temporal.vis_min,
        reproj_max=cfg.temporal.reproj_max, motion_min=cfg.temporal.motion_min)
    windows = {j: temporal.DriftWindow(j, window=cfg.temporal.window,
                                       stat_size=cfg.temporal.stat_size,
                                       alpha=cfg.temporal.alpha)
               for j in JointId}
    solver_kwargs = dict(huber_delta=cfg.triangulation.huber_delta,
                         max_iter=cfg.triangulation.max_iter,
                         cond_max=cfg.triangulation.cond_max)

    all_frames, raw_kps, cons_kps, body_rows, drift_rows = [], [], [], [], []
    frame_records = []
    warm = None
    failures = 0
    for t in range(cfg.n_frames):
        state = scenesim.resolve_script(script, t)
        noise = state.noise if state.noise is not None else base_noise
        gt = scenesim.ground_truth(scene, t, script)

        frames = {}
        for cam in scene.cameras:
            occluders = scenesim.scene_occluders(scene, cam.id, t, script)
            frames[cam.id] = synth_detect(gt.joints, cam, occluders, noise, timestep=t)
        all_frames.extend(frames.values())

        for joint in JointId:
            per_cam = {cid: f.observations[joint] for cid, f in frames.items()
                       if joint in f.observations}
            try:
                kp = triangulation.triangulate_joint(
                    per_cam, cameras, joint, t,
                    error_floor=cfg.triangulation.error_floor, **solver_kwargs)
            except InsufficientViews:
                continue
            raw_kps.append(kp)
            windows[joint].push(kp)

        consolidated = {}
        for joint, window in windows.items():
            if len(window) == 0:
                continue
            partition = None
            if len(window) >= 2 * window.stat_size:
                partition = temporal.detect_drift(window)
                if partition.drift_detected:
                    drift_rows.append({"t": t, "joint": joint.name,
                                       "marginal": partition.drift_marginal,
                                       "p": partition.p_values[partition.drift_marginal]})
            consolidated[joint] = temporal.consolidate(window, thresholds, partition)
        cons_kps.extend(consolidated.values())

        record = {"t": t, "n_keypoints": len(consolidated), "targets": {}}
        try:
            params = bodyfit.fit_body(consolidated, scene.template,
                                      score_floor=cfg.bodyfit.score_floor,
                                      reproj_max=cfg.temporal.reproj_max,
                                      max_iter=cfg.bodyfit.max_iter, initial=warm)
            warm = params
            body_rows.append({"t": t, "params": params.to_dict()})
            for name in cfg.targets:
                pred = bodyfit.locate_target(params, scene.template, bodyfit.TARGETS[name])
                truth = gt.targets[name]
                err = bodyfit.positioning_error(pred, truth)
                record["targets"][name] = {
                    "predicted": pred.tolist(), "ground_truth": truth.tolist(),
                    "error_mm": err, "success": bool(err < SUCCESS_THRESHOLD_MM)}
        except (InsufficientKeypoints, CarmsimError) as exc:
            failures += 1
            record["error"] = str(exc)
            log.warning("frame %d failed: %s", t, exc)
        frame_records.append(record)

    if failures == cfg.n_frames:
        raise CarmsimError("all frames failed")

    summary = {}
    for name in cfg.targets:
        errs = [r["targets"][name]["error_mm"] for r in frame_records if name in r["targets"]]
        if errs:
            summary[name] = {"mean_error_mm": float(np.mean(errs)),
                             "max_error_mm": float(np.max(errs)),
                             "final_error_mm": errs[-1],
                             "success_rate": float(np.mean(
                                 [e < SUCCESS_THRESHOLD_MM for e in errs]))}
    report = {"config": cfg.to_dict(), "rig_rms_px": rig_rms,
              "frames": frame_records, "summary": summary}

    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        scenesim.save_scene(os.path.join(outdir, "scene.json"), scene)
        geometry.save_rig(os.path.join(outdir, "rig.json"), rig)
        if markers_doc is not None:
            _write_json(os.path.join(outdir, "markers.json"), markers_doc)
        dump_observations(os.path.join(outdir, "observations.jsonl"), all_frames)
        _write_gt(os.path.join(outdir, "gt.jsonl"), scene, script, cfg.n_frames)
        triangulation.save_keypoints(os.path.join(outdir, "keypoints3d.jsonl"), raw_kps)
        triangulation.save_keypoints(os.path.join(outdir, "consolidated.jsonl"),
                                     cons_kps, consolidated=True)
        _write_jsonl(os.path.join(outdir, "drift_events.jsonl"), drift_rows)
        _write_jsonl(os.path.join(outdir, "bodyparams.jsonl"), body_rows)
        _write_json(os.path.join(outdir, "position_report.json"), report)
    return report


def run_vtr_command(cfg, outdir=None):
    scene = scenesim.generate_scene(cfg.scene.seed, cfg.scene.preset)
    if scene.isocenter is None:
        raise ConfigError(f"preset {cfg.scene.preset} has no scan isocenter")
    protocol = vtr.head_scan_protocol(scene.isocenter, n_steps=cfg.vtr.n_steps,
                                      span=cfg.vtr.span)
    grid = vtr.grid_for_isocenter(scene.isocenter, extent=cfg.vtr.extent,
                                  resolution=cfg.vtr.resolution)
    model = scene.carm if scene.carm is not None else vtr.CArmModel()
    vtr_config = vtr.VtrConfig(carm=model, grid=grid,
                               subtract_delta=cfg.vtr.subtract_delta,
                               stride=cfg.vtr.stride)
    report = vtr.run_vtr(scene, protocol, vtr_config)

    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        scenesim.save_scene(os.path.join(outdir, "scene.json"), scene)
        frames = [(cam, scenesim.render_depth(scene, cam)) for cam in scene.cameras]
        room = vtr.fuse_clouds(frames, stride=cfg.vtr.stride, crop=grid)
        parked = scene.carm_pose if scene.carm_pose is not None else protocol.steps[0]
        residual = vtr.subtract_carm(room, vtr.sample_carm(model, parked),
                                     delta=cfg.vtr.subtract_delta)
        vtr.save_ply(os.path.join(outdir, "vtr_residual.ply"), residual)
        vtr.save_report(os.path.join(outdir, "vtr_report.json"), report,
                        config_doc=cfg.to_dict())
        if cfg.vtr.snapshot:
            vtr.render_snapshot(os.path.join(outdir, "vtr_snapshot.png"),
                                residual, report, grid)
    return report


def _oracle_collision_cells(residual, model, protocol, grid):
    """Independent per-point voxel membership oracle (pure python floor math)."""
    origin = grid.origin
    cell = grid.cell_size
    res = grid.resolution

    def cells(points):
        out = set()
        for p in points:
            k = [int(np.floor((p[ax] - origin[ax]) / cell[ax])) for ax in range(3)]
            if all(0 <= k[ax] < res[ax] for ax in range(3)):
                out.add((k[0] * res[1] + k[1]) * res[2] + k[2])
        return out

    room_cells = cells(residual)
    hits = set()
    for step_i, pose in enumerate(protocol.steps):
        for c in cells(vtr.sample_carm(model, pose)) & room_cells:
            hits.add((step_i, c))
    return hits


def run_evaluation(run_dir, mm_per_px=None, outdir=None):
    """Metrics document from the artifacts of a previous run."""
    outdir = outdir or run_dir
    rows = {}

    scene_path = os.path.join(run_dir, "scene.json")
    if not os.path.exists(scene_path):
        raise FileNotFoundError(scene_path)
    scene = scenesim.load_scene(scene_path)
    cameras = scene.camera_map()

    obs_path = os.path.join(run_dir, "observations.jsonl")
    gt_path = os.path.join(run_dir, "gt.jsonl")
    if os.path.exists(obs_path) and os.path.exists(gt_path):
        gt_joints = {}
        with open(gt_path) as fh:
            for line in fh:
                rec = json.loads(line)
                gt_joints[rec["t"]] = np.array(rec["joints"])
        frames = load_observations(obs_path)
        preds, gts = [], []
        pck_pred, pck_gt, pck_mask = [], [], []
        for frame in frames:
            joints = gt_joints.get(frame.timestep)
            if joints is None:
                continue
            cam = cameras[frame.camera_id]
            exact = geometry.project(cam, joints)
            fp = np.zeros((len(JointId), 2))
            fm = np.zeros(len(JointId), dtype=bool)
            for joint, obs in frame.observations.items():
                preds.append(obs.pixel)
                gts.append(exact[joint])
                fp[joint] = obs.pixel
                fm[joint] = True
            pck_pred.append(fp)
            pck_gt.append(exact)
            pck_mask.append(fm)
        if preds:
            value = metrics.mpjpe_2d(preds, gts, mm_per_px=mm_per_px)
            if mm_per_px is None:
                rows["mpjpe_2d_px"] = value
            else:
                rows["mpjpe_2d_px"], rows["mpjpe_2d_mm"] = value
            for frac in (0.1, 0.15, 0.3):
                rows[f"pck_torso@{frac}"] = metrics.pck(
                    np.array(pck_pred), np.array(pck_gt), frac, np.array(pck_mask))

    pos_path = os.path.join(run_dir, "position_report.json")
    if os.path.exists(pos_path):
        with open(pos_path) as fh:
            pos = json.load(fh)
        for name, s in pos.get("summary", {}).items():
            rows[f"positioning/{name}/mean_error_mm"] = s["mean_error_mm"]
            rows[f"positioning/{name}/max_error_mm"] = s["max_error_mm"]
            rows[f"positioning/{name}/final_error_mm"] = s["final_error_mm"]
            rows[f"positioning/{name}/one_pass_success_rate"] = s["success_rate"]

    vtr_path = os.path.join(run_dir, "vtr_report.json")
    residual_path = os.path.join(run_dir, "vtr_residual.ply")
    if os.path.exists(vtr_path) and os.path.exists(residual_path):
        with open(vtr_path) as fh:
            vdoc = json.load(fh)
        vcfg = vdoc.get("config", RunConfig().to_dict())["vtr"]
        residual = vtr.load_ply(residual_path)
        model = scene.carm if scene.carm is not None else vtr.CArmModel()
        protocol = vtr.head_scan_protocol(scene.isocenter, n_steps=vcfg["n_steps"],
                                          span=vcfg["span"])
        grid = vtr.grid_for_isocenter(scene.isocenter, extent=tuple(vcfg["extent"]),
                                      resolution=tuple(vcfg["resolution"]))
        predicted = {(r["step"], r["voxel_index"]) for r in vdoc["regions"]}
        oracle = _oracle_collision_cells(residual, model, protocol, grid)
        rows["vtr/cdp_percent"] = metrics.cdp(predicted, oracle)
        rows["vtr/recall_percent"] = metrics.collision_recall(predicted, oracle)
        rows["vtr/trt_seconds"] = vdoc["elapsed_seconds"]
        rows["vtr/collided"] = vdoc["collided"]

    if not rows:
        raise CarmsimError(f"no evaluable artifacts in {run_dir}")
    doc = {"run_dir": run_dir, "metrics": rows}
    os.makedirs(outdir, exist_ok=True)
    _write_json(os.path.join(outdir, "metrics.json"), doc)
    metrics.write_metrics_csv(os.path.join(outdir, "metrics.csv"), rows)
    return doc


# ---------------------------------------------------------------- helpers

def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_gt(path, scene, script, n_frames):
    with open(path, "w") as fh:
        for t in range(n_frames):
            gt = scenesim.ground_truth(scene, t, script)
            fh.write(json.dumps({
                "t": t,
                "joints": gt.joints.tolist(),
                "targets": {k: v.tolist() for k, v in gt.targets.items()},
            }) + "\n")


def _simulate(cfg, outdir):
    scene = scenesim.generate_scene(cfg.scene.seed, cfg.scene.preset)
    script = scenesim.preset_script(scene, cfg.n_frames)
    noise = noise_from_config(cfg, cfg.scene.seed)
    os.makedirs(outdir, exist_ok=True)
    scenesim.save_scene(os.path.join(outdir, "scene.json"), scene)
    geometry.save_rig(os.path.join(outdir, "rig_gt.json"), scene.cameras)
    _write_json(os.path.join(outdir, "markers.json"),
                marker_observations(scene, cfg.scene.marker_sigma, cfg.scene.seed))
    frames = []
    for t in range(cfg.n_frames):
        state = scenesim.resolve_script(script, t)
        frame_noise = state.noise if state.noise is not None else noise
        gt = scenesim.ground_truth(scene, t, script)
        for cam in scene.cameras:
            occ = scenesim.scene_occluders(scene, cam.id, t, script)
            frames.append(synth_detect(gt.joints, cam, occ, frame_noise, timestep=t))
    dump_observations(os.path.join(outdir, "observations.jsonl"), frames)
    _write_gt(os.path.join(outdir, "gt.jsonl"), scene, script, cfg.n_frames)
    return 0


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    cfg = _config_from_args(args)
    return _simulate(cfg, args.outdir or cfg.output_dir)


def cmd_calibrate(args):
    if not os.path.exists(args.markers):
        print(f"error: marker observations file not found: {args.markers}",
              file=sys.stderr)
        return 2
    with open(args.markers) as fh:
        doc = json.load(fh)
    cameras, rms = calibrate_from_markers(doc, robust=not args.no_robust)
    geometry.save_rig(args.out, cameras)
    for cid in sorted(rms):
        print(f"{cid}: reprojection RMS {rms[cid]:.4g} px")
    print(f"rig written to {args.out}")
    return 0


def cmd_position(args):
    cfg = _config_from_args(args)
    outdir = args.outdir or cfg.output_dir
    report = run_positioning(cfg, outdir=outdir)
    for name, s in report["summary"].items():
        print(f"{name}: mean {s['mean_error_mm']:.2f} mm, final "
              f"{s['final_error_mm']:.2f} mm, success rate {s['success_rate']:.0%}")
    return 0


def cmd_vtr(args):
    cfg = _config_from_args(args)
    outdir = args.outdir or cfg.output_dir
    report = run_vtr_command(cfg, outdir=outdir)
    print(f"collided={report.collided} regions={len(report.regions)} "
          f"elapsed={report.elapsed:.3f}s")
    return 0


def cmd_evaluate(args):
    doc = run_evaluation(args.run, mm_per_px=args.mm_per_px, outdir=args.outdir)
    for key in sorted(doc["metrics"]):
        print(f"{key}: {doc['metrics'][key]}")
    return 0


def cmd_all(args):
    cfg = _config_from_args(args)
    outdir = args.outdir or cfg.output_dir
    _simulate(cfg, outdir)
    with open(os.path.join(outdir, "markers.json")) as fh:
        cameras, rms = calibrate_from_markers(json.load(fh))
    geometry.save_rig(os.path.join(outdir, "rig.json"), cameras)
    for cid in sorted(rms):
        print(f"{cid}: reprojection RMS {rms[cid]:.4g} px")
    run_positioning(cfg, outdir=outdir)
    vtr_cfg = cfg
    if not (cfg.scene.preset in scenesim.VTR_PRESETS):
        vtr_cfg = load_config(overrides=[("scene.preset", "clear-path"),
                                         ("scene.seed", cfg.scene.seed)])
    run_vtr_command(vtr_cfg, outdir=outdir)
    run_evaluation(outdir, outdir=outdir)
    print(f"artifacts in {outdir}")
    return 0


def _config_from_args(args):
    overrides = []
    if getattr(args, "preset", None):
        overrides.append(("scene.preset", args.preset))
    if getattr(args, "seed", None) is not None:
        overrides.append(("scene.seed", args.seed))
    if getattr(args, "frames", None):
        overrides.append(("n_frames", args.frames))
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides.append((key, json.loads(raw)))
    return load_config(args.config, overrides)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="carmsim",
        description="C-arm CBCT perception simulator: calibration, triangulation, "
                    "temporal consolidation, body fitting and virtual test runs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("-c", "--config", default=None, help="JSON config file")
        p.add_argument("--preset", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--frames", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=JSON",
                       help="dotted config override, e.g. vtr.n_steps=30")
        p.add_argument("-o", "--outdir", default=None)

    p = sub.add_parser("simulate", help="generate a scene and dump observations")
    add_common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("calibrate", help="solve camera extrinsics from marker observations")
    p.add_argument("--markers", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-robust", action="store_true")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("position", help="run the positioning pipeline")
    add_common(p)
    p.set_defaults(fn=cmd_position)

    p = sub.add_parser("vtr", help="run a virtual test run")
    add_common(p)
    p.set_defaults(fn=cmd_vtr)

    p = sub.add_parser("evaluate", help="compute metrics from run artifacts")
    p.add_argument("--run", required=True)
    p.add_argument("--mm-per-px", type=float, default=None)
    p.add_argument("-o", "--outdir", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("all", help="simulate + calibrate + position + vtr + evaluate")
    add_common(p)
    p.set_defaults(fn=cmd_all)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (
        logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    kernels.warmup()
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc}", file=sys.stderr)
        return 2
    except CarmsimError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
