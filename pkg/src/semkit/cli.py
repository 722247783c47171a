"""``sem`` command line: match, synth, eval, viz.

Exit codes: 0 success, 2 bad input (missing or malformed files, invalid
flags), 3 pipeline failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import InputError, PipelineError
from .features import FeatureMap
from .geometry import (CameraModel, RelativePose, band_mask, epipolar_bands, estimate_pose_from_points,
                       load_camera, load_pose, pose_error, save_camera, save_pose)
from .matching import (COARSE_STRIDE, pixel_to_cell, read_matches_tsv,
                       write_matches_tsv, write_matchset_tsv)
from .params import ParamStore, init_params
from .pipeline import Features, PipelineConfig, cell_precision_recall, run_pipeline
from .synthetic import Scene, generate_scene, ground_truth_matches, render_feature_maps

log = logging.getLogger("semkit")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE = 0, 2, 3
AUC_THRESHOLDS = (5.0, 10.0, 20.0)

# flag name -> PipelineConfig field
FLAG_FIELDS = {"s0": "s0", "anchors": "n_anchors", "sigma_h": "sigma_h", "theta": "theta",
               "iters": "iterations", "tau": "tau", "seed": "seed"}


# ---------------------------------------------------------------------------
# Flat key=value configuration


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"config line {lineno}: empty key")
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def dump_config_text(cfg: dict) -> str:
    lines = []
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"


def resolve_config(args, file_cfg: dict | None = None, env=None) -> PipelineConfig:
    """Merge defaults < SEM_SEED < config file < explicit flags."""
    env = os.environ if env is None else env
    known = {f.name for f in fields(PipelineConfig)}
    values = {}
    if env.get("SEM_SEED"):
        try:
            values["seed"] = int(env["SEM_SEED"])
        except ValueError:
            raise InputError(f"SEM_SEED must be an integer, got {env['SEM_SEED']!r}") from None
    for key, value in (file_cfg or {}).items():
        name = FLAG_FIELDS.get(key, key)
        if name not in known:
            raise InputError(f"unknown config key {key!r}")
        values[name] = value
    for flag, name in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise InputError(str(exc)) from exc


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SEM_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"SEM_SEED must be an integer, got {env!r}") from None
    return 0


# ---------------------------------------------------------------------------
# Inputs


_SEMF_NAME = re.compile(r"^(?P<stem>.*)_(?P<scale>2|8|32)\.semf$")


def load_view(path):
    """An image (``.npy`` or anything Pillow reads) or a SEMF feature pyramid.

    A ``stem_<scale>.semf`` path loads the sibling ``stem_{2,8,32}.semf``
    files.  Returns ``(input, background, (H, W))``.
    """
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such file")
    m = _SEMF_NAME.match(p.name)
    if p.suffix == ".semf":
        if not m:
            raise InputError(f"{p}: feature files must be named <stem>_<2|8|32>.semf")
        maps = {}
        for s in (2, 8, 32):
            q = p.with_name(f"{m['stem']}_{s}.semf")
            if not q.exists():
                raise InputError(f"{q}: missing feature scale {s}")
            fm = FeatureMap.load(q)
            if fm.scale != s:
                raise InputError(f"{q}: header scale {fm.scale} does not match the file name")
            maps[s] = fm
        feats = Features(maps[8], maps[32], maps[2])
        size = (maps[8].height * 8, maps[8].width * 8)
        return feats, maps[8].data, size
    if p.suffix == ".npy":
        img = np.load(p, allow_pickle=False)
    else:
        from PIL import Image, UnidentifiedImageError
        try:
            with Image.open(p) as im:
                img = np.asarray(im.convert("L"), dtype=float) / 255.0
        except UnidentifiedImageError as exc:
            raise InputError(f"{p}: unreadable image") from exc
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise InputError(f"{p}: expected a 2-D grayscale image, got shape {img.shape}")
    return img, img, img.shape


def _load_params(path, channels: int) -> ParamStore:
    if path:
        return ParamStore.load(path)
    return init_params(channels=channels, seed=0)


def _channels(x) -> int:
    return x.coarse.channels if isinstance(x, Features) else 32


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pose_dict(pose):
    return None if pose is None else pose.to_dict()


# ---------------------------------------------------------------------------
# match


def cmd_match(args) -> int:
    from .plotting import iteration_figure, match_figure

    file_cfg = parse_config_text(Path(args.config).read_text()) if args.config else None
    cfg = resolve_config(args, file_cfg)
    cam_ref = load_camera(args.cam_ref)
    cam_src = load_camera(args.cam_src)
    ref, bg_ref, size_ref = load_view(args.ref)
    src, bg_src, size_src = load_view(args.src)
    for cam, size, name in ((cam_ref, size_ref, "reference"), (cam_src, size_src, "source")):
        if (cam.height, cam.width) != tuple(size):
            raise InputError(f"{name} camera is {cam.height}x{cam.width} but the input is "
                             f"{size[0]}x{size[1]}")
    gt_pose, gt_pairs = None, None
    if args.scene:
        scene = Scene.load(args.scene)
        gt_pose, gt_pairs = scene.pose, ground_truth_matches(scene).pairs()
    if args.gt_pose:
        gt_pose = load_pose(args.gt_pose)
    params = _load_params(args.params, _channels(ref))

    result = run_pipeline(ref, src, cam_ref, cam_src, cfg, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matchset_tsv(out / "matches.tsv", result.matches)

    rows = []
    for k, M in enumerate(result.trace.matrices):
        pose = result.trace.poses[k]
        row = {"iteration": k + 1, "pose": _pose_dict(pose),
               "anchors": result.trace.anchor_counts[k],
               "pose_inliers": result.trace.pose_inliers[k],
               "band_validity_pct": 100.0 * result.trace.band_validity[k],
               "rot_err_deg": None, "trans_err_deg": None, "gt_precision": None}
        if gt_pose is not None and pose is not None:
            row["rot_err_deg"], row["trans_err_deg"] = pose_error(pose, gt_pose)
        if gt_pairs is not None:
            from .matching import extract_matches
            row["gt_precision"] = cell_precision_recall(extract_matches(M, cfg.theta).pairs(), gt_pairs)[0]
        rows.append(row)
    report = {"config": cfg.to_dict(), "iterations": rows, "match_count": len(result.matches),
              "matches_tsv": "matches.tsv", "figures": ["matches.svg", "iterations.svg"]}
    if gt_pairs is not None:
        p, r = cell_precision_recall(result.matches.pairs(), gt_pairs)
        report["gt_precision"], report["gt_recall"] = p, r
    _write_json(out / "report.json", report)
    (out / "config.txt").write_text(dump_config_text(cfg.to_dict()))

    match_figure(out / "matches.svg", _background(bg_ref), _background(bg_src), size_ref, size_src,
                 result.matches.ref_pixels(), result.matches.src_refined, result.matches.confidence,
                 title=f"{len(result.matches)} matches")
    iteration_figure(out / "iterations.svg", rows)
    print(f"{len(result.matches)} matches -> {out / 'matches.tsv'}")
    return EXIT_OK


def _background(arr):
    from .plotting import panel_background
    return panel_background(arr)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    seed = _seed(args)
    scene = generate_scene(args.points, args.baseline, args.rotation, seed,
                           image_size=args.size, channels=args.channels,
                           repeat_fraction=args.repeat, textureless_fraction=args.textureless)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    save_camera(scene.cam_ref, out / "cam_ref.json")
    save_camera(scene.cam_src, out / "cam_src.json")
    save_pose(scene.pose, out / "pose.json")
    maps = render_feature_maps(scene, noise=args.noise, empty_noise=args.noise, seed=seed)
    for scale, (fr, fs) in maps.items():
        fr.save(out / f"ref_{scale}.semf")
        fs.save(out / f"src_{scale}.semf")
    np.save(out / "ref.npy", scene.images[0])
    np.save(out / "src.npy", scene.images[1])
    gt = ground_truth_matches(scene)
    # exact projections in both views; their containing cells are the GT cell pairs
    write_matches_tsv(out / "gt.tsv", gt.ref_px, gt.src_px, np.ones(len(gt)), np.zeros(len(gt)))
    print(f"scene with {len(scene.points)} points, {len(gt)} ground-truth pairs -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def tsv_cell_pairs(cols: dict, ref_dims, src_dims, stride: int = COARSE_STRIDE) -> set:
    """Coarse ``(ref_cell, src_cell)`` flat-index pairs of a match table."""
    rc = pixel_to_cell(np.column_stack([cols["ref_x"], cols["ref_y"]]), stride).reshape(-1, 2)
    sc = pixel_to_cell(np.column_stack([cols["src_x"], cols["src_y"]]), stride).reshape(-1, 2)
    ok = ((rc >= 0) & (rc < [ref_dims[1], ref_dims[0]])).all(1) & \
         ((sc >= 0) & (sc < [src_dims[1], src_dims[0]])).all(1)
    ri = rc[ok, 1] * ref_dims[1] + rc[ok, 0]
    si = sc[ok, 1] * src_dims[1] + sc[ok, 0]
    return set(zip(ri.tolist(), si.tolist()))


def pose_auc(errors, thresholds=AUC_THRESHOLDS) -> dict:
    """Area under the cumulative pose-error curve up to each threshold, in [0, 1]."""
    errs = np.sort(np.asarray(errors, dtype=float))
    n = len(errs)
    out = {}
    for t in thresholds:
        if n == 0:
            out[f"auc@{t:g}"] = 0.0
            continue
        x = np.concatenate([[0.0], errs])
        y = np.concatenate([[0.0], np.arange(1, n + 1) / n])
        last = np.searchsorted(x, t)
        xs = np.concatenate([x[:last], [t]])
        ys = np.concatenate([y[:last], [y[last - 1]]])
        area = np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0)
        out[f"auc@{t:g}"] = float(area / t)
    return out


def evaluate_pair(pred: dict, gt: dict, cam_ref: CameraModel, cam_src: CameraModel,
                  pose: RelativePose | None, seed: int, threshold_px: float = 1.0) -> dict:
    ref_dims = (cam_ref.height // COARSE_STRIDE, cam_ref.width // COARSE_STRIDE)
    src_dims = (cam_src.height // COARSE_STRIDE, cam_src.width // COARSE_STRIDE)
    pred_pairs = tsv_cell_pairs(pred, ref_dims, src_dims)
    gt_pairs = tsv_cell_pairs(gt, ref_dims, src_dims)
    n_pred = len(pred["ref_x"])
    precision, recall = cell_precision_recall(pred_pairs, gt_pairs)
    res = {"n_pred": n_pred, "n_gt": len(gt_pairs), "precision": precision, "recall": recall,
           "empty_predictions": n_pred == 0, "rot_err_deg": None, "trans_err_deg": None,
           "pose_failed": None}
    if pose is not None:
        res["pose_failed"] = True
        if n_pred >= 8:
            a = np.column_stack([pred["ref_x"], pred["ref_y"]])
            b = np.column_stack([pred["src_x"], pred["src_y"]])
            thr = threshold_px / np.sqrt(cam_ref.fx * cam_src.fx)
            try:
                est, _ = estimate_pose_from_points(a, b, cam_ref, cam_src, seed=seed, threshold=thr)
                res["rot_err_deg"], res["trans_err_deg"] = pose_error(est, pose)
                res["pose_failed"] = False
            except (PipelineError, np.linalg.LinAlgError) as exc:
                log.debug("pose estimation failed: %s", exc)
    return res


def _broadcast(paths, n, name):
    if not paths:
        return [None] * n
    if len(paths) == 1:
        return paths * n
    if len(paths) != n:
        raise InputError(f"--{name} takes 1 or {n} files, got {len(paths)}")
    return paths


def cmd_eval(args) -> int:
    seed = _seed(args)
    if len(args.pred) != len(args.gt):
        raise InputError(f"{len(args.pred)} prediction files but {len(args.gt)} ground-truth files")
    n = len(args.pred)
    cams_ref = _broadcast(args.cam_ref, n, "cam-ref")
    cams_src = _broadcast(args.cam_src, n, "cam-src")
    poses = _broadcast(args.pose, n, "pose")
    if cams_ref[0] is None or cams_src[0] is None:
        raise InputError("--cam-ref and --cam-src are required")
    scenes = []
    for k in range(n):
        pred, gt = read_matches_tsv(args.pred[k]), read_matches_tsv(args.gt[k])
        pose = load_pose(poses[k]) if poses[k] else None
        r = evaluate_pair(pred, gt, load_camera(cams_ref[k]), load_camera(cams_src[k]), pose,
                          seed, args.pose_threshold)
        r["pred"], r["gt"] = Path(args.pred[k]).name, Path(args.gt[k]).name
        scenes.append(r)
    metrics = {"scenes": scenes,
               "precision": float(np.mean([s["precision"] for s in scenes])),
               "recall": float(np.mean([s["recall"] for s in scenes])),
               "empty_predictions": sum(s["empty_predictions"] for s in scenes)}
    if all(s["pose_failed"] is not None for s in scenes):
        # failures count as maximal error
        errs = [180.0 if s["pose_failed"] else max(s["rot_err_deg"], s["trans_err_deg"])
                for s in scenes]
        metrics.update(pose_auc(errs))
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# viz


def band_cells(cam_ref: CameraModel, cam_src: CameraModel, pose: RelativePose, query_px, s0: float,
               stride: int = COARSE_STRIDE) -> list[int]:
    """Flat source cells inside the band of the reference cell holding ``query_px``."""
    g_ref, g_src = cam_ref.grid(stride), cam_src.grid(stride)
    cell = pixel_to_cell(np.asarray(query_px, dtype=float).reshape(1, 2), stride)
    band = epipolar_bands(g_ref, g_src, pose, cell.astype(float), s0)[0]
    mask = band_mask(band, cam_src.width // stride, cam_src.height // stride)
    return np.flatnonzero(mask.ravel()).tolist()


def _parse_point(text: str):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"band point must be 'x,y', got {text!r}") from None
    return x, y


def cmd_viz(args) -> int:
    from .plotting import match_figure

    _, bg_ref, size_ref = load_view(args.ref)
    _, bg_src, size_src = load_view(args.src)
    cols = read_matches_tsv(args.matches)
    n = len(cols["ref_x"])
    conf = cols.get("confidence", np.ones(n))
    bands = {}
    if args.band_point:
        if not (args.cam_ref and args.cam_src and args.pose):
            raise InputError("band overlays need --cam-ref, --cam-src and --pose")
        cam_ref, cam_src, pose = load_camera(args.cam_ref), load_camera(args.cam_src), load_pose(args.pose)
        s0 = 10.0 if args.s0 is None else args.s0
        W = cam_src.width // COARSE_STRIDE
        for q, text in enumerate(args.band_point):
            pt = _parse_point(text)
            rects = [(c, (c % W) * COARSE_STRIDE - 0.5, (c // W) * COARSE_STRIDE - 0.5, COARSE_STRIDE)
                     for c in band_cells(cam_ref, cam_src, pose, pt, s0)]
            bands[q] = (pt, rects)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    match_figure(out / "matches.svg", _background(bg_ref), _background(bg_src), size_ref, size_src,
                 np.column_stack([cols["ref_x"], cols["ref_y"]]),
                 np.column_stack([cols["src_x"], cols["src_y"]]), conf, bands=bands,
                 title=f"{n} matches")
    print(f"{n} matches -> {out / 'matches.svg'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _pipeline_flags(p):
    p.add_argument("--s0", type=float, help="band half-width in coarse cells (default 10)")
    p.add_argument("--anchors", type=int, help="maximum anchor count (default 32)")
    p.add_argument("--sigma-h", dest="sigma_h", type=float,
                   help="anchor and pose confidence threshold (default 0.5)")
    p.add_argument("--theta", type=float, help="match extraction threshold (default 0.2)")
    p.add_argument("--iters", type=int, help="coarse matching iterations (default 4)")
    p.add_argument("--tau", type=float, help="similarity temperature (default 20)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sem", description="Structured epipolar matching toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    m = sub.add_parser("match", help="match two views, write matches.tsv, report.json and figures")
    m.add_argument("ref", help="reference image (.npy/.png/...) or <stem>_<scale>.semf")
    m.add_argument("src", help="source image or feature file")
    m.add_argument("--cam-ref", required=True)
    m.add_argument("--cam-src", required=True)
    m.add_argument("--scene", help="scene JSON for ground-truth pose and cells in the report")
    m.add_argument("--gt-pose", help="ground-truth pose JSON")
    m.add_argument("--params", help="SEMP parameter file (default: seeded initialization)")
    m.add_argument("--config", help="key=value config file; flags override it")
    _pipeline_flags(m)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_match)

    s = sub.add_parser("synth", help="generate a synthetic two-view scene")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--baseline", type=float, default=0.5)
    s.add_argument("--rotation", type=float, default=10.0, help="degrees")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--channels", type=int, default=32)
    s.add_argument("--repeat", type=float, default=0.0, help="fraction of repeated descriptors")
    s.add_argument("--textureless", type=float, default=0.0, help="fraction of zero-contrast points")
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score predicted matches against ground truth")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--gt", nargs="+", required=True)
    e.add_argument("--cam-ref", nargs="+")
    e.add_argument("--cam-src", nargs="+")
    e.add_argument("--pose", nargs="+", help="ground-truth pose JSON per pair")
    e.add_argument("--pose-threshold", type=float, default=1.0, help="RANSAC threshold, pixels")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="draw matches (and optional bands) as SVG")
    v.add_argument("ref")
    v.add_argument("src")
    v.add_argument("matches")
    v.add_argument("--band-point", action="append", help="reference pixel 'x,y'; repeatable")
    v.add_argument("--cam-ref")
    v.add_argument("--cam-src")
    v.add_argument("--pose")
    v.add_argument("--s0", type=float)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, OSError, ValueError) as exc:
        print(f"sem {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"sem {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
