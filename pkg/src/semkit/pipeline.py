"""Iterative epipolar coarse matching, the end-to-end forward pass, and losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from .attention import epipolar_cross_attention, self_cross_block
from .errors import EmptyGroundTruth, InputError, PipelineError
from .features import (FeatureMap, extract_features, fuse_scales, fuse_structured,
                       select_anchors, structured_field)
from .geometry import (CameraModel, EpipolarBand, RelativePose, epipolar_bands,
                       estimate_pose_from_points, grid_centers)
from .matching import (COARSE_STRIDE, MatchMatrix, MatchSet, dual_softmax, epipolar_rewrite,
                       extract_matches, mutual_nearest, refine_matches)
from .params import ParamStore

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
SIGMA2_FLOOR = 1e-6


@dataclass
class PipelineConfig:
    s0: float = 10.0
    n_anchors: int = 32
    sigma_h: float = 0.5
    theta: float = 0.2
    iterations: int = 4
    tau: float = 20.0
    seed: int = 0
    estimate_pose: bool = True
    ransac_iters: int = 500
    pose_threshold: float = 1.0     # Sampson distance, coarse cells
    window: int = 5
    heads: int = 1
    squared_fine_loss: bool = False

    def __post_init__(self):
        # sigma_h above 1 is allowed: it disables anchors and pose entirely
        if not self.s0 > 0:
            raise InputError("s0 must be positive")
        if self.n_anchors < 1:
            raise InputError("anchor count must be at least 1")
        if not self.sigma_h > 0:
            raise InputError("sigma_h must be positive")
        if not 0 < self.theta < 1:
            raise InputError("theta must lie in (0, 1)")
        if self.iterations < 1:
            raise InputError("at least one iteration is required")
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise InputError("fine window must be odd")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class Features(NamedTuple):
    """One view's descriptor pyramid."""
    coarse: FeatureMap   # 1/8
    top: FeatureMap      # 1/32
    fine: FeatureMap     # 1/2


@dataclass(eq=False)
class IterationTrace:
    matrices: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    anchor_counts: list = field(default_factory=list)
    band_validity: list = field(default_factory=list)
    pose_inliers: list = field(default_factory=list)

    def __len__(self):
        return len(self.matrices)


@dataclass(eq=False)
class ForwardResult:
    matches: MatchSet
    matrix: MatchMatrix
    trace: IterationTrace


def initialize_features(ref: Features, src: Features, params: ParamStore,
                        heads: int = 1) -> tuple[Features, Features]:
    """Initial self/cross attention on both scales, then one cross-scale fusion."""
    t_ref, t_src = self_cross_block(ref.top, src.top, params, "init32", "vanilla", heads=heads)
    c_ref, c_src = self_cross_block(ref.coarse, src.coarse, params, "init8", "linear", heads=heads)
    c_ref, t_ref = fuse_scales(c_ref, t_ref, params)
    c_src, t_src = fuse_scales(c_src, t_src, params)
    return Features(c_ref, t_ref, ref.fine), Features(c_src, t_src, src.fine)


def _pose_from_matrix(M: MatchMatrix, gcam_ref, gcam_src, cfg: PipelineConfig, seed: int):
    i, j = mutual_nearest(M.scores, cfg.sigma_h)
    if len(i) < 8:
        return None, 0
    W_ref, W_src = M.ref_dims[1], M.src_dims[1]
    pts_ref = np.column_stack([i % W_ref, i // W_ref]).astype(float)
    pts_src = np.column_stack([j % W_src, j // W_src]).astype(float)
    # threshold in coarse cells -> normalized coordinates
    thr = cfg.pose_threshold / np.sqrt(gcam_ref.fx * gcam_src.fx)
    try:
        pose, inl = estimate_pose_from_points(pts_ref, pts_src, gcam_ref, gcam_src, seed=seed,
                                              iterations=cfg.ransac_iters, threshold=thr)
    except (PipelineError, np.linalg.LinAlgError) as exc:
        log.debug("pose estimation failed: %s", exc)
        return None, 0
    return pose, int(inl.sum())


def _bands_for(pose, gcam_a, gcam_b, dims, s0) -> list[EpipolarBand]:
    H, W = dims
    if pose is None:
        return [EpipolarBand.invalid(s0)] * (H * W)
    return epipolar_bands(gcam_a, gcam_b, pose, grid_centers(W, H), s0)


def coarse_match(ref: Features, src: Features, cam_ref: CameraModel, cam_src: CameraModel,
                 cfg: PipelineConfig, params: ParamStore) -> tuple[MatchMatrix, IterationTrace]:
    """Iterate matching, structure fusion, pose-driven bands and band attention.

    ``ref``/``src`` must already have passed through ``initialize_features``.
    Iteration 1 matches globally; later iterations rewrite the matrix inside
    the bands built from the previous iteration's pose.
    """
    gcam_ref, gcam_src = cam_ref.grid(COARSE_STRIDE), cam_src.grid(COARSE_STRIDE)
    c_ref, t_ref = ref.coarse, ref.top
    c_src, t_src = src.coarse, src.top
    trace = IterationTrace()
    bands_ref = bands_src = None
    M = None
    for k in range(cfg.iterations):
        seed = cfg.seed + k
        t_ref, t_src = self_cross_block(t_ref, t_src, params, "iter32", "vanilla", heads=cfg.heads)

        if bands_ref is None:
            M = dual_softmax(c_ref, c_src, cfg.tau)
        else:
            M = epipolar_rewrite(M, c_ref, c_src, bands_ref, bands_src, cfg.tau)

        anchors = select_anchors(M, cfg.sigma_h, cfg.n_anchors, seed)
        if anchors.count:
            c_ref = fuse_structured(c_ref, structured_field(c_ref.dims, anchors.ref), params)
            c_src = fuse_structured(c_src, structured_field(c_src.dims, anchors.src), params)

        pose, n_inl = (None, 0)
        if cfg.estimate_pose:
            pose, n_inl = _pose_from_matrix(M, gcam_ref, gcam_src, cfg, seed)
        bands_ref = _bands_for(pose, gcam_ref, gcam_src, c_ref.dims, cfg.s0)
        bands_src = _bands_for(pose.inverse() if pose is not None else None,
                               gcam_src, gcam_ref, c_src.dims, cfg.s0)

        new_ref = epipolar_cross_attention(c_ref, c_src, bands_ref, params, heads=cfg.heads)
        new_src = epipolar_cross_attention(c_src, c_ref, bands_src, params, heads=cfg.heads)
        c_ref, t_ref = fuse_scales(new_ref, t_ref, params)
        c_src, t_src = fuse_scales(new_src, t_src, params)

        valid = np.mean([b.valid for b in bands_ref] + [b.valid for b in bands_src])
        trace.matrices.append(M)
        trace.poses.append(pose)
        trace.anchor_counts.append(anchors.count)
        trace.band_validity.append(float(valid))
        trace.pose_inliers.append(n_inl)
        log.debug("iteration %d: anchors=%d pose=%s bands=%.2f", k + 1, anchors.count,
                  pose is not None, valid)
    return M, trace


def as_features(x, params: ParamStore) -> Features:
    if isinstance(x, Features):
        return x
    if isinstance(x, FeatureMap):
        raise InputError("a single feature map is not enough; pass a Features pyramid")
    return Features(*extract_features(x, params))


def run_pipeline(img_ref, img_src, cam_ref: CameraModel, cam_src: CameraModel,
                 cfg: PipelineConfig, params: ParamStore) -> ForwardResult:
    """Extract (or accept) features, match coarsely, extract MNN pairs, refine."""
    ref = as_features(img_ref, params)
    src = as_features(img_src, params)
    ref, src = initialize_features(ref, src, params, cfg.heads)
    M, trace = coarse_match(ref, src, cam_ref, cam_src, cfg, params)
    matches = extract_matches(M, cfg.theta)
    matches = refine_matches(matches, ref.fine, src.fine, cfg.window, cfg.tau)
    return ForwardResult(matches, M, trace)


def sem_forward(img_ref, img_src, cam_ref: CameraModel, cam_src: CameraModel,
                cfg: PipelineConfig, params: ParamStore) -> MatchSet:
    return run_pipeline(img_ref, img_src, cam_ref, cam_src, cfg, params).matches


# ---------------------------------------------------------------------------
# Scoring and losses


def cell_precision_recall(pred: set, gt: set) -> tuple[float, float]:
    """Precision and recall of predicted cell pairs; empty predictions score 0."""
    hit = len(pred & gt)
    precision = hit / len(pred) if pred else 0.0
    recall = hit / len(gt) if gt else 0.0
    return precision, recall


def trace_precision(trace: IterationTrace, gt: set, theta: float) -> list[float]:
    return [cell_precision_recall(extract_matches(M, theta).pairs(), gt)[0] for M in trace.matrices]


def _gt_index(gt, shape):
    pairs = np.array(sorted(gt), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyGroundTruth("coarse loss needs at least one ground-truth pair")
    if (pairs < 0).any() or (pairs[:, 0] >= shape[0]).any() or (pairs[:, 1] >= shape[1]).any():
        raise InputError("ground-truth pair outside the match matrix")
    return pairs[:, 0], pairs[:, 1]


def coarse_loss(trace: IterationTrace | Sequence, gt) -> float:
    """Sum over iterations of the mean negative log score at ground-truth pairs."""
    mats = trace.matrices if isinstance(trace, IterationTrace) else list(trace)
    total = 0.0
    for M in mats:
        scores = M.scores if isinstance(M, MatchMatrix) else np.asarray(M)
        i, j = _gt_index(gt, scores.shape)
        total += -np.mean(np.log(np.maximum(scores[i, j], LOG_FLOOR)))
    return float(total)


def dual_softmax_scores(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    e_r = np.exp(S - S.max(axis=1, keepdims=True))
    e_c = np.exp(S - S.max(axis=0, keepdims=True))
    return (e_r / e_r.sum(axis=1, keepdims=True)) * (e_c / e_c.sum(axis=0, keepdims=True))


def coarse_loss_grad(S, gt) -> np.ndarray:
    """Analytic d(coarse_loss)/dS for one iterate built by dual softmax of ``S``.

    With log M(a,b) = 2 S(a,b) - lse(S(a,:)) - lse(S(:,b)), each pair
    contributes -(2 E_ab - e_a P_row(a,:) - P_col(:,b) e_b) / |gt|.
    """
    S = np.asarray(S, dtype=float)
    a, b = _gt_index(gt, S.shape)
    e_r = np.exp(S - S.max(axis=1, keepdims=True))
    p_row = e_r / e_r.sum(axis=1, keepdims=True)
    e_c = np.exp(S - S.max(axis=0, keepdims=True))
    p_col = e_c / e_c.sum(axis=0, keepdims=True)
    g = np.zeros_like(S)
    for i, j in zip(a, b):
        g[i, j] += 2.0
        g[i, :] -= p_row[i]
        g[:, j] -= p_col[:, j]
    return -g / len(a)


def fine_loss(matches: MatchSet, gt_fine: dict, squared: bool = False) -> float:
    """Variance-weighted distance between refined and true source points.

    Averages over matches whose reference cell has a ground-truth target.
    """
    keep = [k for k, i in enumerate(matches.ref_idx.tolist()) if i in gt_fine]
    if not keep:
        raise EmptyGroundTruth("no match has a fine ground-truth target")
    pred = matches.src_refined[keep]
    target = np.array([gt_fine[int(matches.ref_idx[k])] for k in keep], dtype=float)
    return fine_loss_arrays(pred, target, matches.sigma2[keep], squared)


def fine_loss_arrays(pred, target, sigma2, squared: bool = False) -> float:
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    target = np.asarray(target, dtype=float).reshape(-1, 2)
    if len(pred) == 0:
        raise EmptyGroundTruth("fine loss needs at least one ground-truth match")
    d = np.linalg.norm(pred - target, axis=1)
    if squared:
        d = d * d
    w = 1.0 / np.maximum(np.asarray(sigma2, dtype=float), SIGMA2_FLOOR)
    return float(np.mean(w * d))


def total_loss(coarse: float, fine: float) -> float:
    return coarse + fine
