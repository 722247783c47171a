"""Two-view geometry: cameras, epipolar lines and bands, relative pose.

Pixel coordinates are ``(x, y) = (column, row)`` with integer values at
pixel centers.  Homogeneous points are ``(x, y, z)`` and dehomogenize to
``(x / z, y / z)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateLine,
    FormatError,
    InputError,
    InsufficientMatches,
)

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 8 or self.height < 8:
            raise InputError(f"image must be at least 8x8, got {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def grid(self, stride: int) -> "CameraModel":
        """Camera expressed in units of a ``stride``-pixel cell grid.

        Cell ``c`` covers pixels ``stride*c .. stride*c + stride - 1`` and its
        center sits at integer grid coordinate ``c``.
        """
        off = (stride - 1) / 2.0
        return CameraModel(
            fx=self.fx / stride, fy=self.fy / stride,
            cx=(self.cx - off) / stride, cy=(self.cy - off) / stride,
            width=max(self.width // stride, 8), height=max(self.height // stride, 8),
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"camera record is missing or has bad fields: {exc}") from exc

    @classmethod
    def identity(cls, width: int = 8, height: int = 8) -> "CameraModel":
        return cls(1.0, 1.0, 0.0, 0.0, width, height)


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Maps reference-camera coordinates to source-camera coordinates,
    ``X_src = R @ X_ref + T``.

    ``T`` is a unit direction; the all-zero translation is tolerated for
    pure-rotation inputs, where no epipolar constraint exists.
    """
    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        T = np.asarray(self.T, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(T)):
            raise InputError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InputError("R is not a proper rotation")
        n = np.linalg.norm(T)
        if n != 0.0 and abs(n - 1.0) > _ORTHO_TOL:
            raise InputError(f"T must be unit length (or zero), got norm {n}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @classmethod
    def from_motion(cls, R, t) -> "RelativePose":
        """Build a pose from a metric translation by normalizing it."""
        t = np.asarray(t, dtype=float).reshape(3)
        n = np.linalg.norm(t)
        return cls(R, t / n if n > 0 else t)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RelativePose":
        return RelativePose(self.R.T, -self.R.T @ self.T)

    def to_dict(self) -> dict:
        return {"R": [float(v) for v in self.R.ravel()], "T": [float(v) for v in self.T]}

    @classmethod
    def from_dict(cls, d: dict) -> "RelativePose":
        try:
            R = np.asarray(d["R"], dtype=float)
            T = np.asarray(d["T"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"pose record is missing or has bad fields: {exc}") from exc
        if R.size != 9 or T.size != 3:
            raise FormatError("pose record needs a 9-element R and a 3-element T")
        return cls.from_motion(R.reshape(3, 3), T)


@dataclass(frozen=True, eq=False)
class EpipolarBand:
    line: np.ndarray
    tolerance: float
    valid: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InputError("band tolerance must be positive")

    @classmethod
    def invalid(cls, tolerance: float) -> "EpipolarBand":
        return cls(np.zeros(3), tolerance, valid=False)

    def distance(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        a, b, c = self.line
        return np.abs(a * pts[..., 0] + b * pts[..., 1] + c)


@dataclass(frozen=True)
class Correspondence:
    ref_pt: tuple
    src_pt: tuple
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError(f"confidence must lie in [0, 1], got {self.confidence}")


def load_camera(path) -> CameraModel:
    try:
        with open(path) as fh:
            return CameraModel.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


def save_camera(cam: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2, sort_keys=True) + "\n")


def load_pose(path) -> RelativePose:
    try:
        with open(path) as fh:
            return RelativePose.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


def save_pose(pose: RelativePose, path) -> None:
    Path(path).write_text(json.dumps(pose.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Projection and epipolar lines


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_about(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle_deg`` degrees."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    th = math.radians(angle_deg)
    Kx = skew(axis)
    return np.eye(3) + math.sin(th) * Kx + (1.0 - math.cos(th)) * (Kx @ Kx)


def project_point(cam_ref: CameraModel, cam_src: CameraModel, pose: RelativePose, pixel) -> np.ndarray:
    """Homogeneous source-image point of the ray through ``pixel`` at unit depth."""
    x, y = pixel
    ray = cam_ref.K_inv @ np.array([x, y, 1.0])
    return cam_src.K @ (pose.R @ ray + pose.T)


def epipole(cam_src: CameraModel, pose: RelativePose) -> np.ndarray:
    """Homogeneous image of the reference optical center in the source view."""
    return cam_src.K @ pose.T


def fundamental_matrix(cam_ref: CameraModel, cam_src: CameraModel, pose: RelativePose) -> np.ndarray:
    return cam_src.K_inv.T @ skew(pose.T) @ pose.R @ cam_ref.K_inv


def _lines(cam_ref, cam_src, pose, pixels):
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    hom = np.column_stack([pixels, np.ones(len(pixels))])
    e = epipole(cam_src, pose)
    p = (cam_src.K @ (pose.R @ (cam_ref.K_inv @ hom.T) + pose.T[:, None])).T
    lines = np.cross(e, p)
    ab = np.hypot(lines[:, 0], lines[:, 1])
    scale = np.linalg.norm(e) * np.linalg.norm(p, axis=1)
    ok = ab > 1e-12 * np.maximum(scale, 1e-300)
    lines[ok] /= ab[ok, None]
    lines[~ok] = 0.0
    return lines, ok


def epipolar_line(cam_ref: CameraModel, cam_src: CameraModel, pose: RelativePose,
                  pixel, tolerance: float) -> EpipolarBand:
    """Band around the source-image epipolar line of a reference pixel.

    Raises DegenerateLine when the pixel maps onto the epipole (or the
    pose has no translation); callers should then use
    ``EpipolarBand.invalid``.
    """
    lines, ok = _lines(cam_ref, cam_src, pose, [pixel])
    if not ok[0]:
        raise DegenerateLine(f"pixel {tuple(pixel)} has no epipolar line under this pose")
    return EpipolarBand(lines[0], float(tolerance), True)


def epipolar_bands(cam_ref: CameraModel, cam_src: CameraModel, pose: RelativePose,
                   pixels, tolerance: float) -> list[EpipolarBand]:
    """Vectorized ``epipolar_line`` with degenerate pixels mapped to invalid bands."""
    lines, ok = _lines(cam_ref, cam_src, pose, pixels)
    return [EpipolarBand(l, float(tolerance), bool(v)) if v else EpipolarBand.invalid(tolerance)
            for l, v in zip(lines, ok)]


def grid_centers(grid_w: int, grid_h: int) -> np.ndarray:
    """Row-major ``(x, y)`` centers of a ``grid_h x grid_w`` cell grid."""
    ys, xs = np.mgrid[0:grid_h, 0:grid_w]
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(float)


def band_mask(band: EpipolarBand, grid_w: int, grid_h: int) -> np.ndarray:
    """Boolean ``(grid_h, grid_w)`` grid of cells whose centers lie inside the band."""
    if not band.valid:
        return np.ones((grid_h, grid_w), dtype=bool)
    ys, xs = np.mgrid[0:grid_h, 0:grid_w]
    a, b, c = band.line
    return np.abs(a * xs + b * ys + c) <= band.tolerance


def band_masks(bands: Sequence[EpipolarBand], grid_w: int, grid_h: int) -> np.ndarray:
    """Stack of flattened band masks, shape ``(len(bands), grid_h * grid_w)``."""
    if not bands:
        return np.zeros((0, grid_w * grid_h), dtype=bool)
    lines = np.array([b.line for b in bands])
    tol = np.array([b.tolerance for b in bands])
    valid = np.array([b.valid for b in bands])
    centers = grid_centers(grid_w, grid_h)
    dist = np.abs(lines[:, :2] @ centers.T + lines[:, 2:3])
    masks = dist <= tol[:, None]
    masks[~valid] = True
    return masks


# ---------------------------------------------------------------------------
# Relative pose from matches


def _hartley(pts):
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _eight_point(x1, x2, weights=None):
    """Essential matrix from >= 8 normalized-coordinate correspondences."""
    T1, T2 = _hartley(x1), _hartley(x2)
    h1 = np.column_stack([x1, np.ones(len(x1))]) @ T1.T
    h2 = np.column_stack([x2, np.ones(len(x2))]) @ T2.T
    # x2^T E x1 = 0, row-major vec(E)
    A = (h2[:, :, None] * h1[:, None, :]).reshape(len(x1), 9)
    if weights is not None:
        A = A * weights[:, None]
    _, _, Vt = np.linalg.svd(A)
    E = T2.T @ Vt[-1].reshape(3, 3) @ T1
    # essential spectrum only holds after undoing the conditioning transform
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def _sampson_parts(E, x1, x2):
    h1 = np.column_stack([x1, np.ones(len(x1))])
    h2 = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = h1 @ E.T
    Etx2 = h2 @ E
    r = np.sum(h2 * Ex1, axis=1)
    den = np.maximum(Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2, 1e-300)
    return np.abs(r) / np.sqrt(den), den


def sampson_distance(E, x1, x2) -> np.ndarray:
    """First-order geometric distance of each pair to the epipolar constraint."""
    return _sampson_parts(E, x1, x2)[0]


def triangulate(R, t, x1, x2) -> np.ndarray:
    """Linear triangulation of normalized points, returned in the reference frame."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    out = np.empty((len(x1), 3))
    for k, ((u1, v1), (u2, v2)) in enumerate(zip(x1, x2)):
        A = np.stack([u1 * P1[2] - P1[0], v1 * P1[2] - P1[1],
                      u2 * P2[2] - P2[0], v2 * P2[2] - P2[1]])
        X = np.linalg.svd(A)[2][-1]
        out[k] = X[:3] / X[3] if X[3] != 0 else np.full(3, np.nan)
    return out


def decompose_essential(E) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    Ra, Rb = U @ W @ Vt, U @ W.T @ Vt
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def _cheirality(E, x1, x2):
    best, best_count = None, -1
    for R, t in decompose_essential(E):
        X = triangulate(R, t, x1, x2)
        z1 = X[:, 2]
        z2 = (X @ R.T + t)[:, 2]
        count = int(np.sum((z1 > 0) & (z2 > 0)))
        if count > best_count:
            best, best_count = (R, t), count
    if best_count * 2 <= len(x1):
        raise DegenerateConfiguration("no pose candidate places a majority of points in front of both cameras")
    return best


LMEDS_SAMPLES = 50
LMEDS_KEEP = 0.95


def _trimmed_refit(E, x1, x2, threshold):
    """Alternate MAD trimming and Sampson-weighted 8-point refits from ``E``.

    Trimming starts from the given model, before any least-squares refit; a
    single near-threshold outlier can otherwise tilt the weakly constrained
    translation direction while keeping every residual small.
    """
    d = sampson_distance(E, x1, x2)
    inl = d <= threshold
    if inl.sum() < 8:
        return E, inl
    for _ in range(10):
        sigma = 1.4826 * np.median(d[inl])
        new = d <= min(threshold, max(3.0 * sigma, 1e-12))
        if new.sum() < 8:
            new = inl
        inl = new
        _, den = _sampson_parts(E, x1[inl], x2[inl])
        try:
            E = _eight_point(x1[inl], x2[inl], 1.0 / np.sqrt(den))
        except np.linalg.LinAlgError:
            break
        d = sampson_distance(E, x1, x2)
        if np.array_equal(d <= min(threshold, max(3.0 * 1.4826 * np.median(d[inl]), 1e-12)), inl):
            break
    return E, inl


def estimate_pose_from_points(pts_ref, pts_src, cam_ref: CameraModel, cam_src: CameraModel,
                              seed: int = 0, iterations: int = 500,
                              threshold: float = 1e-3) -> tuple[RelativePose, np.ndarray]:
    """Robust essential-matrix pose from pixel correspondences.

    ``threshold`` is a Sampson distance in normalized camera coordinates.
    Returns the pose and the inlier mask.
    """
    pts_ref = np.asarray(pts_ref, dtype=float).reshape(-1, 2)
    pts_src = np.asarray(pts_src, dtype=float).reshape(-1, 2)
    n = len(pts_ref)
    if n < 8:
        raise InsufficientMatches(f"need at least 8 matches, got {n}")
    x1 = (np.column_stack([pts_ref, np.ones(n)]) @ cam_ref.K_inv.T)[:, :2]
    x2 = (np.column_stack([pts_src, np.ones(n)]) @ cam_src.K_inv.T)[:, :2]

    rng = np.random.default_rng(seed)
    thr2 = threshold * threshold
    best_E, best_cost, best_count = None, np.inf, 0
    needed, it = (iterations if n > 8 else 1), 0
    while it < needed:
        it += 1
        idx = rng.choice(n, 8, replace=False)
        try:
            E = _eight_point(x1[idx], x2[idx])
        except np.linalg.LinAlgError:
            continue
        d = sampson_distance(E, x1, x2)
        # truncated quadratic cost: ties in inlier count go to the tighter model
        cost = np.minimum(d * d, thr2).sum()
        if cost < best_cost:
            best_E, best_cost = E, cost
            # local optimization: minimal models from noisy points are poor, so
            # each new best is also refit on its consensus and rescored
            E_lo, _ = _trimmed_refit(E, x1, x2, threshold)
            d_lo = sampson_distance(E_lo, x1, x2)
            cost_lo = np.minimum(d_lo * d_lo, thr2).sum()
            if cost_lo < best_cost:
                best_E, best_cost, d = E_lo, cost_lo, d_lo
            best_count = int((d <= threshold).sum())
            w = best_count / n
            if w >= 1.0:
                break
            # standard adaptive stopping at 99.9% confidence
            needed = min(needed, int(np.ceil(np.log(1e-3) / np.log1p(-w ** 8))) if w > 0 else needed)
    if best_count < 8:
        raise DegenerateConfiguration(f"robust sampling found only {best_count} inliers")
    # least-median pass over the consensus set: the truncated cost cannot tell
    # a clean model from one bent by an outlier just inside the threshold
    cons = np.flatnonzero(sampson_distance(best_E, x1, x2) <= threshold)
    best_med = np.median(sampson_distance(best_E, x1[cons], x2[cons]))
    for _ in range(LMEDS_SAMPLES if len(cons) > 8 else 0):
        idx = rng.choice(cons, 8, replace=False)
        try:
            E = _eight_point(x1[idx], x2[idx])
        except np.linalg.LinAlgError:
            continue
        dc = sampson_distance(E, x1[cons], x2[cons])
        # a candidate must keep the consensus; on grid-quantized points a
        # degenerate model can fit a subset exactly and win on the median alone
        if (dc <= threshold).sum() < LMEDS_KEEP * len(cons):
            continue
        med = np.median(dc)
        if med < best_med:
            best_E, best_med = E, med
    E, inl = _trimmed_refit(best_E, x1, x2, threshold)
    R, t = _cheirality(E, x1[inl], x2[inl])
    # re-orthonormalize to machine precision
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return RelativePose(R, t / np.linalg.norm(t)), inl


def estimate_pose(matches: Sequence[Correspondence], cam_ref: CameraModel, cam_src: CameraModel,
                  seed: int = 0, *, min_confidence: float = 0.0, iterations: int = 500,
                  threshold: float = 1e-3) -> RelativePose:
    """Relative pose {R, T} from correspondences with confidence >= ``min_confidence``."""
    kept = [m for m in matches if m.confidence >= min_confidence]
    if len(kept) < 8:
        raise InsufficientMatches(f"need at least 8 qualifying matches, got {len(kept)}")
    pts_ref = np.array([m.ref_pt for m in kept], dtype=float)
    pts_src = np.array([m.src_pt for m in kept], dtype=float)
    pose, _ = estimate_pose_from_points(pts_ref, pts_src, cam_ref, cam_src, seed=seed,
                                        iterations=iterations, threshold=threshold)
    return pose


def rotation_angle_deg(R) -> float:
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return math.degrees(math.atan2(s, c))


def angle_between_deg(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def pose_error(estimated: RelativePose, truth: RelativePose) -> tuple[float, float]:
    """(rotation error, translation-direction error) in degrees.

    The translation error ignores the sign of T, which two views cannot fix.
    """
    rot = rotation_angle_deg(estimated.R @ truth.R.T)
    tr = angle_between_deg(estimated.T, truth.T)
    return rot, min(tr, 180.0 - tr)
