"""Calibrated two-view scenes with exact geometry, used as a ground-truth oracle."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleSpec, InputError
from .features import FeatureMap, avg_pool
from .geometry import CameraModel, RelativePose, rotation_about
from .matching import COARSE_STRIDE, FINE_STRIDE, cell_to_pixel, pixel_to_cell


@dataclass(eq=False)
class Scene:
    points: np.ndarray          # (N, 3), reference camera frame
    cam_ref: CameraModel
    cam_src: CameraModel
    R: np.ndarray
    t: np.ndarray               # metric translation, X_src = R X_ref + t
    descriptors: np.ndarray     # (N, C), unit rows
    contrast: np.ndarray        # (N,), 0 marks a textureless point
    seed: int = 0
    images: tuple = field(default=None, repr=False)

    @property
    def pose(self) -> RelativePose:
        return RelativePose.from_motion(self.R, self.t)

    @property
    def channels(self) -> int:
        return self.descriptors.shape[1]

    def project(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact pixel positions of every point in both views."""
        ref = self.points @ self.cam_ref.K.T
        src = (self.points @ self.R.T + self.t) @ self.cam_src.K.T
        return ref[:, :2] / ref[:, 2:], src[:, :2] / src[:, 2:]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "cam_ref": self.cam_ref.to_dict(),
            "cam_src": self.cam_src.to_dict(),
            "pose": self.pose.to_dict(),
            "R": self.R.ravel().tolist(),
            "t": self.t.tolist(),
            "points": self.points.tolist(),
            "descriptors": self.descriptors.tolist(),
            "contrast": self.contrast.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        scene = cls(
            points=np.asarray(d["points"], dtype=float).reshape(-1, 3),
            cam_ref=CameraModel.from_dict(d["cam_ref"]),
            cam_src=CameraModel.from_dict(d["cam_src"]),
            R=np.asarray(d["R"], dtype=float).reshape(3, 3),
            t=np.asarray(d["t"], dtype=float).reshape(3),
            descriptors=np.asarray(d["descriptors"], dtype=float),
            contrast=np.asarray(d["contrast"], dtype=float),
            seed=int(d.get("seed", 0)),
        )
        scene.images = render_images(scene)
        return scene

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _random_unit(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_scene(n_points: int = 100, baseline: float = 0.5, rotation_deg: float = 10.0,
                   seed: int = 0, *, image_size: int = 256, channels: int = 32,
                   depth: tuple[float, float] = (4.0, 8.0), repeat_fraction: float = 0.0,
                   repeat_group: int = 2, textureless_fraction: float = 0.0,
                   max_batches: int = 20) -> Scene:
    """Random co-visible point cloud seen by two cameras.

    ``baseline`` is the metric camera displacement, ``rotation_deg`` the
    relative rotation about a random axis.  A ``repeat_fraction`` of the
    points share descriptors in groups of ``repeat_group`` (repetitive
    texture); a ``textureless_fraction`` render with zero contrast.
    """
    if n_points < 8:
        raise InputError(f"a scene needs at least 8 points, got {n_points}")
    if image_size % 32:
        raise InputError("image size must be a multiple of 32")
    rng = np.random.default_rng(seed)
    f = 0.9 * image_size
    c = (image_size - 1) / 2.0
    cam = CameraModel(f, f, c, c, image_size, image_size)
    # rotation axis within ~17 deg of the image plane (mostly pan/tilt, some roll)
    phi, az = rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3)
    r = np.sqrt(1 - az * az)
    R = rotation_about([r * np.cos(phi), r * np.sin(phi), az], rotation_deg)
    t_dir = _random_unit(rng, 1, 3)[0] * np.array([1.0, 1.0, 0.3])
    t = baseline * t_dir / np.linalg.norm(t_dir)

    lo, hi = 1.0, image_size - 2.0
    kept = []
    for _ in range(max_batches):
        m = 4 * n_points
        uv = rng.uniform(lo, hi, size=(m, 2))
        z = rng.uniform(depth[0], depth[1], size=m)
        X = (np.column_stack([uv, np.ones(m)]) @ cam.K_inv.T) * z[:, None]
        Xs = X @ R.T + t
        ok = Xs[:, 2] > 0.1 * depth[0]
        ps = Xs @ cam.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            ps = ps[:, :2] / ps[:, 2:]
        ok &= np.all((ps >= lo) & (ps <= hi), axis=1)
        kept.extend(X[ok])
        if len(kept) >= n_points:
            break
    if len(kept) < n_points:
        raise InfeasibleSpec(f"only {len(kept)} of {n_points} points are visible in both views")
    points = np.array(kept[:n_points])

    n_rep = int(round(repeat_fraction * n_points))
    n_groups = n_rep // max(repeat_group, 1)
    n_rep = n_groups * repeat_group
    base = _random_unit(rng, n_points - n_rep + n_groups, channels)
    group_of = np.concatenate([np.repeat(np.arange(n_groups), repeat_group),
                               n_groups + np.arange(n_points - n_rep)]).astype(int)
    group_of = group_of[rng.permutation(n_points)]
    descriptors = base[group_of]
    contrast = np.ones(n_points)
    n_flat = int(round(textureless_fraction * n_points))
    if n_flat:
        contrast[rng.choice(n_points, n_flat, replace=False)] = 0.0

    scene = Scene(points, cam, cam, R, t, descriptors, contrast, seed)
    scene.images = render_images(scene)
    return scene


def render_images(scene: Scene, blob_sigma: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale views: one Gaussian blob per point, brightness from its descriptor."""
    out = []
    brightness = scene.contrast * (0.3 + 0.7 * np.abs(scene.descriptors[:, 0]) * np.sqrt(scene.channels) / 3.0)
    for cam, pts in zip((scene.cam_ref, scene.cam_src), scene.project()):
        H, W = cam.height, cam.width
        img = np.zeros((H, W))
        ys, xs = np.mgrid[0:H, 0:W]
        r = int(np.ceil(3 * blob_sigma))
        for (x, y), b in zip(pts, brightness):
            x0, x1 = max(int(x) - r, 0), min(int(x) + r + 2, W)
            y0, y1 = max(int(y) - r, 0), min(int(y) + r + 2, H)
            d2 = (xs[y0:y1, x0:x1] - x) ** 2 + (ys[y0:y1, x0:x1] - y) ** 2
            img[y0:y1, x0:x1] += b * np.exp(-d2 / (2 * blob_sigma ** 2))
        out.append(np.clip(img, 0.0, 1.0))
    return tuple(out)


def _cell_winners(px, dims, stride):
    """Point index owning each occupied cell (nearest to the cell center)."""
    cells = pixel_to_cell(px, stride)
    flat = cells[:, 1] * dims[1] + cells[:, 0]
    dist = np.linalg.norm(px - cell_to_pixel(cells, stride), axis=1)
    winners = {}
    for k in np.lexsort((np.arange(len(px)), dist)):
        winners.setdefault(int(flat[k]), int(k))
    return flat, winners


@dataclass(eq=False)
class GroundTruth:
    ref_idx: np.ndarray      # flat coarse cell, reference grid
    src_idx: np.ndarray
    ref_px: np.ndarray       # exact pixel positions
    src_px: np.ndarray
    point_ids: np.ndarray
    ref_dims: tuple[int, int]
    src_dims: tuple[int, int]

    def __len__(self):
        return len(self.ref_idx)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.ref_idx.tolist(), self.src_idx.tolist()))

    def fine_map(self) -> dict[int, np.ndarray]:
        """Reference cell -> exact source pixel."""
        return {int(i): p for i, p in zip(self.ref_idx, self.src_px)}


def ground_truth_matches(scene: Scene, stride: int = COARSE_STRIDE) -> GroundTruth:
    """Coarse cell pairs of every point that owns its cell in both views."""
    ref_dims = (scene.cam_ref.height // stride, scene.cam_ref.width // stride)
    src_dims = (scene.cam_src.height // stride, scene.cam_src.width // stride)
    ref_px, src_px = scene.project()
    ref_flat, ref_win = _cell_winners(ref_px, ref_dims, stride)
    src_flat, src_win = _cell_winners(src_px, src_dims, stride)
    ids = sorted(k for k in ref_win.values() if src_win.get(int(src_flat[k])) == k)
    ids = np.array(ids, dtype=np.int64)
    return GroundTruth(ref_flat[ids], src_flat[ids], ref_px[ids], src_px[ids], ids,
                       ref_dims, src_dims)


def _render_coarse(px, desc, contrast, dims, stride, rng, noise, empty_noise):
    H, W = dims
    C = desc.shape[1]
    data = empty_noise * rng.normal(size=(H * W, C)) / np.sqrt(C)
    _, winners = _cell_winners(px, dims, stride)
    for cell, k in sorted(winners.items()):
        data[cell] = contrast[k] * desc[k] + noise * rng.normal(size=C) / np.sqrt(C)
    return data.reshape(H, W, C)


def _render_fine(px, desc, contrast, dims, rng, empty_noise, sigma=0.75):
    H, W = dims
    C = desc.shape[1]
    data = empty_noise * rng.normal(size=(H, W, C)) / np.sqrt(C)
    fine = (px - (FINE_STRIDE - 1) / 2.0) / FINE_STRIDE
    for (fx, fy), d, c in zip(fine, desc, contrast):
        x0, x1 = max(int(np.floor(fx)) - 2, 0), min(int(np.floor(fx)) + 4, W)
        y0, y1 = max(int(np.floor(fy)) - 2, 0), min(int(np.floor(fy)) + 4, H)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        wgt = np.exp(-((xs - fx) ** 2 + (ys - fy) ** 2) / (2 * sigma ** 2))
        data[y0:y1, x0:x1] += c * wgt[..., None] * d
    return data


def render_feature_maps(scene: Scene, noise: float = 0.05, empty_noise: float = 0.05,
                        seed: int | None = None) -> dict[int, tuple[FeatureMap, FeatureMap]]:
    """Descriptor maps that bypass the extractor, keyed by scale (8, 32, 2).

    Each occupied coarse cell carries the descriptor of the point nearest its
    center plus ``noise``; empty cells carry ``empty_noise``-level noise.
    """
    rng = np.random.default_rng(scene.seed + 7919 if seed is None else seed)
    out = {8: [], 32: [], 2: []}
    for cam, px in zip((scene.cam_ref, scene.cam_src), scene.project()):
        dims = (cam.height // COARSE_STRIDE, cam.width // COARSE_STRIDE)
        coarse = _render_coarse(px, scene.descriptors, scene.contrast, dims, COARSE_STRIDE,
                                rng, noise, empty_noise)
        out[8].append(FeatureMap(coarse, 8))
        out[32].append(FeatureMap(avg_pool(coarse, 4), 32))
        fdims = (cam.height // FINE_STRIDE, cam.width // FINE_STRIDE)
        out[2].append(FeatureMap(_render_fine(px, scene.descriptors, scene.contrast, fdims,
                                              rng, empty_noise), 2))
    return {k: tuple(v) for k, v in out.items()}


def texture_image(kind: str, size: int = 256, seed: int = 0) -> np.ndarray:
    """Structured grayscale textures sharing no content with blob scenes.

    ``kind`` is one of ``"smooth"`` (blurred noise), ``"stripes"`` or
    ``"checker"``; used as negative controls for matching.
    """
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    if kind == "smooth":
        img = gaussian_filter(rng.random((size, size)), 4.0)
    elif kind == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.5 * np.sin(xs / 3.0 + 0.3 * np.sin(ys / 10.0) + phase)
    elif kind == "checker":
        period = int(rng.integers(4, 9))
        img = ((xs // period + ys // period) % 2).astype(float)
    else:
        raise InputError(f"unknown texture kind {kind!r}")
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
