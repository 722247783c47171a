"""Coarse match matrices, band-restricted rewriting, MNN extraction and
subpixel refinement on the fine map."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeMismatch
from .features import FeatureMap
from .geometry import Correspondence, EpipolarBand, band_masks

COARSE_STRIDE = 8
FINE_STRIDE = 2
TSV_COLUMNS = ("ref_x", "ref_y", "src_x", "src_y", "confidence", "sigma2")


@dataclass(eq=False)
class MatchMatrix:
    scores: np.ndarray
    ref_dims: tuple[int, int]
    src_dims: tuple[int, int]
    tau: float

    @property
    def T(self) -> "MatchMatrix":
        return MatchMatrix(self.scores.T, self.src_dims, self.ref_dims, self.tau)


def _masked_softmax(s, support, axis):
    z = np.where(support, s, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _similarity(f_ref: FeatureMap, f_src: FeatureMap, tau: float) -> np.ndarray:
    if f_ref.channels != f_src.channels:
        raise ShapeMismatch(f"channel counts differ: {f_ref.channels} vs {f_src.channels}")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    return tau * (f_ref.flat() @ f_src.flat().T)


def dual_softmax(f_ref: FeatureMap, f_src: FeatureMap, tau: float) -> MatchMatrix:
    """Row-softmax times column-softmax of the scaled descriptor similarity."""
    s = _similarity(f_ref, f_src, tau)
    e_r = np.exp(s - s.max(axis=1, keepdims=True))
    e_c = np.exp(s - s.max(axis=0, keepdims=True))
    m = (e_r / e_r.sum(axis=1, keepdims=True)) * (e_c / e_c.sum(axis=0, keepdims=True))
    return MatchMatrix(m, f_ref.dims, f_src.dims, tau)


def band_support(bands_ref: Sequence[EpipolarBand], bands_src: Sequence[EpipolarBand],
                 ref_dims, src_dims) -> np.ndarray:
    """Candidate pairs licensed by either direction's band (invalid band = all)."""
    n_ref = ref_dims[0] * ref_dims[1]
    n_src = src_dims[0] * src_dims[1]
    if len(bands_ref) != n_ref or len(bands_src) != n_src:
        raise ShapeMismatch("band lists do not match the grid sizes")
    support = band_masks(bands_ref, src_dims[1], src_dims[0])
    support |= band_masks(bands_src, ref_dims[1], ref_dims[0]).T
    support[~support.any(axis=1)] = True
    support[:, ~support.any(axis=0)] = True
    return support


def epipolar_rewrite(M: MatchMatrix, f_ref: FeatureMap, f_src: FeatureMap,
                     bands_ref: Sequence[EpipolarBand], bands_src: Sequence[EpipolarBand],
                     tau: float | None = None) -> MatchMatrix:
    """Recompute the match matrix with softmaxes restricted to band support.

    Entries outside every band are zero; the previous scores in ``M`` are
    replaced, not blended.
    """
    tau = M.tau if tau is None else tau
    support = band_support(bands_ref, bands_src, f_ref.dims, f_src.dims)
    s = _similarity(f_ref, f_src, tau)
    m = _masked_softmax(s, support, 1) * _masked_softmax(s, support, 0)
    return MatchMatrix(m, f_ref.dims, f_src.dims, tau)


@dataclass(eq=False)
class MatchSet:
    """Mutual-nearest-neighbor matches on the coarse grid.

    ``src_refined`` holds image-pixel source locations after refinement
    (coarse cell centers until ``refine_matches`` runs); ``sigma2`` is the
    heatmap variance in fine cells squared.
    """
    ref_idx: np.ndarray
    src_idx: np.ndarray
    confidence: np.ndarray
    ref_dims: tuple[int, int]
    src_dims: tuple[int, int]
    src_refined: np.ndarray = field(default=None)
    sigma2: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ref_idx = np.asarray(self.ref_idx, dtype=np.int64)
        self.src_idx = np.asarray(self.src_idx, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.src_refined is None:
            self.src_refined = self.src_pixels()
        if self.sigma2 is None:
            self.sigma2 = np.zeros(len(self.ref_idx))

    def __len__(self):
        return len(self.ref_idx)

    def ref_cells(self) -> np.ndarray:
        W = self.ref_dims[1]
        return np.column_stack([self.ref_idx % W, self.ref_idx // W]).astype(float)

    def src_cells(self) -> np.ndarray:
        W = self.src_dims[1]
        return np.column_stack([self.src_idx % W, self.src_idx // W]).astype(float)

    def ref_pixels(self, stride: int = COARSE_STRIDE) -> np.ndarray:
        return cell_to_pixel(self.ref_cells(), stride)

    def src_pixels(self, stride: int = COARSE_STRIDE) -> np.ndarray:
        return cell_to_pixel(self.src_cells(), stride)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.ref_idx.tolist(), self.src_idx.tolist()))

    def correspondences(self, units: str = "grid") -> list[Correspondence]:
        if units == "grid":
            a, b = self.ref_cells(), self.src_cells()
        else:
            a, b = self.ref_pixels(), self.src_refined
        conf = np.clip(self.confidence, 0.0, 1.0)
        return [Correspondence(tuple(p), tuple(q), float(c)) for p, q, c in zip(a, b, conf)]


def cell_to_pixel(cells, stride: int) -> np.ndarray:
    """Image-pixel center of grid cells (integer pixel centers)."""
    return np.asarray(cells, dtype=float) * stride + (stride - 1) / 2.0


def pixel_to_cell(pixels, stride: int) -> np.ndarray:
    return np.floor((np.asarray(pixels, dtype=float) + 0.5) / stride).astype(np.int64)


def mutual_nearest(scores, theta: float) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores)
    if scores.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    j = scores.argmax(axis=1)
    i = np.arange(scores.shape[0])
    mutual = scores.argmax(axis=0)[j] == i
    keep = mutual & (scores[i, j] >= theta)
    return i[keep], j[keep]


def extract_matches(M: MatchMatrix, theta: float) -> MatchSet:
    """Pairs that are each other's argmax and score at least ``theta``."""
    if not 0 < theta < 1:
        raise ValueError(f"extraction threshold must lie in (0, 1), got {theta}")
    i, j = mutual_nearest(M.scores, theta)
    return MatchSet(i, j, M.scores[i, j], M.ref_dims, M.src_dims)


# ---------------------------------------------------------------------------
# Fine refinement


def _fine_index(px):
    return math.floor((px - (FINE_STRIDE - 1) / 2.0) / FINE_STRIDE + 0.5)


def heatmap_stats(heat) -> tuple[np.ndarray, float]:
    """Expectation ``(x, y)`` and total variance of a 2-D probability grid."""
    heat = np.asarray(heat, dtype=float)
    h, w = heat.shape
    ys, xs = np.mgrid[0:h, 0:w]
    mx, my = (heat * xs).sum(), (heat * ys).sum()
    var = (heat * ((xs - mx) ** 2 + (ys - my) ** 2)).sum()
    return np.array([mx, my]), float(var)


def refine_match(coarse: Correspondence, fine_ref: FeatureMap, fine_src: FeatureMap,
                 w: int = 5, tau: float = 1.0) -> tuple[np.ndarray, float]:
    """Subpixel source location by correlating against a ``w x w`` fine window.

    ``coarse`` carries image-pixel coordinates.  Returns the refined source
    point in image pixels and the heatmap variance (fine cells squared).
    """
    if w % 2 == 0 or w < 1:
        raise ValueError("window size must be odd and positive")
    Hf, Wf = fine_src.dims
    r = w // 2
    rx = min(max(_fine_index(coarse.ref_pt[0]), 0), fine_ref.width - 1)
    ry = min(max(_fine_index(coarse.ref_pt[1]), 0), fine_ref.height - 1)
    desc = fine_ref.data[ry, rx]
    # window clamped inside the fine map, never dropped
    cx = min(max(_fine_index(coarse.src_pt[0]), r), max(Wf - 1 - r, r))
    cy = min(max(_fine_index(coarse.src_pt[1]), r), max(Hf - 1 - r, r))
    x0, y0 = cx - r, cy - r
    window = fine_src.data[y0:y0 + w, x0:x0 + w]
    s = tau * (window @ desc)
    heat = np.exp(s - s.max())
    heat /= heat.sum()
    mean, var = heatmap_stats(heat)
    fine_xy = mean + np.array([x0, y0])
    return fine_xy * FINE_STRIDE + (FINE_STRIDE - 1) / 2.0, var


def refine_matches(matches: MatchSet, fine_ref: FeatureMap, fine_src: FeatureMap,
                   w: int = 5, tau: float = 1.0) -> MatchSet:
    refined = np.empty((len(matches), 2))
    sigma2 = np.empty(len(matches))
    ref_px, src_px = matches.ref_pixels(), matches.src_pixels()
    for k in range(len(matches)):
        c = Correspondence(tuple(ref_px[k]), tuple(src_px[k]), 1.0)
        refined[k], sigma2[k] = refine_match(c, fine_ref, fine_src, w, tau)
    return MatchSet(matches.ref_idx, matches.src_idx, matches.confidence,
                    matches.ref_dims, matches.src_dims, refined, sigma2)


# ---------------------------------------------------------------------------
# Match files


def write_matches_tsv(path, ref_pts, src_pts, confidence, sigma2) -> None:
    ref = np.asarray(ref_pts, dtype=float).reshape(-1, 2)
    src = np.asarray(src_pts, dtype=float).reshape(-1, 2)
    cols = np.column_stack([ref, src, np.asarray(confidence, float), np.asarray(sigma2, float)])
    with open(path, "w", newline="") as fh:
        fh.write("\t".join(TSV_COLUMNS) + "\n")
        for row in cols:
            fh.write("\t".join(f"{v:.6g}" for v in row) + "\n")


def write_matchset_tsv(path, matches: MatchSet) -> None:
    write_matches_tsv(path, matches.ref_pixels(), matches.src_refined,
                      matches.confidence, matches.sigma2)


def read_matches_tsv(path) -> dict[str, np.ndarray]:
    """Columns of a match TSV as float arrays keyed by column name."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty match file") from None
        missing = [c for c in TSV_COLUMNS[:4] if c not in header]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, k] for k, name in enumerate(header)}
