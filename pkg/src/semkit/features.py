"""Feature maps, the toy extractor, cross-scale fusion and structured features."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadDimensions, FormatError, ParamShapeMismatch, ScaleMismatch
from .params import ParamStore

SCALES = (2, 8, 32)
SEMF_MAGIC = b"SEMF"
L1_EPS = 1e-12


@dataclass(eq=False)
class FeatureMap:
    """Dense ``(H, W, C)`` descriptor grid at ``1/scale`` of the input image."""
    data: np.ndarray
    scale: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise BadDimensions(f"feature map must be HxWxC with H, W >= 1, got {self.data.shape}")
        if self.scale not in SCALES:
            raise ScaleMismatch(f"scale must be one of {SCALES}, got {self.scale}")
        if not np.all(np.isfinite(self.data)):
            raise BadDimensions("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.channels)

    def with_flat(self, flat) -> "FeatureMap":
        return FeatureMap(np.asarray(flat).reshape(self.data.shape), self.scale)

    def save(self, path) -> None:
        Path(path).write_bytes(dumps_semf(self))

    @classmethod
    def load(cls, path) -> "FeatureMap":
        return loads_semf(Path(path).read_bytes())


def dumps_semf(fmap: FeatureMap) -> bytes:
    H, W, C = fmap.data.shape
    head = SEMF_MAGIC + struct.pack("<4I", H, W, C, fmap.scale)
    return head + np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()


def loads_semf(buf: bytes) -> FeatureMap:
    if len(buf) < 20 or buf[:4] != SEMF_MAGIC:
        raise FormatError("feature file is missing the SEMF magic header")
    H, W, C, scale = struct.unpack_from("<4I", buf, 4)
    expected = 20 + 4 * H * W * C
    if len(buf) != expected:
        raise FormatError(f"SEMF payload is {len(buf) - 20} bytes, header implies {expected - 20}")
    data = np.frombuffer(buf, dtype="<f4", offset=20).astype(np.float64).reshape(H, W, C)
    return FeatureMap(data, int(scale))


# ---------------------------------------------------------------------------
# Toy extractor


def _conv3x3_s2(x, w, b):
    # x: (H, W, Cin); w: (Cout, Cin, 3, 3)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))[::2, ::2]  # (H/2, W/2, Cin, 3, 3)
    h, wd = win.shape[:2]
    cols = win.reshape(h * wd, -1)
    return (cols @ w.reshape(w.shape[0], -1).T).reshape(h, wd, -1) + b


def _normalize_descriptors(x):
    x = x - x.mean(axis=(0, 1), keepdims=True)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def extract_features(image, params: ParamStore) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
    """Strided-convolution stack producing (1/8, 1/32, 1/2) descriptor maps.

    Each output map is centered per channel and L2-normalized per pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] % 32 or img.shape[1] % 32 or min(img.shape) == 0:
        raise BadDimensions(f"image must be a 2-D grid with sides divisible by 32, got {img.shape}")
    x = img[:, :, None]
    stages = []
    for k in range(1, 6):
        x = _conv3x3_s2(x, params[f"extract.conv{k}.w"], params[f"extract.conv{k}.b"])
        if k < 5:
            x = np.maximum(x, 0.0)
        stages.append(x)
    fine = FeatureMap(_normalize_descriptors(stages[0]), 2)
    f8 = FeatureMap(_normalize_descriptors(stages[2]), 8)
    f32 = FeatureMap(_normalize_descriptors(stages[4]), 32)
    return f8, f32, fine


# ---------------------------------------------------------------------------
# Cross-scale fusion


def avg_pool(data, k: int) -> np.ndarray:
    H, W, C = data.shape
    return data.reshape(H // k, k, W // k, k, C).mean(axis=(1, 3))


def upsample_nearest(data, k: int) -> np.ndarray:
    return np.repeat(np.repeat(data, k, axis=0), k, axis=1)


def fuse_scales(f8: FeatureMap, f32: FeatureMap, params: ParamStore) -> tuple[FeatureMap, FeatureMap]:
    """Exchange information between the 1/8 and 1/32 maps.

    Returns ``(fused_8, fused_32)``; each output adds a 1x1-convolved,
    resampled copy of the *input* map at the other scale.
    """
    if f8.scale != 8 or f32.scale != 32:
        raise ScaleMismatch(f"expected scales (8, 32), got ({f8.scale}, {f32.scale})")
    if f8.height != 4 * f32.height or f8.width != 4 * f32.width:
        raise ScaleMismatch(f"1/8 map {f8.dims} is not 4x the 1/32 map {f32.dims}")
    if f8.channels != f32.channels:
        raise ScaleMismatch("channel counts differ between scales")
    C = f8.channels
    down_w = params.get_shaped("fuse.down_w", (C, C))
    down_b = params.get_shaped("fuse.down_b", (C,))
    up_w = params.get_shaped("fuse.up_w", (C, C))
    up_b = params.get_shaped("fuse.up_b", (C,))
    out32 = f32.data + avg_pool(f8.data, 4) @ down_w + down_b
    out8 = f8.data + upsample_nearest(f32.data, 4) @ up_w + up_b
    return FeatureMap(out8, 8), FeatureMap(out32, 32)


# ---------------------------------------------------------------------------
# Structured features


@dataclass(eq=False)
class AnchorSet:
    """Paired anchor coordinates ``(x, y)`` in coarse-grid units."""
    ref: np.ndarray
    src: np.ndarray

    def __post_init__(self):
        self.ref = np.asarray(self.ref, dtype=float).reshape(-1, 2)
        self.src = np.asarray(self.src, dtype=float).reshape(-1, 2)
        if len(self.ref) != len(self.src):
            raise BadDimensions("anchor lists differ in length")

    @property
    def count(self) -> int:
        return len(self.ref)

    def __len__(self):
        return self.count


def confidence(M, i: int) -> float:
    """Best match score of reference cell ``i``."""
    scores = M.scores if hasattr(M, "scores") else np.asarray(M)
    return float(scores[i].max())


def select_anchors(M, sigma_h: float, n_anchors: int, seed: int) -> AnchorSet:
    """Randomly keep up to ``n_anchors`` row-argmax pairs scoring >= ``sigma_h``."""
    scores = M.scores
    j = scores.argmax(axis=1)
    conf = scores[np.arange(len(scores)), j]
    rows = np.flatnonzero(conf >= sigma_h)
    if len(rows) > n_anchors:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(rows, n_anchors, replace=False))
    cols = j[rows]
    W_ref = M.ref_dims[1]
    W_src = M.src_dims[1]
    ref = np.column_stack([rows % W_ref, rows // W_ref])
    src = np.column_stack([cols % W_src, cols // W_src])
    return AnchorSet(ref, src)


def structured_features(points, anchors) -> np.ndarray:
    """Rows of ``norm(dX) || norm(dY) || norm(D)`` for each point.

    ``points`` is ``(P, 2)``, ``anchors`` is ``(N, 2)``; returns ``(P, 3N)``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    anc = np.asarray(anchors, dtype=float).reshape(-1, 2)
    if len(anc) == 0:
        raise BadDimensions("structured features need at least one anchor")
    dx = pts[:, 0:1] - anc[None, :, 0]
    dy = pts[:, 1:2] - anc[None, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    blocks = [b / (np.abs(b).sum(axis=1, keepdims=True) + L1_EPS) for b in (dx, dy, d)]
    return np.concatenate(blocks, axis=1)


def structured_feature(point, anchors) -> np.ndarray:
    return structured_features([point], anchors)[0]


def dense_mlp(x, w1, b1, w2, b2) -> np.ndarray:
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def _pad_blocks(sf, n, n_max):
    if n == n_max:
        return sf
    out = np.zeros((len(sf), 3 * n_max))
    for k in range(3):
        out[:, k * n_max:k * n_max + n] = sf[:, k * n:(k + 1) * n]
    return out


def structured_field(dims: tuple[int, int], anchors) -> np.ndarray:
    """Structured feature of every cell of an ``(H, W)`` grid, row-major."""
    H, W = dims
    ys, xs = np.mgrid[0:H, 0:W]
    return structured_features(np.column_stack([xs.ravel(), ys.ravel()]), anchors)


def fuse_structured(f: FeatureMap, sf_field, params: ParamStore) -> FeatureMap:
    """Residual MLP over ``appearance || structure`` per cell.

    ``sf_field`` is ``(H*W, 3n)`` with ``n <= max_anchors``; an empty field
    (``n == 0``) returns ``f`` unchanged.
    """
    sf = np.asarray(sf_field, dtype=float)
    if sf.size == 0:
        return f
    C = f.channels
    n_max = params.max_anchors
    if sf.ndim != 2 or sf.shape[0] != f.height * f.width or sf.shape[1] % 3:
        raise ParamShapeMismatch(f"structured field shape {sf.shape} does not fit a {f.dims} map")
    n = sf.shape[1] // 3
    if n > n_max:
        raise ParamShapeMismatch(f"{n} anchors exceed the MLP capacity of {n_max}")
    w1 = params.get_shaped("struct.w1", (C + 3 * n_max, 2 * C))
    b1 = params.get_shaped("struct.b1", (2 * C,))
    w2 = params.get_shaped("struct.w2", (2 * C, C))
    b2 = params.get_shaped("struct.b2", (C,))
    x = np.concatenate([f.flat(), _pad_blocks(sf, n, n_max)], axis=1)
    return f.with_flat(f.flat() + dense_mlp(x, w1, b1, w2, b2))
