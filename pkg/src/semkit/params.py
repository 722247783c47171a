"""Named tensor store with a seeded generator and the SEMP binary format.

SEMP layout (little-endian)::

    b"SEMP"  u32 version  u32 count
    repeated count times:
        u16 name_len  name (utf-8)  u32 ndim  u32 dims[ndim]  f32 data[prod(dims)]

Values are kept as float64 in memory but are always float32-representable,
so a save/load round trip is exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParamShapeMismatch

MAGIC = b"SEMP"
VERSION = 1

ATTENTION_LAYERS = ("init8.self", "init8.cross", "init32.self", "init32.cross",
                    "iter32.self", "iter32.cross", "epi")


class ParamStore(dict):
    """``name -> ndarray`` mapping with shape-checked access."""

    def get_shaped(self, name: str, shape: tuple) -> np.ndarray:
        try:
            arr = self[name]
        except KeyError:
            raise ParamShapeMismatch(f"missing parameter {name!r}") from None
        if arr.shape != tuple(shape):
            raise ParamShapeMismatch(f"parameter {name!r} has shape {arr.shape}, expected {tuple(shape)}")
        return arr

    @property
    def channels(self) -> int:
        return self["fuse.down_w"].shape[0]

    @property
    def max_anchors(self) -> int:
        return (self["struct.w1"].shape[0] - self.channels) // 3

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self.items()})

    def save(self, path) -> None:
        Path(path).write_bytes(dumps(self))

    @classmethod
    def load(cls, path) -> "ParamStore":
        return loads(Path(path).read_bytes())


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def dumps(params: ParamStore) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> ParamStore:
    if buf[:4] != MAGIC:
        raise FormatError("parameter file does not start with the SEMP magic")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"unsupported SEMP version {version}")
        pos = 12
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            store[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt SEMP file: {exc}") from exc
    if pos != len(buf):
        raise FormatError("trailing bytes after SEMP tensor table")
    return store


def _attention_layer(rng, prefix, C, scale):
    hidden = 2 * C
    return {
        f"{prefix}.wq": rng.normal(0.0, C ** -0.5, (C, C)),
        f"{prefix}.wk": rng.normal(0.0, C ** -0.5, (C, C)),
        f"{prefix}.wv": rng.normal(0.0, C ** -0.5, (C, C)),
        f"{prefix}.wo": rng.normal(0.0, C ** -0.5, (C, C)),
        f"{prefix}.mlp_w1": rng.normal(0.0, C ** -0.5, (C, hidden)),
        f"{prefix}.mlp_b1": np.zeros(hidden),
        f"{prefix}.mlp_w2": scale * rng.normal(0.0, hidden ** -0.5, (hidden, C)),
        f"{prefix}.mlp_b2": np.zeros(C),
    }


def init_params(channels: int = 32, max_anchors: int = 32, seed: int = 0,
                scale: float = 0.05) -> ParamStore:
    """Seeded random parameters for the extractor and every matching layer.

    ``scale`` multiplies the output weights of each residual branch; zero makes
    every attention, fusion and structure layer an exact identity.
    """
    rng = np.random.default_rng(seed)
    C = channels
    p = {}
    in_ch = 1
    for k in range(1, 6):
        fan_in = in_ch * 9
        p[f"extract.conv{k}.w"] = rng.normal(0.0, (2.0 / fan_in) ** 0.5, (C, in_ch, 3, 3))
        p[f"extract.conv{k}.b"] = np.zeros(C)
        in_ch = C
    for name in ATTENTION_LAYERS:
        p.update(_attention_layer(rng, name, C, scale))
    p["fuse.down_w"] = scale * rng.normal(0.0, C ** -0.5, (C, C))
    p["fuse.down_b"] = np.zeros(C)
    p["fuse.up_w"] = scale * rng.normal(0.0, C ** -0.5, (C, C))
    p["fuse.up_b"] = np.zeros(C)
    width = C + 3 * max_anchors
    p["struct.w1"] = rng.normal(0.0, width ** -0.5, (width, 2 * C))
    p["struct.b1"] = np.zeros(2 * C)
    p["struct.w2"] = scale * rng.normal(0.0, (2 * C) ** -0.5, (2 * C, C))
    p["struct.b2"] = np.zeros(C)
    return ParamStore({k: _f32(v) for k, v in p.items()})
