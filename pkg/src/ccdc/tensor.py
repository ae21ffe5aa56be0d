"""Dense NCHW tensors backed by numpy, plus seeded RNG streams and the
binary tensor file format used for checkpoints and fixtures."""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"CCDC-T1"

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class ShapeError(ValueError):
    pass


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    t = np.ascontiguousarray(data, dtype=dtype)
    if t.ndim == 0 or 0 in t.shape:
        raise ShapeError(f"tensor dimensions must all be >= 1, got {t.shape}")
    return t


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}, expected one of {sorted(_OPS)}") from None
    return fn(a, b)


def resize_to(x: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Block-mean downsample an NCHW tensor by integer factors."""
    n, c, h, w = x.shape
    if target_h <= 0 or target_w <= 0 or h % target_h or w % target_w:
        raise ShapeError(
            f"cannot resize {h}x{w} to {target_h}x{target_w}: factors must be integers"
        )
    fh, fw = h // target_h, w // target_w
    if fh == 1 and fw == 1:
        return x
    return x.reshape(n, c, target_h, fh, target_w, fw).mean(axis=(3, 5), dtype=x.dtype)


def resize_backward(dy: np.ndarray, source_h: int, source_w: int) -> np.ndarray:
    n, c, th, tw = dy.shape
    fh, fw = source_h // th, source_w // tw
    if fh == 1 and fw == 1:
        return dy
    g = dy / (fh * fw)
    return np.repeat(np.repeat(g, fh, axis=2), fw, axis=3)


# -- randomness ---------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    # PCG64 streams are specified bit-for-bit, so a seed reproduces across platforms
    return np.random.Generator(np.random.PCG64(seed))


def split_seed(seed: int, names: Iterable[str]) -> dict[str, int]:
    """Derive independent child seeds, one per named stream.

    Each child depends only on the root seed and its own name, so adding a
    stream never shifts the others.
    """
    out = {}
    for name in names:
        key = [int(b) for b in name.encode()]
        ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
        out[name] = int(ss.generate_state(2, np.uint64)[0])
    return out


def rand_uniform(rng: np.random.Generator, shape: Sequence[int], lo: float, hi: float,
                 dtype=np.float32) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    return rng.uniform(lo, hi, size=tuple(shape)).astype(dtype)


def rand_normal(rng: np.random.Generator, shape: Sequence[int], mean: float, std: float,
                dtype=np.float32) -> np.ndarray:
    if not std > 0:
        raise ValueError(f"need std > 0, got {std}")
    return rng.normal(mean, std, size=tuple(shape)).astype(dtype)


# -- serialization ------------------------------------------------------------

def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    f.write(MAGIC)
    f.write(struct.pack("<I", t.ndim))
    f.write(struct.pack(f"<{t.ndim}I", *t.shape))
    f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (ndim,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    count = int(np.prod(dims))
    buf = f.read(4 * count)
    if len(buf) != 4 * count:
        raise ValueError("truncated tensor record")
    return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(dims)


def serialize(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def deserialize(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save(path, t: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
