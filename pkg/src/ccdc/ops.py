"""Sampling-pattern convolutions: vanilla, central difference (CDC) and the
sparse cross variants, with direct and decomposed forwards and analytic
backward passes.

A layer computes, for every output position ``p0``::

    y(p0) = sum_n w_n * x(p0 + p_n)  -  theta * x(p0) * sum_n w_n

which is the theta-blend of a vanilla and a pure central-difference
convolution over the same taps with shared weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ccdc import _backend

CENTER = ((0, 0),)


@dataclass(frozen=True)
class SamplingPattern:
    name: str
    taps: tuple[tuple[int, int], ...]

    def __post_init__(self):
        taps = tuple((int(dy), int(dx)) for dy, dx in self.taps)
        if not taps:
            raise ValueError(f"pattern {self.name!r} has no taps")
        if len(set(taps)) != len(taps):
            raise ValueError(f"pattern {self.name!r} has duplicate taps: {taps}")
        for dy, dx in taps:
            if abs(dy) > 1 or abs(dx) > 1:
                raise ValueError(f"tap {(dy, dx)} of {self.name!r} lies outside the 3x3 envelope")
        object.__setattr__(self, "taps", taps)

    @property
    def offsets(self) -> np.ndarray:
        return np.array(self.taps, dtype=np.int_)

    def __len__(self):
        return len(self.taps)


FULL = SamplingPattern("full", tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)))
HV = SamplingPattern("hv", ((-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)))
DG = SamplingPattern("dg", ((-1, -1), (-1, 1), (0, 0), (1, -1), (1, 1)))
# asymmetric / sparser ablation patterns
S1 = SamplingPattern("s1", ((-1, -1), (-1, 0), (0, 0), (0, 1), (1, 1)))
S2 = SamplingPattern("s2", ((-1, 0), (0, 0), (0, 1)))
S3 = SamplingPattern("s3", ((0, 0), (1, 1)))

PATTERNS = {p.name: p for p in (FULL, HV, DG, S1, S2, S3)}


def get_pattern(spec) -> SamplingPattern:
    """Resolve a registry name, a ``SamplingPattern``, or an offset list.

    Offset lists may be given as a sequence of pairs or as text like
    ``"-1,0; 0,0; 1,1"``.
    """
    if isinstance(spec, SamplingPattern):
        return spec
    if isinstance(spec, str):
        key = spec.strip().lower()
        if key in PATTERNS:
            return PATTERNS[key]
        if "," not in key:
            raise ValueError(f"unknown pattern {spec!r}; known: {', '.join(PATTERNS)}")
        pairs = [tuple(int(v) for v in chunk.split(",")) for chunk in key.split(";") if chunk.strip()]
        return SamplingPattern("custom", tuple(pairs))
    return SamplingPattern("custom", tuple(tuple(p) for p in spec))


def kaiming_std(cin: int, pattern: SamplingPattern) -> float:
    # fan-in counts sampled taps only
    return float(np.sqrt(2.0 / (cin * len(pattern))))


@dataclass
class ConvLayer:
    pattern: SamplingPattern
    weights: np.ndarray
    theta: float = 0.8
    stride: int = 1
    padding: int = 1
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.pattern = get_pattern(self.pattern)
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.weights.ndim != 3 or self.weights.shape[2] != len(self.pattern):
            raise ValueError(
                f"weights must be Cout x Cin x {len(self.pattern)} for pattern "
                f"{self.pattern.name!r}, got {self.weights.shape}"
            )

    @property
    def cout(self) -> int:
        return self.weights.shape[0]

    @property
    def cin(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, cin: int, cout: int, pattern="full",
             theta: float = 0.8, dtype=np.float32, **kw) -> "ConvLayer":
        pattern = get_pattern(pattern)
        w = rng.normal(0.0, kaiming_std(cin, pattern), size=(cout, cin, len(pattern)))
        return cls(pattern, w.astype(dtype), theta, **kw)


@dataclass
class ConvGradients:
    d_weights: np.ndarray
    d_input: np.ndarray
    d_bias: np.ndarray | None = field(default=None)


def _check_input(layer: ConvLayer, x: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"expected N x C x H x W input, got shape {x.shape}")
    if x.shape[1] != layer.cin:
        raise ValueError(f"channel mismatch: layer expects {layer.cin} input channels, got {x.shape[1]}")


def _center(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """x(p0) at every output position, as N x C x P."""
    n, c = x.shape[:2]
    if layer.stride == 1 and layer.padding == 1:
        return x.reshape(n, c, -1)
    return _backend.gather_taps(x, CENTER, layer.stride, layer.padding).reshape(n, c, -1)


def gather(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Tap samples of ``x`` as N x (Cin*T) x P (the im2col matrix)."""
    cols = _backend.gather_taps(x, layer.pattern.offsets, layer.stride, layer.padding)
    n, c, t, ho, wo = cols.shape
    return cols.reshape(n, c * t, ho * wo), (ho, wo)


def _finish(layer, y, n, ho, wo):
    if layer.bias is not None:
        y += layer.bias[None, :, None]
    return y.reshape(n, layer.cout, ho, wo)


def conv_forward_direct(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Sum over taps of ``w_n * (x(p0+p_n) - theta * x(p0))``."""
    _check_input(layer, x)
    n, c = x.shape[:2]
    cols = _backend.gather_taps(x, layer.pattern.offsets, layer.stride, layer.padding)
    ho, wo = cols.shape[3:]
    center = _center(layer, x).reshape(n, c, 1, ho, wo)
    diff = cols - x.dtype.type(layer.theta) * center
    w2 = layer.weights.reshape(layer.cout, -1).astype(x.dtype, copy=False)
    y = np.matmul(w2, diff.reshape(n, -1, ho * wo))
    return _finish(layer, y, n, ho, wo)


def conv_forward_decomposed(layer: ConvLayer, x: np.ndarray, cols=None) -> np.ndarray:
    """Vanilla convolution plus a theta-scaled 1x1 convolution by the kernel sums."""
    _check_input(layer, x)
    n = x.shape[0]
    if cols is None:
        cols, (ho, wo) = gather(layer, x)
    else:
        cols, (ho, wo) = cols
    w = layer.weights.astype(x.dtype, copy=False)
    y = np.matmul(w.reshape(layer.cout, -1), cols)
    if layer.theta != 0.0:
        y -= x.dtype.type(layer.theta) * np.matmul(w.sum(axis=2), _center(layer, x))
    return _finish(layer, y, n, ho, wo)


conv_forward = conv_forward_decomposed


def _batched_outer(a, b):
    """sum_b a[b] @ b[b].T without materialising transposed copies."""
    out = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ b[i].T
    return out


def conv_backward(layer: ConvLayer, x: np.ndarray, d_out: np.ndarray, cols=None) -> ConvGradients:
    _check_input(layer, x)
    n, c, h, w = x.shape
    if cols is None:
        cols, (ho, wo) = gather(layer, x)
    else:
        cols, (ho, wo) = cols
    expected = (n, layer.cout, ho, wo)
    if d_out.shape != expected:
        raise ValueError(f"shape mismatch: d_out {d_out.shape} vs forward output {expected}")
    theta = x.dtype.type(layer.theta)
    t = len(layer.pattern)
    wts = layer.weights.astype(x.dtype, copy=False)
    dy = d_out.reshape(n, layer.cout, ho * wo)

    dw = _batched_outer(dy, cols).reshape(layer.weights.shape)
    dcols = np.matmul(wts.reshape(layer.cout, -1).T, dy).reshape(n, c, t, ho, wo)
    dx = _backend.scatter_taps(dcols, layer.pattern.offsets, layer.stride, layer.padding, h, w)
    if layer.theta != 0.0:
        center = _center(layer, x)
        dw -= theta * _batched_outer(dy, center)[:, :, None]
        dcenter = -theta * np.matmul(wts.sum(axis=2).T, dy)
        if layer.stride == 1 and layer.padding == 1:
            dx += dcenter.reshape(n, c, h, w)
        else:
            dx += _backend.scatter_taps(dcenter.reshape(n, c, 1, ho, wo), CENTER,
                                        layer.stride, layer.padding, h, w)
    db = dy.sum(axis=(0, 2)) if layer.bias is not None else None
    return ConvGradients(dw.astype(layer.weights.dtype, copy=False), dx, db)


# -- accounting ---------------------------------------------------------------

def _conv_shapes(obj, input_shape=None):
    """Yield (cin, cout, pattern, theta, out_h, out_w) for every conv."""
    if isinstance(obj, ConvLayer):
        if input_shape is None:
            yield obj.cin, obj.cout, obj.pattern, obj.theta, 0, 0
            return
        h, w = input_shape[-2:]
        ho = (h + 2 * obj.padding - 3) // obj.stride + 1
        wo = (w + 2 * obj.padding - 3) // obj.stride + 1
        yield obj.cin, obj.cout, obj.pattern, obj.theta, ho, wo
    else:
        yield from obj.conv_shapes(input_shape)


def count_parameters(obj) -> int:
    """Conv-kernel weights only: Cout * Cin * taps per layer (no BN, no bias)."""
    return sum(cin * cout * len(p) for cin, cout, p, *_ in _conv_shapes(obj))


def count_macs(obj, input_shape) -> int:
    """Multiply-accumulates over sampled taps, all layers."""
    return sum(ho * wo * cin * cout * len(p) for cin, cout, p, _, ho, wo in _conv_shapes(obj, input_shape))


def count_central_macs(obj, input_shape) -> int:
    """Extra MACs of the 1x1 kernel-sum correction, for layers with theta > 0."""
    return sum(ho * wo * cin * cout for cin, cout, _, th, ho, wo in _conv_shapes(obj, input_shape) if th > 0)


def count_flops(obj, input_shape) -> int:
    """2 FLOPs per MAC, tap MACs plus the central-difference correction."""
    return 2 * (count_macs(obj, input_shape) + count_central_macs(obj, input_shape))
