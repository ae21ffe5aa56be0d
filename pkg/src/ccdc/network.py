"""Depth-supervised networks built from sampling-pattern convolutions.

Single-stream networks (DepthNet, CDCN, C-CDN) share one layout: a stem conv,
three blocks of three convs followed by a 3x3/2 max-pool, a multi-level concat
of the three block outputs resized to the output grid, and a three-conv head.
DC-CDN runs an HV stream and a DG stream side by side, optionally cross-blending
their block outputs with CFIMs before each stream's concat.

Every layer caches what its backward pass needs during a training-mode forward.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from ccdc import _backend
from ccdc.ops import ConvLayer, conv_backward, conv_forward_decomposed, gather, get_pattern
from ccdc.tensor import read_tensor, resize_backward, resize_to, write_tensor

OUTPUT_STRIDE = 8


def resolve_operator(kind: str, theta: float):
    """Map an operator name to ``(pattern, theta)``.

    Accepted: ``vanilla``, ``cdc``, ``ccdc_hv``, ``ccdc_dg``, ``s1``..``s3``
    (CDC over the sparse ablation patterns), ``vanilla-<pattern>``,
    ``cdc-<pattern>``, ``ccdc-<pattern>``, or ``custom:<offsets>``.
    """
    k = kind.strip().lower().replace("_", "-")
    if k.startswith("custom:"):
        return get_pattern(k[len("custom:"):]), theta
    if k == "vanilla":
        return get_pattern("full"), 0.0
    if k == "cdc":
        return get_pattern("full"), theta
    if k in ("s1", "s2", "s3"):
        return get_pattern(k), theta
    head, _, pat = k.partition("-")
    if head in ("vanilla", "cdc", "ccdc") and pat:
        return get_pattern(pat), (0.0 if head == "vanilla" else theta)
    raise ValueError(f"unknown operator kind {kind!r}")


@dataclass
class NetworkSpec:
    operator: str = "ccdc_hv"
    theta: float = 0.8
    stem: int = 64
    blocks: tuple = (128, 196, 128)
    head: tuple = (128, 64)
    input_size: int = 256
    dual_stream: bool = False
    stream_operators: tuple = ("ccdc_hv", "ccdc_dg")
    fusion: str = "average"
    cfim_enabled: bool = True
    cfim_mode: str = "learnable"
    cfim_init: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        self.blocks = tuple(int(v) for v in self.blocks)
        self.head = tuple(int(v) for v in self.head)
        self.stream_operators = tuple(self.stream_operators)
        self.cfim_init = tuple(float(v) for v in self.cfim_init)
        self.validate()

    def validate(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"network.theta must lie in [0, 1], got {self.theta}")
        if self.input_size % OUTPUT_STRIDE:
            raise ValueError(f"network.input_size must be a multiple of {OUTPUT_STRIDE}, got {self.input_size}")
        if len(self.blocks) != 3:
            raise ValueError(f"network.blocks needs three widths, got {self.blocks}")
        if self.fusion not in ("average", "concat"):
            raise ValueError(f"network.fusion must be 'average' or 'concat', got {self.fusion!r}")
        if self.cfim_mode not in ("learnable", "fixed"):
            raise ValueError(f"network.cfim_mode must be 'learnable' or 'fixed', got {self.cfim_mode!r}")
        if len(self.cfim_init) != 6:
            raise ValueError(f"network.cfim_init needs six values, got {len(self.cfim_init)}")
        for op in (self.stream_operators if self.dual_stream else (self.operator,)):
            resolve_operator(op, self.theta)

    @property
    def output_size(self) -> int:
        return self.input_size // OUTPUT_STRIDE

    @property
    def concat_channels(self) -> int:
        return 3 * self.blocks[-1]

    def stream_ops(self) -> tuple:
        return self.stream_operators if self.dual_stream else (self.operator,)

    def conv_shapes(self, input_shape=None):
        """Yield (cin, cout, pattern, theta, out_h, out_w) for every conv."""
        s = self.input_size if input_shape is None else input_shape[-1]
        ops = self.stream_ops()
        for op in ops:
            pattern, theta = resolve_operator(op, self.theta)
            res, cin = s, 3
            yield cin, self.stem, pattern, theta, res, res
            cin = self.stem
            for _ in range(3):
                for width in self.blocks:
                    yield cin, width, pattern, theta, res, res
                    cin = width
                res = (res + 2 - 3) // 2 + 1
        heads = ops
        head_in = self.concat_channels
        if self.dual_stream and self.fusion == "concat":
            heads, head_in = ops[:1], 2 * self.concat_channels
        out = s // OUTPUT_STRIDE
        for op in heads:
            pattern, theta = resolve_operator(op, self.theta)
            cin = head_in
            for width in (*self.head, 1):
                yield cin, width, pattern, theta, out, out
                cin = width

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


SCALES = {
    "reference": dict(stem=64, blocks=(128, 196, 128), head=(128, 64), input_size=256),
    "tiny": dict(stem=8, blocks=(8, 12, 8), head=(8, 4), input_size=64),
}

ARCHITECTURES = {
    "depthnet": dict(operator="vanilla"),
    "cdcn": dict(operator="cdc"),
    "c-cdn": dict(operator="ccdc_hv"),
    "c-cdn-hv": dict(operator="ccdc_hv"),
    "c-cdn-dg": dict(operator="ccdc_dg"),
    "dc-cdn": dict(dual_stream=True, fusion="concat", cfim_enabled=True),
}


def preset(name: str, scale: str = "reference", **overrides) -> NetworkSpec:
    try:
        arch = ARCHITECTURES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; known: {', '.join(ARCHITECTURES)}") from None
    return NetworkSpec(**{**SCALES[scale], **arch, **overrides})


# -- layers -------------------------------------------------------------------

class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def children(self) -> dict[str, "Module"]:
        return {}

    def named_parameters(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v, self
        for name, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children().items():
            yield from child.named_buffers(f"{prefix}{name}.")


class Conv(Module):
    def __init__(self, layer: ConvLayer):
        super().__init__()
        self.layer = layer
        self.params["weight"] = layer.weights

    def forward(self, x, train):
        cols = gather(self.layer, x)
        if train:
            self._cache = (x, cols)
        return conv_forward_decomposed(self.layer, x, cols=cols)

    def backward(self, dy):
        x, cols = self._cache
        g = conv_backward(self.layer, x, dy, cols=cols)
        self.grads["weight"] = g.d_weights
        self._cache = None
        return g.d_input


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["weight"] = np.ones(channels, dtype)
        self.params["bias"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def forward(self, x, train):
        g, b = self.params["weight"], self.params["bias"]
        n, c, h, w = x.shape
        if train:
            m = n * h * w
            flat = x.reshape(n, c, h * w)
            mean = flat.sum(axis=2).sum(axis=0) / m
            xc = x - mean[None, :, None, None]
            var = np.square(xc).reshape(n, c, h * w).sum(axis=2).sum(axis=0) / m
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = xc * inv[None, :, None, None]
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - self.momentum
            rm += self.momentum * mean
            rv *= 1 - self.momentum
            rv += self.momentum * var * (m / max(m - 1, 1))
            self._cache = (xhat, inv)
        else:
            inv = (1.0 / np.sqrt(self.buffers["running_var"] + self.eps)).astype(x.dtype)
            xhat = (x - self.buffers["running_mean"][None, :, None, None]) * inv[None, :, None, None]
        return xhat * g[None, :, None, None] + b[None, :, None, None]

    def backward(self, dy):
        xhat, inv = self._cache
        self._cache = None
        n, c, h, w = dy.shape
        m = n * h * w
        self.grads["bias"] = dy.reshape(n, c, -1).sum(axis=2).sum(axis=0)
        self.grads["weight"] = (dy * xhat).reshape(n, c, -1).sum(axis=2).sum(axis=0)
        scale = (self.params["weight"] * inv)[None, :, None, None]
        return scale * (dy - (self.grads["bias"][None, :, None, None]
                              + xhat * self.grads["weight"][None, :, None, None]) / m)


class ReLU(Module):
    def forward(self, x, train):
        out = np.maximum(x, 0)
        if train:
            self._mask = x > 0
        return out

    def backward(self, dy):
        return dy * self._mask


class MaxPool(Module):
    def forward(self, x, train):
        out, idx = _backend.maxpool_forward(x)
        if train:
            self._cache = (idx, x.shape[2], x.shape[3])
        return out

    def backward(self, dy):
        idx, h, w = self._cache
        return _backend.maxpool_backward(dy, idx, h, w)


class Sigmoid(Module):
    def forward(self, x, train):
        out = 1.0 / (1.0 + np.exp(-x))
        if train:
            self._out = out
        return out

    def backward(self, dy):
        s = self._out
        return dy * s * (1 - s)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return {str(i): m for i, m in enumerate(self.layers)}

    def forward(self, x, train):
        for m in self.layers:
            x = m.forward(x, train)
        return x

    def backward(self, dy):
        for m in reversed(self.layers):
            dy = m.backward(dy)
        return dy


def conv_bn_relu(rng, cin, cout, pattern, theta, dtype):
    return [Conv(ConvLayer.init(rng, cin, cout, pattern, theta, dtype=dtype)),
            BatchNorm(cout, dtype), ReLU()]


class Backbone(Module):
    """Stem and three pooled blocks; returns the low/mid/high block outputs."""

    def __init__(self, spec: NetworkSpec, operator: str, rng, dtype):
        super().__init__()
        pattern, theta = resolve_operator(operator, spec.theta)
        self.stem = Sequential(*conv_bn_relu(rng, 3, spec.stem, pattern, theta, dtype))
        self.blocks = []
        cin = spec.stem
        for _ in range(3):
            layers = []
            for width in spec.blocks:
                layers += conv_bn_relu(rng, cin, width, pattern, theta, dtype)
                cin = width
            layers.append(MaxPool())
            self.blocks.append(Sequential(*layers))

    def children(self):
        return {"stem": self.stem, **{f"block{i + 1}": b for i, b in enumerate(self.blocks)}}

    def forward(self, x, train):
        x = self.stem.forward(x, train)
        taps = []
        for block in self.blocks:
            x = block.forward(x, train)
            taps.append(x)
        return taps

    def backward(self, d_taps):
        dx = d_taps[2]
        dx = self.blocks[2].backward(dx)
        dx = self.blocks[1].backward(dx + d_taps[1])
        dx = self.blocks[0].backward(dx + d_taps[0])
        return self.stem.backward(dx)


class Head(Module):
    def __init__(self, spec: NetworkSpec, operator: str, cin: int, rng, dtype):
        super().__init__()
        pattern, theta = resolve_operator(operator, spec.theta)
        layers = []
        for width in spec.head:
            layers += conv_bn_relu(rng, cin, width, pattern, theta, dtype)
            cin = width
        layers += [Conv(ConvLayer.init(rng, cin, 1, pattern, theta, dtype=dtype)), Sigmoid()]
        self.seq = Sequential(*layers)

    def children(self):
        return {"seq": self.seq}

    def forward(self, x, train):
        return self.seq.forward(x, train)

    def backward(self, dy):
        return self.seq.backward(dy)


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


class Cfim(Module):
    """Sigmoid-gated convex blend of the two streams' features."""

    def __init__(self, alpha=0.0, beta=0.0, learnable=True, dtype=np.float32):
        super().__init__()
        self.learnable = learnable
        store = self.params if learnable else self.buffers
        store["alpha"] = np.array([alpha], dtype)
        store["beta"] = np.array([beta], dtype)

    @property
    def alpha(self) -> float:
        return float((self.params if self.learnable else self.buffers)["alpha"][0])

    @property
    def beta(self) -> float:
        return float((self.params if self.learnable else self.buffers)["beta"][0])

    def forward(self, f_hv, f_dg, train=False):
        if f_hv.shape != f_dg.shape:
            raise ValueError(f"shape mismatch: {f_hv.shape} vs {f_dg.shape}")
        a, b = sigmoid(self.alpha), sigmoid(self.beta)
        if train:
            self._cache = (f_hv, f_dg, a, b)
        dt = f_hv.dtype.type
        return dt(a) * f_hv + dt(1 - a) * f_dg, dt(b) * f_dg + dt(1 - b) * f_hv

    def backward(self, g_hv, g_dg):
        f_hv, f_dg, a, b = self._cache
        self._cache = None
        if self.learnable:
            diff = f_hv - f_dg
            self.grads["alpha"] = np.array([a * (1 - a) * float(np.sum(g_hv * diff, dtype=np.float64))],
                                           dtype=f_hv.dtype)
            self.grads["beta"] = np.array([-b * (1 - b) * float(np.sum(g_dg * diff, dtype=np.float64))],
                                          dtype=f_hv.dtype)
        dt = f_hv.dtype.type
        return dt(a) * g_hv + dt(1 - b) * g_dg, dt(1 - a) * g_hv + dt(b) * g_dg


def cfim_fuse(f_hv, f_dg, cfim: Cfim):
    return cfim.forward(f_hv, f_dg)


# -- networks -----------------------------------------------------------------

class Network(Module):
    """Single- or dual-stream depth network.

    ``forward`` returns ``(depth, taps)``; ``taps`` holds each stream's
    low/mid/high block outputs as seen by its concat (after CFIM blending).
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec, self.dtype = spec, dtype
        ops = spec.stream_ops()
        self.streams = [Backbone(spec, op, rng, dtype) for op in ops]
        c = spec.concat_channels
        if spec.dual_stream and spec.fusion == "concat":
            self.heads = [Head(spec, ops[0], 2 * c, rng, dtype)]
        else:
            self.heads = [Head(spec, op, c, rng, dtype) for op in ops]
        self.cfims = []
        if spec.dual_stream and spec.cfim_enabled:
            learn = spec.cfim_mode == "learnable"
            a, b = spec.cfim_init[:3], spec.cfim_init[3:]
            self.cfims = [Cfim(a[i], b[i], learn, dtype) for i in range(3)]

    def children(self):
        if not self.spec.dual_stream:
            return {"backbone": self.streams[0], "head": self.heads[0]}
        out = {"hv.backbone": self.streams[0], "dg.backbone": self.streams[1]}
        if len(self.heads) == 1:
            out["head"] = self.heads[0]
        else:
            out["hv.head"], out["dg.head"] = self.heads
        for lvl, c in zip(("low", "mid", "high"), self.cfims):
            out[f"cfim_{lvl}"] = c
        return out

    def cfim_values(self) -> dict[str, float]:
        out = {}
        for lvl, c in zip(("low", "mid", "high"), self.cfims):
            out[f"alpha_{lvl}"] = c.alpha
        for lvl, c in zip(("low", "mid", "high"), self.cfims):
            out[f"beta_{lvl}"] = c.beta
        return out

    def _check_input(self, x):
        s = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ValueError(f"expected input N x 3 x {s} x {s}, got {x.shape}")

    def forward(self, x, train=False):
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        out = self.spec.output_size
        taps = [s.forward(x, train) for s in self.streams]
        if self.cfims:
            for lvl, cfim in enumerate(self.cfims):
                taps[0][lvl], taps[1][lvl] = cfim.forward(taps[0][lvl], taps[1][lvl], train)
        cats = [np.concatenate([resize_to(t, out, out) for t in ts], axis=1) for ts in taps]
        if train:
            self._tap_shapes = [[t.shape for t in ts] for ts in taps]
        if len(self.heads) == 1:
            depth = self.heads[0].forward(np.concatenate(cats, axis=1), train)
        else:
            depth = sum(h.forward(c, train) for h, c in zip(self.heads, cats)) / len(self.heads)
        return depth, taps

    def backward(self, d_depth):
        """Accumulate parameter gradients for the last training forward."""
        c = self.spec.concat_channels
        if len(self.heads) == 1:
            d = self.heads[0].backward(d_depth)
            d_cats = [d[:, i * c:(i + 1) * c] for i in range(len(self.streams))]
        else:
            k = len(self.heads)
            d_cats = [h.backward(d_depth / k) for h in self.heads]
        d_taps = []
        for dc, shapes in zip(d_cats, self._tap_shapes):
            edges = np.cumsum([0] + [s[1] for s in shapes])
            d_taps.append([resize_backward(np.ascontiguousarray(dc[:, edges[i]:edges[i + 1]]), *shapes[i][2:])
                           for i in range(3)])
        if self.cfims:
            for lvl, cfim in enumerate(self.cfims):
                d_taps[0][lvl], d_taps[1][lvl] = cfim.backward(d_taps[0][lvl], d_taps[1][lvl])
        dxs = [s.backward(dt) for s, dt in zip(self.streams, d_taps)]
        return sum(dxs)

    def predict(self, x, batch_size=16):
        """Eval-mode depth maps for ``x``, computed in chunks."""
        outs = [self.forward(x[i:i + batch_size], train=False)[0]
                for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(outs, axis=0)

    def trainable(self):
        """List of (name, param, grad_owner) for the optimizer."""
        return list(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p for name, p, _ in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        for k, v in own.items():
            if v.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {state[k].shape}")
            v[...] = state[k]


def forward_single(net: Network, x, mode="eval"):
    if net.spec.dual_stream:
        raise ValueError("forward_single needs a single-stream spec")
    depth, taps = net.forward(x, train=(mode == "train"))
    return depth, dict(zip(("low", "mid", "high"), taps[0]))


def forward_dual(net: Network, x, mode="eval"):
    if not net.spec.dual_stream:
        raise ValueError("forward_dual needs spec.dual_stream")
    return net.forward(x, train=(mode == "train"))[0]


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"CCDC-CKPT1\n"


def save_checkpoint(path, net: Network, extra: dict | None = None):
    state = net.state_dict()
    manifest = {
        "spec": net.spec.to_dict(),
        "records": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "theta": net.spec.theta,
        "cfim": net.cfim_values(),
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for v in state.values():
            write_tensor(f, v)


def read_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(n))
        state = {}
        for rec in manifest["records"]:
            t = read_tensor(f)
            state[rec["name"]] = t.reshape(rec["shape"])
    return manifest, state


def load_checkpoint(path, dtype=np.float32) -> tuple[Network, dict]:
    manifest, state = read_checkpoint(path)
    spec = NetworkSpec.from_dict(manifest["spec"])
    net = Network(spec, np.random.default_rng(0), dtype)
    net.load_state_dict(state)
    return net, manifest
