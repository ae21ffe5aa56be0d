"""Finite-difference checks of every hand-written backward pass.

All checks run in float64 with central differences. Layer checks compare
every entry; the end-to-end network check samples a few entries of each
parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ccdc.network import BatchNorm, Cfim, MaxPool, Network, preset
from ccdc.ops import PATTERNS, ConvLayer, conv_backward, conv_forward
from ccdc.train import depth_loss, depth_loss_grad, net_grads, net_params

LAYER_TOL = 1e-6
NETWORK_TOL = 1e-4
EPS = 1e-5
# smaller step for whole networks: at 1e-5 perturbations cross ReLU/max-pool kinks
NETWORK_EPS = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def rel_err(analytic, numeric, scale=None) -> float:
    """Largest entrywise relative error.

    The denominator is floored at 1e-3 of the tensor's largest gradient
    magnitude so that round-off on near-zero entries is not amplified.
    """
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if scale is None:
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    floor = max(1e-3 * scale, 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f, x, eps=EPS, index=None):
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def _maybe_flip(name, grad, fault):
    return -grad if fault == name else grad


def check_conv(pattern, theta, rng, fault=None, shape=(2, 3, 6, 6), cout=4, stride=1) -> CheckResult:
    name = f"conv-{pattern}-theta{theta:g}" + (f"-s{stride}" if stride != 1 else "")
    layer = ConvLayer.init(rng, shape[1], cout, pattern, theta, dtype=np.float64, stride=stride)
    x = rng.normal(size=shape)
    r = rng.normal(size=conv_forward(layer, x).shape)
    loss = lambda: float(np.sum(conv_forward(layer, x) * r))
    g = conv_backward(layer, x, r)
    dw = _maybe_flip(name, g.d_weights, fault)
    err = max(rel_err(dw.ravel(), numeric_grad(loss, layer.weights)),
              rel_err(g.d_input.ravel(), numeric_grad(loss, x)))
    return CheckResult(name, err, LAYER_TOL, layer.weights.size + x.size)


def check_batchnorm(rng, fault=None) -> CheckResult:
    bn = BatchNorm(3, np.float64)
    bn.params["weight"][:] = rng.uniform(0.5, 1.5, 3)
    bn.params["bias"][:] = rng.normal(size=3)
    x = rng.normal(size=(4, 3, 3, 3))
    r = rng.normal(size=x.shape)
    loss = lambda: float(np.sum(bn.forward(x, True) * r))
    bn.forward(x, True)
    dx = _maybe_flip("batchnorm", bn.backward(r), fault)
    err = max(rel_err(dx.ravel(), numeric_grad(loss, x)),
              rel_err(bn.grads["weight"], numeric_grad(loss, bn.params["weight"])),
              rel_err(bn.grads["bias"], numeric_grad(loss, bn.params["bias"])))
    return CheckResult("batchnorm", err, LAYER_TOL, x.size + 6)


def check_maxpool(rng, fault=None) -> CheckResult:
    pool = MaxPool()
    # well-separated values keep the argmax stable under perturbation
    x = rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7).astype(np.float64) * 0.1
    r = rng.normal(size=pool.forward(x, False).shape)
    loss = lambda: float(np.sum(pool.forward(x, False) * r))
    pool.forward(x, True)
    dx = _maybe_flip("maxpool", pool.backward(r), fault)
    return CheckResult("maxpool", rel_err(dx.ravel(), numeric_grad(loss, x)), LAYER_TOL, x.size)


def check_cfim(rng, fault=None) -> CheckResult:
    cfim = Cfim(0.3, -0.7, learnable=True, dtype=np.float64)
    f_hv, f_dg = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 2, 3, 3))
    r1, r2 = rng.normal(size=f_hv.shape), rng.normal(size=f_hv.shape)

    def loss():
        a, b = cfim.forward(f_hv, f_dg)
        return float(np.sum(a * r1) + np.sum(b * r2))

    cfim.forward(f_hv, f_dg, train=True)
    g_hv, g_dg = cfim.backward(r1, r2)
    g_hv = _maybe_flip("cfim", g_hv, fault)
    err = max(rel_err(g_hv.ravel(), numeric_grad(loss, f_hv)),
              rel_err(g_dg.ravel(), numeric_grad(loss, f_dg)),
              rel_err(cfim.grads["alpha"], numeric_grad(loss, cfim.params["alpha"])),
              rel_err(cfim.grads["beta"], numeric_grad(loss, cfim.params["beta"])))
    return CheckResult("cfim", err, LAYER_TOL, 2 * f_hv.size + 2)


def check_loss(rng, fault=None) -> CheckResult:
    pred, label = rng.uniform(size=(2, 1, 6, 6)), rng.uniform(size=(2, 1, 6, 6))
    loss = lambda: depth_loss(pred, label).total
    g = _maybe_flip("loss", depth_loss_grad(pred, label), fault)
    return CheckResult("loss", rel_err(g.ravel(), numeric_grad(loss, pred)), LAYER_TOL, pred.size)


def check_network(arch, rng, fault=None, per_tensor=2, batch=2) -> CheckResult:
    name = f"network-{arch}"
    spec = preset(arch, "tiny")
    net = Network(spec, rng, np.float64)
    s = spec.input_size
    x = rng.uniform(size=(batch, 3, s, s))
    label = rng.uniform(size=(batch, 1, spec.output_size, spec.output_size))

    def loss():
        return depth_loss(net.forward(x, train=True)[0], label).total

    pred, _ = net.forward(x, train=True)
    net.backward(depth_loss_grad(pred, label))
    grads = {k: g.copy() for k, g in net_grads(net).items()}
    err, count = 0.0, 0
    for k, p in net_params(net).items():
        idx = list(rng.choice(p.size, size=min(per_tensor, p.size), replace=False))
        a = _maybe_flip(name, grads[k].reshape(-1)[idx], fault)
        err = max(err, rel_err(a, numeric_grad(loss, p, NETWORK_EPS, index=idx), scale=np.max(np.abs(grads[k]))))
        count += len(idx)
    return CheckResult(name, err, NETWORK_TOL, count)


def run_all(seed=0, fault=None) -> list[CheckResult]:
    """Every check. ``fault`` names a check whose analytic gradient is negated."""
    rng = np.random.default_rng(seed)
    results = [check_conv(p, 0.8, rng, fault) for p in PATTERNS]
    results += [check_conv("full", 0.0, rng, fault), check_conv("hv", 0.0, rng, fault),
                check_conv("full", 0.8, rng, fault, stride=2)]
    results += [check_batchnorm(rng, fault), check_maxpool(rng, fault), check_cfim(rng, fault),
                check_loss(rng, fault)]
    results += [check_network(a, rng, fault) for a in ("c-cdn", "dc-cdn")]
    return results
