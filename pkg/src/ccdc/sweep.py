"""Sweep grids: each point is a RunConfig with one or two keys changed."""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor

from ccdc.config import ConfigError, RunConfig
from ccdc.network import preset

THETAS = tuple(round(0.1 * i, 1) for i in range(11))
OPERATORS = ("vanilla-full", "vanilla-hv", "vanilla-dg", "cdc-full", "ccdc-hv", "ccdc-dg", "s1", "s2", "s3")
FUSIONS = ("average", "concat")
PE_ARCHS = ("depthnet", "cdcn", "dc-cdn")
CFIM_INITS = (0.0, 1.0, 2.0, 5.0)
AXES = ("theta", "operator", "fusion", "pe", "cfim_init")

SWEEP_COLUMNS = ("point", "apcer", "bpcer", "acer", "eer", "hter", "threshold", "final_loss")


def _scale(cfg: RunConfig) -> str:
    return "reference" if cfg.network.stem == 64 else "tiny"


def _rebuild(cfg: RunConfig, arch: str, **overrides) -> RunConfig:
    keep = {"input_size": cfg.network.input_size, "theta": cfg.network.theta}
    return dataclasses.replace(cfg, network=preset(arch, _scale(cfg), **{**keep, **overrides}))


def sweep_points(base: RunConfig, axis: str, values=None) -> list[tuple[str, RunConfig]]:
    """(label, config) for every point on ``axis``."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r} (valid axes: {', '.join(AXES)})")
    points = []
    if axis == "theta":
        # single-stream C-CDN, as in the theta ablation
        for t in values or THETAS:
            points.append((f"theta={float(t):g}", _rebuild(base, "c-cdn", theta=float(t))))
    elif axis == "operator":
        for op in values or OPERATORS:
            points.append((f"operator={op}", _rebuild(base, "cdcn", operator=op)))
    elif axis == "fusion":
        for f in values or FUSIONS:
            points.append((f"fusion={f}", dataclasses.replace(
                base, network=dataclasses.replace(base.network, dual_stream=True, fusion=f))))
    elif axis == "pe":
        for arch in values or PE_ARCHS:
            for pe in (False, True):
                cfg = _rebuild(base, arch)
                cfg = dataclasses.replace(cfg, aug=dataclasses.replace(base.aug, pe=pe))
                points.append((f"arch={arch};pe={'on' if pe else 'off'}", cfg))
    else:
        for init in values or CFIM_INITS:
            for mode in ("learnable", "fixed"):
                net = dataclasses.replace(base.network, dual_stream=True, cfim_enabled=True,
                                          cfim_mode=mode, cfim_init=(float(init),) * 6)
                points.append((f"cfim_init={float(init):g};mode={mode}", dataclasses.replace(base, network=net)))
    for label, cfg in points:
        cfg.network.validate()
    return points


def slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in label)


def run_point(args):
    from ccdc.cli import run_training

    label, cfg, out_dir = args
    result = run_training(cfg, out_dir)
    row = {"point": label, **result.final.row(),
           "final_loss": result.history[-1]["total"] if result.history else float("nan")}
    return row


def run_sweep(base: RunConfig, axis: str, out_root: str, values=None, jobs: int = 1) -> list[dict]:
    points = sweep_points(base, axis, values)
    tasks = [(label, cfg, os.path.join(out_root, slug(label))) for label, cfg in points]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(run_point, tasks))
    return [run_point(t) for t in tasks]
