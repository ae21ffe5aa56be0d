"""Depth losses, Adam, the learning-rate schedule, and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ccdc.data import AugConfig, LabeledBatch, SyntheticSceneConfig, augment_batch, generate_batch
from ccdc.metrics import EvalResult, compute_metrics
from ccdc.network import Network, NetworkSpec, save_checkpoint
from ccdc.tensor import make_rng, split_seed

log = logging.getLogger(__name__)

CFIM_KEYS = ("alpha_low", "alpha_mid", "alpha_high", "beta_low", "beta_mid", "beta_high")
REPORT_COLUMNS = ("epoch", "lr", "mse", "cdl", "total", "acer", "eer") + CFIM_KEYS
SEED_STREAMS = ("data_train", "data_dev", "data_test", "init", "aug", "shuffle")

# neighbour offsets of the eight contrast kernels (+1 centre, -1 neighbour)
CONTRAST_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class LossReport:
    mse: float
    cdl: float
    total: float


def _contrast_residuals(e):
    """e(p) - e(p+d) over interior cells, one array per contrast kernel."""
    h, w = e.shape[-2:]
    core = e[..., 1:h - 1, 1:w - 1]
    return [core - e[..., 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx] for dy, dx in CONTRAST_OFFSETS]


def depth_loss(pred, label, cdl_weight=1.0) -> LossReport:
    """MSE plus the contrastive depth loss.

    The contrast kernels are applied without padding and annihilate constants,
    so a uniform offset between ``pred`` and ``label`` only shows up in MSE.
    """
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    e = pred.astype(np.float64) - label.astype(np.float64)
    mse = float(np.mean(e * e))
    cdl = float(sum(np.mean(r * r) for r in _contrast_residuals(e))) if min(e.shape[-2:]) > 2 else 0.0
    return LossReport(mse, cdl, mse + cdl_weight * cdl)


def depth_loss_grad(pred, label, cdl_weight=1.0):
    """d(total)/d(pred)."""
    e = pred.astype(np.float64) - label.astype(np.float64)
    g = 2.0 * e / e.size
    h, w = e.shape[-2:]
    if min(h, w) > 2:
        m = e[..., 1:h - 1, 1:w - 1].size
        for (dy, dx), r in zip(CONTRAST_OFFSETS, _contrast_residuals(e)):
            gr = (2.0 * cdl_weight / m) * r
            g[..., 1:h - 1, 1:w - 1] += gr
            g[..., 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx] -= gr
    return g.astype(pred.dtype)


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float | None = None) -> dict:
    """One Adam update in place; L2 weight decay is folded into the gradient."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def lr_schedule(epoch: int, base_lr: float, max_epochs: int, halve_at: int) -> float:
    if not 0 <= epoch < max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs})")
    return base_lr / 2 if epoch >= halve_at else base_lr


def net_params(net: Network) -> dict:
    return {name: p for name, p, _ in net.named_parameters()}


def net_grads(net: Network) -> dict:
    return {name: owner.grads[name.rsplit(".", 1)[-1]] for name, _, owner in net.named_parameters()}


# -- scoring ------------------------------------------------------------------

def score(pred_depth) -> float:
    """Mean predicted depth; higher means more live."""
    return float(np.mean(pred_depth, dtype=np.float64))


def batch_scores(pred_depth) -> np.ndarray:
    return pred_depth.reshape(pred_depth.shape[0], -1).mean(axis=1, dtype=np.float64)


def evaluate(net: Network, test: LabeledBatch, dev: LabeledBatch | None = None,
             threshold="dev-set") -> EvalResult:
    scores = batch_scores(net.predict(test.images))
    if dev is None:
        return compute_metrics(scores, test.is_live, "eer" if threshold == "dev-set" else threshold)
    dev_scores = batch_scores(net.predict(dev.images))
    return compute_metrics(scores, test.is_live, threshold, dev_scores, dev.is_live)


# -- training -----------------------------------------------------------------

@dataclass
class TrainerConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    epochs: int = 60
    halve_at: int = 40
    batch_size: int = 8
    cdl_weight: float = 1.0
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("trainer.epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("trainer.batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("trainer.lr must be >= 0")
        if self.eval_every < 0:
            raise ValueError("trainer.eval_every must be >= 0")


@dataclass
class DataConfig:
    image_size: int = 64
    n_train: int = 512
    n_dev: int = 128
    n_test: int = 256
    live_fraction: float = 0.5
    n_domains: int = 3
    noise: float = 0.03

    def __post_init__(self):
        for k in ("n_train", "n_dev", "n_test"):
            if getattr(self, k) < 2:
                raise ValueError(f"data.{k} must be >= 2")

    def scene(self) -> SyntheticSceneConfig:
        return SyntheticSceneConfig(n_domains=self.n_domains, image_size=self.image_size, noise=self.noise)


@dataclass
class Datasets:
    train: LabeledBatch
    dev: LabeledBatch
    test: LabeledBatch


def make_datasets(cfg: DataConfig, seed: int) -> Datasets:
    seeds = split_seed(seed, SEED_STREAMS)
    scene = cfg.scene()
    return Datasets(
        generate_batch(scene, cfg.n_train, cfg.live_fraction, make_rng(seeds["data_train"])),
        generate_batch(scene, cfg.n_dev, cfg.live_fraction, make_rng(seeds["data_dev"])),
        generate_batch(scene, cfg.n_test, cfg.live_fraction, make_rng(seeds["data_test"])),
    )


def init_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    return Network(spec, make_rng(split_seed(seed, SEED_STREAMS)["init"]), dtype)


@dataclass
class RunResult:
    net: Network
    history: list
    cfim_trajectory: list
    final: EvalResult | None
    seconds: float


def train(spec: NetworkSpec, data_cfg: DataConfig, aug_cfg: AugConfig, cfg: TrainerConfig,
          seed: int, out_dir=None, datasets: Datasets | None = None, manifest: dict | None = None) -> RunResult:
    """Train from a fresh seeded initialisation; write artifacts if ``out_dir``."""
    if spec.input_size != data_cfg.image_size:
        raise ValueError(f"network.input_size {spec.input_size} != data.image_size {data_cfg.image_size}")
    t0 = time.perf_counter()
    seeds = split_seed(seed, SEED_STREAMS)
    ds = datasets or make_datasets(data_cfg, seed)
    net = init_network(spec, seed)
    aug_rng, shuffle_rng = make_rng(seeds["aug"]), make_rng(seeds["shuffle"])
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = net_params(net)
    history, trajectory = [], [net.cfim_values()]
    n = len(ds.train)
    final = None
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.epochs, cfg.halve_at)
        perm = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = augment_batch(ds.train.subset(idx), aug_cfg, aug_rng)
            pred, _ = net.forward(batch.images, train=True)
            rep = depth_loss(pred, batch.labels, cfg.cdl_weight)
            net.backward(depth_loss_grad(pred, batch.labels, cfg.cdl_weight))
            adam_step(opt, params, net_grads(net), lr)
            sums += np.array([rep.mse, rep.cdl, rep.total]) * len(idx)
        mse, cdl, total = (float(v) for v in sums / n)
        row = {"epoch": epoch + 1, "lr": lr, "mse": mse, "cdl": cdl, "total": total, "acer": "", "eer": ""}
        last = epoch + 1 == cfg.epochs
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            res = evaluate(net, ds.test, ds.dev)
            row["acer"], row["eer"] = float(res.acer), float(res.eer)
            if last:
                final = res
        row.update(net.cfim_values())
        history.append(row)
        trajectory.append(net.cfim_values())
        log.info("epoch %d lr %.2e loss %.5f (mse %.5f cdl %.5f) acer %s",
                 epoch + 1, lr, total, mse, cdl, row["acer"])
    if final is None:
        final = evaluate(net, ds.test, ds.dev)
    result = RunResult(net, history, trajectory, final, time.perf_counter() - t0)
    if out_dir is not None:
        write_run(out_dir, result, manifest or {
            "seed": seed, "network": spec.to_dict(), "data": asdict(data_cfg),
            "aug": asdict(aug_cfg), "trainer": asdict(cfg),
        })
    return result


def write_report(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, extrasaction="ignore", restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})


def write_run(out_dir, result: RunResult, manifest: dict):
    from ccdc import __version__

    os.makedirs(out_dir, exist_ok=True)
    write_report(os.path.join(out_dir, "report.csv"), result.history)
    save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), result.net)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump({**manifest, "code_version": __version__}, f, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "cfim_trajectory.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("epoch",) + CFIM_KEYS)
        for e, vals in enumerate(result.cfim_trajectory):
            w.writerow([e] + [repr(vals[k]) for k in CFIM_KEYS if k in vals])
    write_eval(os.path.join(out_dir, "eval.csv"), result.final)


def write_eval(path, res: EvalResult):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        row = res.row()
        w.writerow(row.keys())
        w.writerow([repr(float(v)) for v in row.values()])
