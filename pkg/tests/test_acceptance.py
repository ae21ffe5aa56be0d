"""Acceptance criteria, each at its stated tolerance.

Every test records a pass/fail line into ``conftest.ACCEPTANCE``; the lines are
printed in the terminal summary.
"""

import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from test_data import changed_box, random_batch
from test_metrics import brute_eer, brute_rates
from test_ops import plain_conv3x3
from ccdc.cli import main
from ccdc.data import PatchExchangeConfig, label_cover, patch_exchange
from ccdc.gradcheck import run_all
from ccdc.metrics import candidate_thresholds, compute_metrics, eer, error_rates
from ccdc.network import Cfim, preset
from ccdc.ops import FULL, PATTERNS, ConvLayer, conv_forward_decomposed, conv_forward_direct, count_parameters
from ccdc.tensor import make_rng


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, detail


def test_criterion_1_parameter_ratio():
    ccdn, cdcn = count_parameters(preset("c-cdn")), count_parameters(preset("cdcn"))
    ratio = Fraction(ccdn, cdcn)
    dev = abs(cdcn - 2.25e6) / 2.25e6
    record(1, ratio == Fraction(5, 9) and dev <= 0.02,
           f"C-CDN/CDCN = {ratio} ({ccdn}/{cdcn}), CDCN {cdcn} is {dev:.2%} from 2.25e6")


def test_criterion_2_decomposition_identity():
    rng = np.random.default_rng(2)
    names = sorted(PATTERNS)
    worst = 0.0
    for case in range(1000):
        c, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
        lay = ConvLayer.init(rng, c, co, names[case % len(names)], float(rng.uniform()),
                             dtype=np.float32, stride=int(rng.integers(1, 3)))
        x = rng.normal(size=(2, c, h, w)).astype(np.float32)
        a, b = conv_forward_direct(lay, x), conv_forward_decomposed(lay, x)
        assert a.dtype == b.dtype == np.float32
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30)))
    record(2, worst <= 1e-5, f"1000 float32 cases, max relative deviation {worst:.2e} (tol 1e-5)")


def test_criterion_3_vanilla_reduction():
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        c, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
        # integer values keep every partial sum exact, so summation order cannot matter
        x = rng.integers(-8, 9, size=(2, c, h, w)).astype(np.float32)
        k = rng.integers(-8, 9, size=(co, c, 3, 3)).astype(np.float32)
        taps = np.stack([k[:, :, dy + 1, dx + 1] for dy, dx in FULL.taps], axis=2)
        lay = ConvLayer(FULL, taps, theta=0.0)
        for fwd in (conv_forward_direct, conv_forward_decomposed):
            mismatches += fwd(lay, x).tobytes() != plain_conv3x3(x, k).tobytes()
    record(3, mismatches == 0, f"100 cases x 2 forwards, {mismatches} bit mismatches")


def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    results = run_all(seed=0)
    secs = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    conv_tols = {r.tol for r in results if r.name.startswith("conv-")}
    other_tols = {r.tol for r in results if not r.name.startswith("conv-")}
    worst = max(r.max_rel_err for r in results)
    ok = not failed and secs < 120 and conv_tols <= {1e-6} and max(other_tols) <= 1e-4
    record(4, ok, f"{len(results)} checks, failed {failed or 'none'}, worst rel err {worst:.1e}, {secs:.0f}s")


def test_criterion_5_patch_exchange_contract():
    problems = []
    for seed in range(20):
        b = random_batch(np.random.default_rng(seed), n=4)
        log = []
        out = patch_exchange(b, PatchExchangeConfig(gamma=1.0, rho=1), make_rng(seed), log=log)
        if [ex.target for ex in log] != list(range(4)):
            problems.append(f"seed {seed}: targets {[ex.target for ex in log]}")
        for ex in log:
            i, j = ex.target, ex.donor
            if i == j:
                if out.images[i].tobytes() != b.images[i].tobytes():
                    problems.append(f"seed {seed}: self-donor changed item {i}")
                continue
            box, solid = changed_box(out.images[i], b.images[i])
            y0, x0, h, w = box
            lbox, lsolid = changed_box(out.labels[i], b.labels[i])
            ly, lx, lh, lw = lbox
            ok = (solid and box == ex.rect and lsolid and lbox == label_cover(box, b.label_scale)
                  and np.array_equal(out.images[i][:, y0:y0 + h, x0:x0 + w], b.images[j][:, y0:y0 + h, x0:x0 + w])
                  and np.array_equal(out.labels[i][:, ly:ly + lh, lx:lx + lw],
                                     b.labels[j][:, ly:ly + lh, lx:lx + lw]))
            if not ok:
                problems.append(f"seed {seed}: item {i}")
        same = patch_exchange(b, PatchExchangeConfig(gamma=0.0), make_rng(seed))
        if same.images.tobytes() != b.images.tobytes() or same.labels.tobytes() != b.labels.tobytes():
            problems.append(f"seed {seed}: gamma=0 changed the batch")
    record(5, not problems, f"20 seeded batches, problems: {problems[:3] or 'none'}")


def test_criterion_6_cfim_algebra():
    rng = np.random.default_rng(6)
    worst_mean = worst_fixed = worst_env = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        f, g = rng.normal(size=shape), rng.normal(size=shape)
        zero = Cfim(0.0, 0.0, dtype=np.float64)
        mean = 0.5 * (f + g)
        worst_mean = max(worst_mean, *(float(np.max(np.abs(o - mean))) for o in zero.forward(f, g)))
        cfim = Cfim(float(rng.uniform(-10, 10)), float(rng.uniform(-10, 10)), dtype=np.float64)
        worst_fixed = max(worst_fixed, *(float(np.max(np.abs(o - f))) for o in cfim.forward(f, f.copy())))
        lo, hi = np.minimum(f, g), np.maximum(f, g)
        for o in cfim.forward(f, g):
            worst_env = max(worst_env, float(np.max(lo - o)), float(np.max(o - hi)))
    ok = worst_mean == 0.0 and worst_fixed <= 1e-12 and worst_env <= 1e-12
    record(6, ok, f"1000 cases: mean dev {worst_mean:.1e}, fixed-point dev {worst_fixed:.1e}, "
                  f"envelope excess {max(worst_env, 0):.1e}")


def test_criterion_7_metric_oracle():
    rng = np.random.default_rng(7)
    rate_mismatch, eer_worst = 0, 0.0
    for case in range(200):
        n_live, n_spoof = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        scores = rng.uniform(size=n_live + n_spoof)
        if case % 2:
            scores = np.round(scores, 1)
        is_live = rng.permutation(np.array([True] * n_live + [False] * n_spoof))
        for t in list(candidate_thresholds(scores)) + [0.5]:
            rate_mismatch += error_rates(scores, is_live, t) != brute_rates(list(scores), list(is_live), t)
            res = compute_metrics(scores, is_live, t)
            a, b = brute_rates(list(scores), list(is_live), t)
            rate_mismatch += (res.apcer, res.bpcer, res.acer) != (a, b, (a + b) / 2)
        e, _ = eer(scores, is_live)
        ref, _ = brute_eer(list(scores), list(is_live))
        eer_worst = max(eer_worst, abs(e - ref) * min(n_live, n_spoof))
    record(7, rate_mismatch == 0 and eer_worst <= 1.0,
           f"200 score sets, {rate_mismatch} rate mismatches, worst EER gap {eer_worst:.2f} x 1/min(n)")


@pytest.mark.slow
def test_criterion_8_toy_task(toy_runs):
    a, b = toy_runs["theta0.8"].final, toy_runs["theta0"].final
    secs = toy_runs["theta0.8"].seconds + toy_runs["theta0"].seconds
    record(8, a.acer <= 0.05 and a.acer <= b.acer,
           f"theta 0.8 + PE ACER {a.acer:.4f}, theta 0 ACER {b.acer:.4f}, {secs / 60:.1f} min for both runs")


SMALL = ["--set", "data.n_train=8", "--set", "data.n_dev=4", "--set", "data.n_test=4",
         "--set", "trainer.epochs=1", "--set", "trainer.batch_size=4"]


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, capsys):
    def commands(out):
        return [
            ["train", *SMALL, "--out", str(out / "train"), "--csv"],
            ["eval", *SMALL, "--checkpoint", str(out / "train" / "checkpoint.ckpt"), "--out", str(out / "eval"),
             "--csv"],
            ["sweep", "--axis", "pe", *SMALL, "--set", "network.scale=tiny", "--out", str(out / "sweep"), "--csv"],
            ["augment", "-n", "4", "--out", str(out / "aug"), "--csv"],
            ["report", "--csv"],
            ["gradcheck", "--csv"],
        ]

    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        stdout = []
        for argv in commands(out):
            code = main(argv)
            stdout.append((code, capsys.readouterr().out.replace(str(out), "<out>")))
        runs.append((stdout, snapshot(out)))
    (out_a, files_a), (out_b, files_b) = runs
    differing = [argv[0] for argv, x, y in zip(commands(tmp_path), out_a, out_b) if x != y]
    differing += [k for k in files_a if files_a.get(k) != files_b.get(k)]
    ok = not differing and files_a.keys() == files_b.keys() and all(code == 0 for code, _ in out_a)
    record(9, ok, f"6 commands twice, {len(files_a)} files compared, differing: {differing or 'none'}")
