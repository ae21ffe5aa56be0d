import csv
import io
import json

import numpy as np
import pytest

from ccdc.cli import main, report_rows
from ccdc.config import ConfigError, RunConfig, load_config, parse_overrides
from ccdc.sweep import OPERATORS, sweep_points

SMALL = ["--set", "data.n_train=4", "--set", "data.n_dev=4", "--set", "data.n_test=4"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def parse_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


# -- config -------------------------------------------------------------------

def test_reference_defaults():
    cfg = RunConfig()
    assert cfg.network.theta == 0.8
    assert (cfg.aug.pe_gamma, cfg.aug.pe_rho) == (0.5, 2)
    assert (cfg.trainer.lr, cfg.trainer.weight_decay, cfg.trainer.batch_size) == (1e-4, 5e-5, 8)
    assert cfg.network.dual_stream and cfg.network.cfim_enabled


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[run]\nseed = 7\n[network]\npreset = c-cdn\ntheta = 0.5\n"
                 "[aug]\npe_patch_range = 1/4, 1/2\n[trainer]\nepochs = 3\n")
    cfg = load_config(p, ["trainer.epochs=5", "network.operator=custom:0,0;1,1"])
    assert cfg.seed == 7 and cfg.trainer.epochs == 5
    assert cfg.network.theta == 0.5 and not cfg.network.dual_stream
    assert cfg.network.operator == "custom:0,0;1,1"
    assert cfg.aug.pe_patch_range == (0.25, 0.5)


def test_config_round_trips_through_ini(tmp_path):
    cfg = load_config(None, ["network.fusion=average", "aug.pe=false", "run.seed=3"])
    p = tmp_path / "echo.ini"
    p.write_text(cfg.to_ini())
    assert load_config(p) == cfg


@pytest.mark.parametrize("override,field", [
    ("network.theta=abc", "network.theta"),
    ("network.theta=1.5", "network.theta"),
    ("trainer.batch_size=0", "trainer.batch_size"),
    ("aug.pe_gamma=2", "aug.pe_gamma"),
    ("trainer.nope=1", "trainer.nope"),
    ("network.scale=huge", "network.scale"),
    ("data.image_size=32", "network.input_size"),
])
def test_config_errors_name_the_field(override, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(None, [override])


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_overrides(["theta=1"])
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(None, ["model.theta=1"])


# -- sweep grids --------------------------------------------------------------

def test_sweep_grids():
    base = RunConfig()
    theta = sweep_points(base, "theta")
    assert len(theta) == 11
    assert [c.network.theta for _, c in theta] == [round(0.1 * i, 1) for i in range(11)]
    ops = sweep_points(base, "operator")
    assert [c.network.operator for _, c in ops] == list(OPERATORS)
    assert {"s1", "s2", "s3"} <= set(OPERATORS)
    pe = sweep_points(base, "pe")
    assert len(pe) == 6
    assert {(lbl.split(";")[0], c.aug.pe) for lbl, c in pe} == {
        (f"arch={a}", p) for a in ("depthnet", "cdcn", "dc-cdn") for p in (False, True)}
    assert len(sweep_points(base, "fusion")) == 2
    cf = sweep_points(base, "cfim_init")
    assert {c.network.cfim_mode for _, c in cf} == {"learnable", "fixed"}
    with pytest.raises(ConfigError, match="valid axes: theta, operator, fusion, pe, cfim_init"):
        sweep_points(base, "depth")


# -- commands -----------------------------------------------------------------

def test_report(capsys):
    code, out, _ = run(capsys, "report", "--csv")
    assert code == 0
    rows = {r["arch"]: r for r in parse_csv(out)}
    assert rows["c-cdn-hv"]["param_ratio"] == "0.5556"
    assert rows["depthnet"]["params"] == rows["cdcn"]["params"]
    assert abs(float(rows["c-cdn-hv"]["mac_ratio"]) - 5 / 9) < 1e-3
    code, out, _ = run(capsys, "report")
    assert "0.5556" in out and "arch" in out.splitlines()[0]
    assert report_rows("tiny")[0]["arch"] == "depthnet"


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--csv")
    assert code == 0
    rows = parse_csv(out)
    assert all(r["status"] == "pass" for r in rows)
    names = {r["check"] for r in rows}
    assert {"conv-full-theta0", "cfim", "batchnorm", "loss", "network-dc-cdn"} <= names
    assert {f"conv-{p}-theta0.8" for p in ("full", "hv", "dg", "s1", "s2", "s3")} <= names


def test_gradcheck_detects_injected_fault(capsys):
    code, out, err = run(capsys, "gradcheck", "--csv", "--inject-fault", "conv-hv-theta0.8")
    assert code == 2
    failed = [r["check"] for r in parse_csv(out) if r["status"] == "FAIL"]
    assert failed == ["conv-hv-theta0.8"]
    assert "conv-hv-theta0.8" in err


def test_train_then_eval(tmp_path, capsys):
    out_dir = tmp_path / "t"
    code, out, _ = run(capsys, "train", *SMALL, "--set", "trainer.epochs=0", "--out", str(out_dir), "--csv")
    assert code == 0
    trained = parse_csv(out)[0]
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["seed"] == 0 and "[trainer]" in manifest["config_ini"]
    ckpt = str(out_dir / "checkpoint.ckpt")
    code1, out1, _ = run(capsys, "eval", *SMALL, "--checkpoint", ckpt, "--csv")
    code2, out2, _ = run(capsys, "eval", *SMALL, "--checkpoint", ckpt, "--csv")
    assert code1 == code2 == 0 and out1 == out2
    evaluated = parse_csv(out1)[0]
    # epochs=0: the checkpoint is the initialisation, so eval reproduces the train-time metrics
    assert {k: trained[k] for k in evaluated} == evaluated


def test_eval_errors(tmp_path, capsys):
    code, _, err = run(capsys, "eval")
    assert code == 1 and "checkpoint" in err
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "missing.ckpt"))
    assert code == 1 and "checkpoint" in err


def test_usage_errors_exit_1(capsys):
    code, _, err = run(capsys, "train", "--set", "network.theta=7")
    assert code == 1 and "network.theta" in err
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--axis", "bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_output_root_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CCDC_OUTPUT_ROOT", str(tmp_path / "root"))
    code, out, _ = run(capsys, "train", *SMALL, "--set", "trainer.epochs=0", "--csv")
    assert code == 0
    assert (tmp_path / "root" / "train" / "checkpoint.ckpt").exists()


def test_augment_command(tmp_path, capsys):
    from ccdc.data import generate_batch, load_batch, read_ppm, save_batch, SyntheticSceneConfig
    from ccdc.tensor import make_rng

    src = tmp_path / "in"
    save_batch(src, generate_batch(SyntheticSceneConfig(image_size=64), 4, 0.5, make_rng(0)))
    code, out, _ = run(capsys, "augment", "--input", str(src), "--out", str(tmp_path / "aug"),
                       "--set", "aug.pe_gamma=1", "--csv")
    assert code == 0
    aug = load_batch(tmp_path / "aug")
    assert aug.images.shape == (4, 3, 64, 64)
    assert read_ppm(tmp_path / "aug" / "preview.ppm").shape == (4 * 64 + 6, 4 * 64 + 6, 3)
    code, _, _ = run(capsys, "augment", "-n", "3", "--out", str(tmp_path / "syn"))
    assert code == 0 and load_batch(tmp_path / "syn").images.shape[0] == 3
    code, _, err = run(capsys, "augment", "--input", str(tmp_path / "nothing"))
    assert code == 1


def test_sweep_command(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--axis", "theta", "--values", "0,0.8", *SMALL,
                       "--set", "trainer.epochs=1", "--set", "trainer.batch_size=4",
                       "--out", str(tmp_path / "sw"), "--csv")
    assert code == 0
    rows = parse_csv(out)
    assert [r["point"] for r in rows] == ["theta=0", "theta=0.8"]
    assert (tmp_path / "sw" / "sweep.csv").read_text() == out
    assert (tmp_path / "sw" / "theta_0.8" / "report.csv").exists()


def test_cli_determinism(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", *SMALL, "--set", "trainer.epochs=1", "--set", "trainer.batch_size=2",
                           "--out", str(tmp_path / name), "--csv")
        assert code == 0
        outs.append(out.replace(str(tmp_path / name), ""))
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    assert np.array_equal(np.frombuffer((tmp_path / "a" / "checkpoint.ckpt").read_bytes(), np.uint8),
                          np.frombuffer((tmp_path / "b" / "checkpoint.ckpt").read_bytes(), np.uint8))
