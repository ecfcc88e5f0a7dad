import math

import numpy as np
import pytest

from pdsa import cli
from pdsa.data import ShapeSpec, generate_shape, read_cloud, write_cloud
from pdsa.tensor import load_checkpoint

TINY = ["--data.n_points", "64", "--data.train_per_class", "4", "--data.test_per_class", "2",
        "--model.stages", "4:0.4:8,2:0.8:8", "--model.channels", "8", "--train.batch", "8"]


def run(tmp_path, command, *extra, out="out"):
    return cli.main([command, *TINY, "--io.output_dir", str(tmp_path / out), *extra])


def read_log(path):
    lines = path.read_text().splitlines()
    return lines[0], [dict(zip(lines[0].split(","), map(float, l.split(",")))) for l in lines[1:]]


def test_zero_epochs_writes_initial_checkpoint(tmp_path):
    assert run(tmp_path, "train", "--train.epochs", "0") == 0
    header, rows = read_log(tmp_path / "out" / "log.csv")
    assert header == "epoch,loss,train_acc,test_acc" and rows == []
    assert load_checkpoint(tmp_path / "out" / "final.ckpt")
    assert (tmp_path / "out" / "config.txt").read_text().count("=") == len(cli.SCHEMA)


def test_training_is_deterministic_and_eval_reproduces_log(tmp_path, capsys):
    assert run(tmp_path, "train", "--train.epochs", "2", out="a") == 0
    assert run(tmp_path, "train", "--train.epochs", "2", out="b") == 0
    _, a = read_log(tmp_path / "a" / "log.csv")
    _, b = read_log(tmp_path / "b" / "log.csv")
    assert a == b and len(a) == 2
    capsys.readouterr()
    assert run(tmp_path, "eval", out="a") == 0
    out = capsys.readouterr().out
    oa = float(out.split("oa ")[1].split()[0])
    assert oa == a[-1]["test_acc"]
    assert (tmp_path / "a" / "metrics.csv").read_text().startswith("class,tp,fp,fn,iou")


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy\ntrain.epochs = 1\ntrain.seed = 3\nmodel.cics = false\n")
    assert cli.main(["train", "--config", str(cfg), *TINY, "--train.seed", "4",
                     "--io.output_dir", str(tmp_path / "o")]) == 0
    echoed = cli.parse_config_text((tmp_path / "o" / "config.txt").read_text())
    assert echoed["train.epochs"] == 1 and echoed["train.seed"] == 4 and echoed["model.cics"] is False


def test_unknown_key_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "typo.cfg"
    cfg.write_text("train.epoch = 3\n")
    assert cli.main(["train", "--config", str(cfg), "--io.output_dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "unknown key 'train.epoch'" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--train.epoch", "3"])
    assert exc.value.code == 2


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for key, (_, default, _) in cli.SCHEMA.items():
        assert f"--{key}" in text
        if key != "io.output_dir":
            assert f"(default: {default})" in " ".join(text.split())


def test_env_var_sets_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUTPUT_DIR, str(tmp_path / "envdir"))
    assert cli.main(["train", *TINY, "--train.epochs", "0"]) == 0
    assert (tmp_path / "envdir" / "final.ckpt").exists()


def test_missing_checkpoint_and_bad_dirs(tmp_path):
    assert run(tmp_path, "eval", "--io.checkpoint", str(tmp_path / "nope.ckpt")) == cli.EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["train", *TINY, "--train.epochs", "0", "--io.output_dir", str(blocker / "sub")]) == cli.EXIT_IO


def test_incompatible_checkpoint_names_parameter(tmp_path, capsys):
    assert run(tmp_path, "train", "--train.epochs", "0") == 0
    code = run(tmp_path, "eval", "--model.channels", "4")
    assert code == cli.EXIT_CHECKPOINT
    assert "stages.0.embed.linears.0.weight" in capsys.readouterr().err


def test_nonfinite_loss_exits_nonzero(tmp_path, capsys):
    assert run(tmp_path, "train", "--train.epochs", "2", "--train.lr", "1e300") == cli.EXIT_NUMERIC
    assert "numeric fault" in capsys.readouterr().err


def test_threads_give_matching_training(tmp_path):
    assert run(tmp_path, "train", "--train.epochs", "1", out="t1") == 0
    assert run(tmp_path, "train", "--train.epochs", "1", "--train.threads", "2", out="t2") == 0
    _, a = read_log(tmp_path / "t1" / "log.csv")
    _, b = read_log(tmp_path / "t2" / "log.csv")
    assert abs(a[0]["loss"] - b[0]["loss"]) < 1e-4


def test_ablate_smoke(tmp_path, capsys):
    assert run(tmp_path, "ablate", "--ablate.seeds", "0", "--train.epochs", "0", "--ablate.var_samples", "8") == 0
    lines = (tmp_path / "out" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,seed,test_oa,mean_nbr_var"
    assert [l.split(",")[0] for l in lines[1:]] == ["baseline", "+CDIP", "+CDIP+Dw", "+CDIP+Dw+CICS"]
    for line in lines[1:]:
        _, _, oa, var = line.split(",")
        assert 0.0 <= float(oa) <= 1.0 and math.isfinite(float(var))


def test_ablate_descriptor_width_sweep(tmp_path):
    assert run(tmp_path, "ablate", "--ablate.sweep", "a_dim", "--ablate.seeds", "0",
               "--train.epochs", "1", "--ablate.var_samples", "8") == 0
    lines = (tmp_path / "out" / "ablation.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["a_dim=1", "a_dim=2", "a_dim=3", "a_dim=4"]


def test_inspect_writes_heat_and_keys(tmp_path, capsys):
    assert run(tmp_path, "train", "--train.epochs", "1") == 0
    src = tmp_path / "cube.ply"
    write_cloud(src, generate_shape(ShapeSpec("cube", 64, 0.0, seed=1)))
    assert run(tmp_path, "inspect", "--inspect.input", str(src), "--inspect.rho", "1.0") == 0
    heat = read_cloud(tmp_path / "out" / "cube_heat.ply")
    keys = read_cloud(tmp_path / "out" / "cube_keys.ply")
    assert heat.n == 64
    assert heat.scalars["heat"].min() >= 0 and heat.scalars["heat"].max() <= 1
    assert keys.n == math.ceil(1.0 * 16)
    assert run(tmp_path, "inspect", "--inspect.input", str(tmp_path / "missing.ply")) == cli.EXIT_IO
