import filecmp

import numpy as np
import pytest

from gazerep import cli
from gazerep.checkpoint import save_checkpoint
from gazerep.model import Autoencoder, ModelConfig


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_flag_overrides_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 3\ntrain:\n  epochs: 5\n  lr: 0.001\n")
    rc = cli.parse_config(cfg, {"epochs": 7}, "train")
    assert rc["epochs"] == 7 and rc["seed"] == 3 and rc["lr"] == 0.001


def test_defaults_without_file():
    rc = cli.parse_config(None, {}, "train")
    assert rc["lr"] == 5e-4 and rc["seed"] == 0 and rc["modality"] == "vel"


def test_unknown_key_is_named(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  learning_rat: 0.1\n")
    with pytest.raises(cli.ConfigError, match="learning_rat"):
        cli.parse_config(cfg, {}, "train")
    cfg.write_text("trian:\n  epochs: 1\n")
    with pytest.raises(cli.ConfigError, match="trian"):
        cli.parse_config(cfg, {}, "train")


def test_type_conflicts_and_malformed_files(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochs: five\n")
    with pytest.raises(cli.ConfigError, match="epochs"):
        cli.parse_config(cfg, {}, "train")
    cfg.write_text("train: [unclosed\n")
    with pytest.raises(cli.ConfigError, match="malformed"):
        cli.parse_config(cfg, {}, "train")
    with pytest.raises(cli.ConfigError, match="not found"):
        cli.parse_config(tmp_path / "missing.yaml", {}, "train")
    # integers are accepted where floats are expected
    cfg.write_text("train:\n  lr: 1\n")
    assert cli.parse_config(cfg, {}, "train")["lr"] == 1.0


def test_bundled_config_parses_for_every_command():
    for command in cli.DEFAULTS:
        cli.parse_config(cli.BUNDLED_CONFIG, {}, command)


@pytest.mark.parametrize("command", list(cli.DEFAULTS))
def test_help_documents_every_flag(command, capsys):
    assert run(command, "--help") == 0
    out = capsys.readouterr().out
    for key in cli.DEFAULTS[command]:
        assert f"--{key.replace('_', '-')}" in out


def test_unknown_command_exits_2(capsys):
    assert run("frobnicate") == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert run("prep", "--in", tmp_path / "nowhere", "--out", tmp_path / "o") == 1
    assert "error" in capsys.readouterr().err
    assert run("audit") == 1


def test_audit_preset_flags_reference_total(capsys):
    assert run("audit", "--preset", "pos") == 0
    out = capsys.readouterr().out
    assert "652,228" in out and "[OK]" in out and "encoder conv" in out
    assert "3, 5, 9, 17, 33, 65, 129, 257" in out


def test_audit_checkpoint(tmp_path, capsys):
    path = save_checkpoint(tmp_path / "p.ckpt", Autoencoder(ModelConfig.position()))
    assert run("audit", "--ckpt", path) == 0
    assert "652,228" in capsys.readouterr().out


def test_pipeline_and_idempotence(tmp_path):
    raw, data = tmp_path / "raw", tmp_path / "data"
    assert run("synth", "--subjects", 2, "--classes", 2, "--trials", 3, "--duration-s", 2.0,
               "--rate-hz", 1000, "--seed", 1, "--out", raw) == 0
    assert len(list(raw.glob("*.csv"))) == 12
    assert run("prep", "--in", raw, "--out", data) == 0
    common = ["--in", data, "--filters", 4, "--epochs", 2, "--batch-size", 4, "--max-windows", 8]
    for mod in ("pos", "vel"):
        assert run("train", "--modality", mod, "--out", tmp_path / f"{mod}.ckpt", *common) == 0
    assert run("train", "--modality", "vel", "--out", tmp_path / "vel2.ckpt", *common) == 0
    assert filecmp.cmp(tmp_path / "vel.ckpt", tmp_path / "vel2.ckpt", shallow=False)
    assert (tmp_path / "vel.ckpt.train.yaml").exists()

    three = tmp_path / "three"
    three.mkdir()
    for p in sorted(data.glob("*.csv"))[:3]:
        (three / p.name).write_bytes(p.read_bytes())
        (three / p.with_suffix(".manifest").name).write_bytes(p.with_suffix(".manifest").read_bytes())
    assert run("encode", "--ckpt-vel", tmp_path / "vel.ckpt", "--in", three, "--out", tmp_path / "z3.csv") == 0
    lines = (tmp_path / "z3.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("trial_id,subject_id,stimulus_id,dataset_id,z_0,")
    assert len(lines[0].split(",")) == 4 + 128

    for name in ("z.csv", "z_again.csv"):
        assert run("encode", "--ckpt-pos", tmp_path / "pos.ckpt", "--ckpt-vel", tmp_path / "vel.ckpt",
                   "--in", data, "--out", tmp_path / name) == 0
    assert filecmp.cmp(tmp_path / "z.csv", tmp_path / "z_again.csv", shallow=False)
    table = cli.read_representation_table(tmp_path / "z.csv")
    assert table.z.shape == (12, 256) and set(table.sources) == {"z_p", "z_v", "z_pv"}

    assert run("eval", "--repr", tmp_path / "z.csv", "--task", "subject", "--cv", "kfold:3",
               "--trials", data, "--out", tmp_path / "report.txt") == 0
    report = (tmp_path / "report.txt").read_text()
    for source in ("z_p", "z_v", "z_pv", "pca_pv"):
        assert f"subject,{source},0," in report
    assert "shuffled labels" in report and "feature counts" in report
    assert run("eval", "--repr", tmp_path / "z.csv", "--task", "stimulus", "--cv", "loocv",
               "--source", "z_v", "--permutation", "false", "--out", tmp_path / "r2.txt") == 0


def test_resume_continues_to_target_epoch(tmp_path, capsys):
    raw = tmp_path / "raw"
    assert run("synth", "--subjects", 2, "--classes", 1, "--trials", 2, "--duration-s", 2.0, "--out", raw) == 0
    common = ["--modality", "vel", "--in", raw, "--filters", 4, "--batch-size", 2, "--max-windows", 4]
    assert run("train", *common, "--epochs", 3, "--out", tmp_path / "full.ckpt") == 0
    assert run("train", *common, "--epochs", 1, "--out", tmp_path / "part.ckpt") == 0
    assert run("train", *common, "--epochs", 3, "--resume", tmp_path / "part.ckpt",
               "--out", tmp_path / "resumed.ckpt") == 0
    assert filecmp.cmp(tmp_path / "full.ckpt", tmp_path / "resumed.ckpt", shallow=False)


def test_train_rejects_non_canonical_rate(tmp_path):
    raw = tmp_path / "raw"
    assert run("synth", "--subjects", 1, "--classes", 1, "--trials", 1, "--rate-hz", 1000, "--out", raw) == 0
    assert run("train", "--in", raw, "--out", tmp_path / "x.ckpt", "--filters", 4) == 1


def test_representation_values_use_nine_significant_digits(tmp_path):
    from gazerep.evaluation import RepresentationTable
    table = RepresentationTable(np.array([[1 / 3, 2e-10]]), [dict(trial_id="t", subject_id="s", stimulus_id="c",
                                                                  dataset_id="d")], {"z_v": (0, 2)})
    cli.write_representation_table(tmp_path / "z.csv", table)
    row = (tmp_path / "z.csv").read_text().splitlines()[1]
    assert row == "t,s,c,d,0.333333333,2e-10"
