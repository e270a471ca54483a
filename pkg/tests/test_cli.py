"""Command line interface: exit codes and the end-to-end pipeline."""

import json

import pytest

from multigrain.cli import RunConfig, ConfigError, main


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", "x.jsonl"])  # --gold missing
    assert exc.value.code == 2


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"no_such_option": 1}))
    code = main(
        ["--config", str(cfg), "synth", "--out", str(tmp_path / "a"), "--gold", str(tmp_path / "b")]
    )
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, capsys):
    code = main(
        [
            "predict",
            "--checkpoint", str(tmp_path / "missing.ckpt"),
            "--vocab", str(tmp_path / "missing.txt"),
            "--instances", str(tmp_path / "missing.jsonl"),
            "--out", str(tmp_path / "out.jsonl"),
        ]
    )
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_flat_config_routes_keys():
    rc = RunConfig.from_flat({"d_h": 16, "total_steps": 7, "n_docs": 5, "keep_prob": 0.5})
    assert rc.encoder.d_h == 16
    assert rc.train.total_steps == 7
    assert rc.corpus.n_docs == 5
    assert rc.preprocess.keep_prob == 0.5


def test_seed_flag_overrides_sections():
    rc = RunConfig.from_flat({}, seed=42)
    assert rc.train.seed == 42 and rc.corpus.seed == 42 and rc.preprocess.seed == 42


def test_shared_key_lands_in_both_sections():
    rc = RunConfig.from_flat({"seed": 3})
    assert rc.train.seed == 3 and rc.corpus.seed == 3


def test_bad_config_value_raises_config_error():
    with pytest.raises(ConfigError):
        RunConfig.from_flat({"answerable_frac": 2.0})


def test_end_to_end_pipeline(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "n_docs": 6,
                "total_steps": 3,
                "batch_size": 2,
                "d_h": 8,
                "m": 2,
                "n_layers": 1,
                "d_ff": 16,
                "keep_prob": 1.0,
            }
        )
    )
    raw = tmp_path / "raw.jsonl"
    gold = tmp_path / "gold.jsonl"
    vocab = tmp_path / "vocab.txt"
    inst = tmp_path / "inst.jsonl"
    ckpt = tmp_path / "model.ckpt"
    preds = tmp_path / "preds.jsonl"
    report = tmp_path / "report.json"
    c = str(cfg)

    assert main(["--config", c, "synth", "--out", str(raw), "--gold", str(gold), "--vocab", str(vocab)]) == 0
    assert main(["--config", c, "preprocess", "--vocab", str(vocab), "--input", str(raw), "--output", str(inst)]) == 0
    assert main(["--config", c, "train", "--vocab", str(vocab), "--instances", str(inst), "--out", str(ckpt)]) == 0
    assert main(["predict", "--checkpoint", str(ckpt), "--vocab", str(vocab), "--instances", str(inst), "--out", str(preds)]) == 0
    assert main(["eval", "--predictions", str(preds), "--gold", str(gold), "--out", str(report)]) == 0

    out = capsys.readouterr().out
    assert "long answer" in out and "short answer" in out
    obj = json.loads(report.read_text())
    assert set(obj) == {"long", "short"}
    for line in preds.read_text().splitlines():
        json.loads(line)


def test_selftest_subcommand():
    assert main(["selftest"]) == 0
