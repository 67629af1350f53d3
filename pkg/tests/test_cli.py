import json
import subprocess
import sys

import pytest

from jamdetect import synth as S
from jamdetect import tokenizer as T
from jamdetect.cli import main, parse_config_text, UsageError

TOY_CFG = """\
# tiny end-to-end run
scenarios = 2
length = 330
window = 16
encoder_dims = 16, 8, 8
decoder_dims = 8, 8, 16
n_heads = 4
epochs = 1
n_chunks = 2
base_batch = 16
warmup_epochs = 1
"""


@pytest.fixture
def toy_cfg(tmp_path):
    p = tmp_path / "toy.cfg"
    p.write_text(TOY_CFG)
    return p


def test_generate_writes_csv_and_sidecar(tmp_path, capsys):
    out = tmp_path / "nlos.csv"
    code = main(["generate", "--condition", "nlos", "--attackers", "2", "--length", "5000",
                 "--seed", "7", "--out", str(out)])
    assert code == 0
    rec = S.load(out)
    assert len(rec) == 5000 and rec.config.condition == "NLoS" and rec.config.attackers == 2
    assert S.sidecar_path(out).exists()
    assert "wrote" in capsys.readouterr().out


def test_generate_default_name(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["--seed", "3", "generate", "--length", "400"]) == 0
    assert (tmp_path / "los_a0_s3.csv").exists()


def test_missing_input_is_a_usage_error(tmp_path, capsys):
    assert main(["featurize", "--bundle", str(tmp_path / "b.json")]) == 1
    assert "--input" in capsys.readouterr().err


def test_unknown_flag_is_a_usage_error():
    assert main(["generate", "--bogus"]) == 1


def test_invalid_scenario_is_a_contract_error(tmp_path):
    assert main(["generate", "--length", "10", "--out", str(tmp_path / "x.csv")]) == 1


def test_missing_file_is_an_io_error(tmp_path):
    assert main(["featurize", "--input", str(tmp_path / "absent.csv"), "--bundle", "b.json"]) == 2


def test_unknown_config_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("colour = blue\n")
    assert main(["--config", str(p), "generate"]) == 1
    with pytest.raises(UsageError):
        parse_config_text("window\n")


def test_config_text_forms():
    flat = parse_config_text("window = 16\nencoder_dims = 16,8,8  # dims\nunrestricted = yes\n")
    assert flat == {"window": 16, "encoder_dims": (16, 8, 8), "unrestricted": True}
    assert parse_config_text('{"window": 16, "lr_peak": 0.001}') == {"window": 16, "lr_peak": 0.001}


def test_featurize_and_tokenize(tmp_path):
    rec = tmp_path / "r.csv"
    assert main(["generate", "--length", "340", "--attackers", "1", "--out", str(rec), "--quiet"]) == 0
    bundle = tmp_path / "bundle.json"
    enhanced = tmp_path / "enh.csv"
    assert main(["featurize", "--input", str(rec), "--bundle", str(bundle), "--fit",
                 "--out", str(enhanced)]) == 0
    assert bundle.exists()
    rows = enhanced.read_text().splitlines()
    assert rows[0].startswith("record,signal,row") and len(rows) == 1 + 2 * 41

    assert main(["tokenize", "--input", str(rec), "--bundle", str(bundle),
                 "--out-dir", str(tmp_path / "tok")]) == 0
    seqs = T.load_sequences(tmp_path / "tok" / "tokens.csv")
    assert len(seqs) == 41 and len(seqs[0]) == 692

    assert main(["tokenize", "--input", str(rec), "--out-dir", str(tmp_path / "splits")]) == 0
    for name in ("train", "val", "test"):
        assert (tmp_path / "splits" / f"{name}.csv").exists()


def test_train_evaluate_report(tmp_path, toy_cfg, capsys):
    work = tmp_path / "run"
    assert main(["train", "--config", str(toy_cfg), "--workdir", str(work), "--seed", "1", "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "model parameters:" in out
    for name in ("model.npz", "ema.npz", "state.npz", "history.csv", "history.json"):
        assert (work / name).exists(), name

    assert main(["evaluate", "--workdir", str(work)]) == 0
    metrics = json.loads((work / "metrics.json").read_text())
    assert 0.0 <= metrics["metrics"]["accuracy"] <= 1.0

    assert main(["evaluate", "--workdir", str(work), "--ema", "--format", "csv"]) == 0
    assert (work / "metrics.csv").exists()

    capsys.readouterr()
    assert main(["report", "--input", str(work / "metrics.json"), "--out", str(tmp_path / "r.csv")]) == 0
    assert "distance_m" in capsys.readouterr().out
    assert (tmp_path / "r.csv").exists()


def test_resume_extends_history(tmp_path, toy_cfg):
    work = tmp_path / "run"
    assert main(["train", "--config", str(toy_cfg), "--workdir", str(work), "--quiet"]) == 0
    assert main(["train", "--config", str(toy_cfg), "--workdir", str(work), "--data", str(work / "data"),
                 "--epochs", "2", "--resume", str(work / "state.npz"), "--quiet"]) == 0
    hist = json.loads((work / "history.json").read_text())
    assert [h["epoch"] for h in hist] == [0, 1]


def test_evaluate_without_model_is_io_error(tmp_path):
    assert main(["evaluate", "--workdir", str(tmp_path)]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "jamdetect", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
