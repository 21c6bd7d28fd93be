import json
from pathlib import Path

import numpy as np
import pytest

from far_ts.cli import main
from far_ts.errors import ConfigError
from far_ts.io import load_checkpoint
from far_ts.runconfig import DEFAULTS, load_run_config

TINY = {
    "data": {"window_length": 16, "synthetic": {"num_channels": 4, "rank": 2, "num_windows": 120, "num_prototypes": 8}},
    "vq": {"rank": 2, "codebook_size": 16, "encoder_hidden_dims": [16], "decoder_channels": 8},
    "ar": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_context": 64},
    "training": {"stage1": {"lr": 1e-3, "epochs": 2, "batch_size": 64},
                 "stage2": {"lr": 1e-3, "epochs": 2, "batch_size": 32}},
}


def write_config(tmp: Path, out: Path, **extra) -> Path:
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(out)
    cfg.update(extra)
    p = tmp / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "run"
    cfg = write_config(tmp, out)
    for cmd in ("train-vq", "tokenize", "train-ar"):
        assert run(cmd, "--config", cfg) == 0
    return tmp, cfg, out


# -- config ---------------------------------------------------------------------------------------

def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"training": {"stage1": {"learning_rate": 1}}}))
    with pytest.raises(ConfigError):
        load_run_config(p)


def test_overrides_apply_and_validate():
    cfg = load_run_config(None, ["training.stage1.epochs=7", "output_dir=x"])
    assert cfg["training"]["stage1"]["epochs"] == 7 and cfg["output_dir"] == "x"
    with pytest.raises(ConfigError):
        load_run_config(None, ["ar.n_heads=5"])


def test_defaults_use_full_size_settings():
    assert DEFAULTS["training"]["stage1"] == {"lr": 1e-4, "epochs": 100, "batch_size": 128, "adam_betas": [0.9, 0.999]}
    assert DEFAULTS["training"]["stage2"] == {"lr": 1e-4, "epochs": 200, "batch_size": 64, "adam_betas": [0.9, 0.95]}
    assert (DEFAULTS["vq"]["rank"], DEFAULTS["vq"]["codebook_size"], DEFAULTS["vq"]["commitment_beta"]) == (32, 4096, 0.25)
    assert (DEFAULTS["ar"]["d_model"], DEFAULTS["ar"]["n_layers"], DEFAULTS["ar"]["n_heads"]) == (192, 6, 6)


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"vq": {"rankk": 3}}')
    assert run("train-vq", "--config", p) == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config"


def test_missing_checkpoint_exit_code(tmp_path):
    cfg = write_config(tmp_path, tmp_path / "empty")
    assert run("generate", "--config", cfg) == 2


# -- pipeline through the CLI -------------------------------------------------------------------------

def test_progress_lines_are_json(tmp_path, capsys):
    cfg = write_config(tmp_path, tmp_path / "p")
    assert run("train-vq", "--config", cfg) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    recs = [json.loads(l) for l in lines]
    assert [r["epoch"] for r in recs if "epoch" in r] == [1, 2]


def test_generate_longer_than_training(trained, capsys):
    tmp, cfg, out = trained
    assert run("generate", "--config", cfg, "--length", 32, "--num-samples", 2, "--subdir", "g32") == 0
    files = sorted((out / "g32").glob("*.csv"))
    assert len(files) == 2
    rows = files[0].read_text().strip().splitlines()
    assert rows[0] == "ch0,ch1,ch2,ch3"
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    assert data.shape == (32, 4) and np.all(np.isfinite(data))


def test_generate_rejects_escaping_subdir(trained):
    tmp, cfg, out = trained
    assert run("generate", "--config", cfg, "--subdir", "../elsewhere") == 3
    assert not (tmp / "elsewhere").exists()


def test_generate_normalized_flag(trained):
    tmp, cfg, out = trained
    assert run("generate", "--config", cfg, "--normalized", "--subdir", "gn", "--seed", 1) == 0
    assert run("generate", "--config", cfg, "--subdir", "gr", "--seed", 1) == 0
    n = np.loadtxt(out / "gn" / "sample_00000.csv", delimiter=",", skiprows=1)
    r = np.loadtxt(out / "gr" / "sample_00000.csv", delimiter=",", skiprows=1)
    ck = load_checkpoint(out / "vq.ckpt")
    lo, hi = np.array(ck.metadata["normalizer"]["min"]), np.array(ck.metadata["normalizer"]["max"])
    np.testing.assert_allclose(r, n * (hi - lo + 1e-8) + lo, rtol=1e-6, atol=1e-6)


def test_forecast_with_truth(trained):
    tmp, cfg, out = trained
    held = sorted((out / "heldout").glob("*.csv"))
    assert run("forecast", "--config", cfg, "--input", held[0], "--horizon", 4, "--truth", held[1]) == 0
    doc = json.loads((out / "forecast_metrics.json").read_text())
    assert doc["rmse"] >= doc["mae"] >= 0
    assert len((out / "forecast.csv").read_text().strip().splitlines()) == 5


def test_evaluate_same_dirs(trained, tmp_path):
    tmp, cfg, out = trained
    src = out / "heldout"
    real = tmp_path / "real"
    real.mkdir()
    # enough windows for the embedding covariance
    for i in range(40):
        f = sorted(src.glob("*.csv"))[i % len(list(src.glob("*.csv")))]
        (real / f"w{i:03d}.csv").write_text(f.read_text())
    eo = tmp_path / "eval"
    assert run("evaluate", "--config", cfg, "--output-dir", eo, "--real", real, "--synth", real, "--repeats", 1) == 0
    rep = json.loads((eo / "metrics.json").read_text())
    assert rep["context_fid"]["mean"] < 1e-6
    assert rep["correlational"]["mean"] == 0.0


def test_inspect_outputs(trained):
    tmp, cfg, out = trained
    assert run("inspect", "--config", cfg) == 0
    basis = (out / "inspect" / "basis_class0.csv").read_text().splitlines()
    assert basis[0] == "channel_index,u0,u1" and len(basis) == 5
    usage = (out / "inspect" / "codebook_usage.csv").read_text().splitlines()
    assert len(usage) == 17


def test_bench_writes_timings(trained):
    tmp, cfg, out = trained
    assert run("bench", "--config", cfg, "--lengths", "8,16", "--repeats", 1) == 0
    rows = (out / "bench.csv").read_text().strip().splitlines()
    assert rows[0] == "length,seconds,seconds_per_step" and len(rows) == 3


def test_lock_blocks_second_training_job(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("1")
    cfg = write_config(tmp_path, out)
    assert run("train-vq", "--config", cfg) == 5
    assert not (out / "vq.ckpt").exists()


def test_stale_corpus_detected(tmp_path):
    out = tmp_path / "s"
    cfg = write_config(tmp_path, out)
    assert run("train-vq", "--config", cfg) == 0
    assert run("tokenize", "--config", cfg) == 0
    assert run("train-vq", "--config", cfg, "--set", "training.seed=5") == 0
    assert run("train-ar", "--config", cfg) == 3


def test_outputs_stay_in_output_dir_and_reproduce(tmp_path):
    files = {}
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        out = root / "out"
        cfg = write_config(root, out)
        for cmd in (("train-vq",), ("tokenize",), ("train-ar",), ("generate", "--num-samples", 2, "--length", 20)):
            assert run(cmd[0], "--config", cfg, *cmd[1:]) == 0
        assert sorted(p.name for p in root.iterdir()) == ["cfg.json", "out"]
        files[name] = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert files["a"].keys() == files["b"].keys()
    for k in files["a"]:
        assert files["a"][k] == files["b"][k], k
