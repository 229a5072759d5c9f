import csv
import json

import numpy as np
import pytest

from ssbcodebook.cli import main
from ssbcodebook.config import load_config
from ssbcodebook.formats import file_size, read_episodes
from ssbcodebook.neural_core import load_model
from ssbcodebook.seeding import substream
from ssbcodebook.ssb_encoder import build_model

TINY = """
[encoder]
widths = [8, 8]
batch_size = 16
max_epochs = 3
[run]
n_episodes = 3
shard_size = 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


@pytest.fixture
def dataset(tmp_path, cfg_path):
    out = tmp_path / "data"
    assert main(["--config", cfg_path, "--seed", "5", "--quiet", "generate", "--out", str(out)]) == 0
    return str(out)


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_generate_writes_shards_and_manifest(dataset, cfg_path):
    with open(f"{dataset}/manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["n_episodes"] == 3 and manifest["seed"] == 5
    cfg = load_config(cfg_path).with_seed(5)
    assert manifest["config_digest"] == cfg.scenario.digest()
    assert [s["count"] for s in manifest["shards"]] == [2, 1]
    for shard in manifest["shards"]:
        path = f"{dataset}/{shard['file']}"
        eps, digest = read_episodes(path)
        assert digest == manifest["config_digest"]
        assert [e.index for e in eps] == list(range(shard["first_index"],
                                                    shard["first_index"] + shard["count"]))
        with open(path, "rb") as fh:
            assert len(fh.read()) == file_size([e.channels.shape for e in eps])


def test_generate_is_byte_identical(tmp_path, cfg_path, dataset):
    again = tmp_path / "again"
    assert run("--config", cfg_path, "--seed", 5, "--quiet", "generate", "--out", again) == 0
    for name in ("manifest.json", "episodes-0000.ssbd", "episodes-0001.ssbd"):
        assert (again / name).read_bytes() == open(f"{dataset}/{name}", "rb").read()


def test_generate_unwritable_directory(tmp_path, cfg_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("--config", cfg_path, "generate", "--out", blocker / "sub") == 2
    assert "not writable" in capsys.readouterr().err
    assert not (blocker.parent / "sub").exists()


def test_digest_echoed_even_when_quiet(tmp_path, cfg_path, capsys):
    run("--config", cfg_path, "--quiet", "--seed", 1, "beams", "--dft", "--out", tmp_path / "b.csv")
    digest = load_config(cfg_path).with_seed(1).digest()
    assert f"config digest {digest}" in capsys.readouterr().out


def test_train_smoke(tmp_path, cfg_path, dataset, capsys):
    model = tmp_path / "m" / "model.ssbm"
    assert run("--config", cfg_path, "--seed", 5, "train", "--data", dataset, "--out", model) == 0
    rows = read_rows(tmp_path / "m" / "history.csv")
    assert rows[0] == ["epoch", "train_mse", "val_mse", "lr"]
    assert len(rows) - 1 >= 2
    train_mse = [float(r[1]) for r in rows[1:]]
    assert train_mse[-1] < train_mse[0]
    assert "final train_mse" in capsys.readouterr().out
    assert load_model(model).n_params() > 0


def test_train_zero_epochs_saves_initial_model(tmp_path, cfg_path, dataset):
    model = tmp_path / "init.ssbm"
    assert run("--config", cfg_path, "--seed", 5, "train", "--data", dataset, "--out", model,
               "--epochs", 0) == 0
    expected = build_model(load_config(cfg_path).encoder, substream(5, "init"))
    for p, q in zip(load_model(model).params(), expected.params()):
        np.testing.assert_array_equal(p, q)


def test_train_missing_dataset(tmp_path, cfg_path, capsys):
    assert run("--config", cfg_path, "train", "--data", tmp_path / "nope") == 2
    assert "no dataset" in capsys.readouterr().err


def test_train_divergence_exits_3(tmp_path, dataset, capsys):
    cfg = tmp_path / "wild.ini"
    cfg.write_text(TINY.replace("batch_size = 16", "batch_size = 16\nlearning_rate = 1e30"))
    assert run("--config", cfg, "--seed", 5, "train", "--data", dataset,
               "--out", tmp_path / "x.ssbm") == 3
    assert "diverged" in capsys.readouterr().err


def test_eval_full_and_partial(tmp_path, cfg_path, dataset, capsys):
    model = tmp_path / "model.ssbm"
    run("--config", cfg_path, "--seed", 5, "--quiet", "train", "--data", dataset, "--out", model)
    capsys.readouterr()
    out = tmp_path / "report"
    assert run("--config", cfg_path, "--seed", 5, "eval", "--data", dataset, "--model", model,
               "--out", out) == 0
    summary = capsys.readouterr().out
    for policy in ("dft", "encoder", "svd"):
        assert policy in summary
    assert summary.count("gap recovery") == 1
    assert "bound violations 0" in summary
    report = read_rows(out / "report.csv")
    assert report[0] == ["episode", "t", "policy", "mean_rsrp_db", "n_active", "beam_indices"]
    assert {r[2] for r in report[1:]} == {"dft", "encoder", "svd"}
    hist = read_rows(out / "histogram.csv")
    assert hist[0] == ["beam", "fraction", "policy"] and len(hist) == 1 + 16
    sim = read_rows(out / "similarity.csv")
    assert sim[0] == ["i", "j", "value", "policy"] and len(sim) == 1 + 128

    part = tmp_path / "partial"
    assert run("--config", cfg_path, "eval", "--data", dataset, "--policies", "dft,svd",
               "--out", part) == 0
    assert "gap recovery" not in capsys.readouterr().out


def test_eval_errors(tmp_path, cfg_path, dataset, capsys):
    assert run("--config", cfg_path, "eval", "--data", dataset, "--policies", "dft,magic") == 2
    assert "unknown policy magic" in capsys.readouterr().err
    assert run("--config", cfg_path, "eval", "--data", dataset, "--policies", "encoder") == 2
    bad = tmp_path / "bad.ssbm"
    bad.write_bytes(b"nope")
    assert run("--config", cfg_path, "eval", "--data", dataset, "--model", bad) == 2


def test_beams_dft_peak(tmp_path, cfg_path):
    out = tmp_path / "beam.csv"
    assert run("--config", cfg_path, "--quiet", "beams", "--dft", "--index", 0, "--refine", 8,
               "--out", out) == 0
    rows = read_rows(out)
    assert rows[0] == ["az_deg", "el_deg", "gain_db"]
    assert len(rows) - 1 == 64 * 64
    assert max(float(r[2]) for r in rows[1:]) == pytest.approx(10 * np.log10(64), abs=0.1)
    assert run("--config", cfg_path, "--quiet", "beams", "--dft", "--out", out) == 0
    assert len(read_rows(out)) - 1 == 64


def test_beams_errors(tmp_path, cfg_path):
    out = tmp_path / "b.csv"
    assert run("--config", cfg_path, "beams", "--dft", "--index", 8, "--out", out) == 2
    assert run("--config", cfg_path, "beams", "--out", out) == 2
    assert run("--config", cfg_path, "beams", "--dft", "--refine", 0, "--out", out) == 2


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[scenario]\nwhatever = 1\n")
    assert main(["--config", str(bad), "beams", "--dft"]) == 2
    assert "whatever" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.ini"), "beams", "--dft"]) == 2
    assert main(["--seed", "-4", "beams", "--dft"]) == 2
