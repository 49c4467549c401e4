import json

import pytest

from c2r.cli import main

TINY = {"data.n_train": 30, "data.n_val": 15, "data.n_test": 15, "model.d": 8,
        "model.n_layers": 2, "optim.batch_size": 16, "optim.epochs": 1, "seeds": [0, 1]}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def err_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_data_manifest_and_checksums(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert run("gen-data", "--config", cfg_file, "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == {"train", "val", "test"}
    assert manifest["files"]["test"]["bias"] == pytest.approx(1 / 3)
    assert run("gen-data", "--config", cfg_file, "--out", tmp_path / "again") == 0
    again = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert again["files"] == manifest["files"]


def test_gen_data_refuses_overwrite(tmp_path, cfg_file, capsys):
    out = tmp_path / "data"
    assert run("gen-data", "--config", cfg_file, "--out", out) == 0
    assert run("gen-data", "--config", cfg_file, "--out", out) != 0
    assert "force" in err_json(capsys)["message"]
    assert run("gen-data", "--config", cfg_file, "--out", out, "--force") == 0


def test_gen_data_rejects_low_bias(tmp_path, cfg_file, capsys):
    assert run("gen-data", "--config", cfg_file, "--set", "data.bias=0.2", "--out", tmp_path) != 0
    assert err_json(capsys)["error"] == "ParameterError"


def test_unknown_key_is_json_error(tmp_path, cfg_file, capsys):
    assert run("train", "--config", cfg_file, "--set", "model.width=3", "--out", tmp_path) != 0
    assert err_json(capsys)["error"] == "ConfigError"


def test_missing_dataset_is_error(tmp_path, cfg_file, capsys):
    code = run("train", "--config", cfg_file, "--set", f"data.path={tmp_path / 'nope'}",
               "--out", tmp_path / "run")
    assert code != 0 and "not found" in err_json(capsys)["message"]


def test_train_then_eval(tmp_path, cfg_file, capsys):
    data = tmp_path / "data"
    run("gen-data", "--config", cfg_file, "--out", data)
    out = tmp_path / "run"
    assert run("train", "--config", cfg_file, "--set", f"data.path={data}", "--out", out) == 0
    for s in (0, 1):
        lines = (out / f"seed_{s}" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(x)["split"] for x in lines] == ["val", "train", "val", "test"]
        assert (out / f"seed_{s}" / "checkpoint.bin").exists()
    assert json.loads((out / "config.json").read_text())["data.path"] == str(data)
    sums = json.loads((out / "data_checksums.json").read_text())
    manifest = json.loads((data / "manifest.json").read_text())
    assert sums == {k: v["sha256"] for k, v in manifest["files"].items()}

    resolved = out / "config.json"
    ck = out / "seed_0" / "checkpoint"
    assert run("eval", "--config", resolved, "--checkpoint", ck, "--out", tmp_path / "e1") == 0
    assert run("eval", "--config", resolved, "--checkpoint", ck, "--out", tmp_path / "e2") == 0
    a = (tmp_path / "e1" / "eval.json").read_text()
    assert a == (tmp_path / "e2" / "eval.json").read_text()
    test_line = json.loads((out / "seed_0" / "metrics.jsonl").read_text().splitlines()[-1])
    assert json.loads(a)["acc"] == test_line["acc"]

    capsys.readouterr()
    code = run("eval", "--config", resolved, "--set", "loss.alpha=0.2", "--checkpoint", ck,
               "--out", tmp_path / "e3")
    assert code != 0 and err_json(capsys)["error"] == "CheckpointError"


def test_train_rerun_is_byte_identical(tmp_path, cfg_file):
    for name in ("a", "b"):
        assert run("train", "--config", cfg_file, "--set", "seeds=[4]", "--out", tmp_path / name) == 0
    for f in ("metrics.jsonl", "checkpoint.bin", "checkpoint.json"):
        assert (tmp_path / "a" / "seed_4" / f).read_bytes() == (tmp_path / "b" / "seed_4" / f).read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_ablate_rows_and_flag_equivalence(tmp_path, cfg_file):
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg_file, "--out", out) == 0
    res = json.loads((out / "ablation.json").read_text())
    assert len(res["rows"]) == 4 * 2
    assert [r["variant"] for r in res["rows"][::2]] == ["c2r", "w/o cycle", "w/o cou", "w/o dis"]
    table = (out / "ablation.txt").read_text().splitlines()
    assert table[0].split() == ["variant", "seed", "acc", "p@5"]
    assert run("train", "--config", cfg_file, "--set", "loss.lambda_dis=0", "--out",
               tmp_path / "zero") == 0
    for s in (0, 1):
        flagged = (out / "no_dis" / f"seed_{s}" / "metrics.jsonl").read_bytes()
        zeroed = (tmp_path / "zero" / f"seed_{s}" / "metrics.jsonl").read_bytes()
        assert flagged == zeroed


def test_sweep_emits_triples(tmp_path, cfg_file):
    out = tmp_path / "sw"
    assert run("sweep", "--config", cfg_file, "--param", "env.k", "--values", "2,3",
               "--out", out) == 0
    curve = json.loads((out / "sweep.json").read_text())["curve"]
    assert [p["value"] for p in curve] == [2, 3]
    assert all({"mean", "std", "n", "mask_mean"} <= set(p) for p in curve)


def test_single_value_sweep_equals_train(tmp_path, cfg_file):
    run("sweep", "--config", cfg_file, "--param", "loss.alpha", "--values", "0.4",
        "--set", "seeds=[0]", "--out", tmp_path / "sw")
    run("train", "--config", cfg_file, "--set", "seeds=[0]", "--out", tmp_path / "tr")
    a = (tmp_path / "sw" / "loss.alpha=0.4" / "seed_0" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "tr" / "seed_0" / "metrics.jsonl").read_bytes()
