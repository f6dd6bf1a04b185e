import json
import subprocess
import sys

import pytest

from capita import datagen
from capita.cli import main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "14", "--out", str(d / "tasks.jsonl"), "--seed", "5"]) == 0
    return d


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_gen_writes_tasks(work):
    assert len(datagen.read_tasks(work / "tasks.jsonl")) == 14


def test_expert_run(work, capsys):
    assert main(["expert-run", "--tasks", str(work / "tasks.jsonl"), "--report", str(work / "e.csv")]) == 0
    assert last_json(capsys)["sr"] == 1.0
    assert (work / "e.csv").read_text().splitlines()[-1].startswith("all,14,14,1.000000")


def test_eval_twice_is_identical(work):
    for k in ("a", "b"):
        assert main(["eval", "--policy", "random", "--tasks", str(work / "tasks.jsonl"), "--seed", "7",
                     "--p-og", "0.2", "--report", str(work / f"{k}.csv"),
                     "--report-json", str(work / f"{k}.json")]) == 0
    assert (work / "a.csv").read_bytes() == (work / "b.csv").read_bytes()
    assert (work / "a.json").read_bytes() == (work / "b.json").read_bytes()


def test_replay_round_trip(work, capsys):
    assert main(["eval", "--policy", "random", "--tasks", str(work / "tasks.jsonl"), "--p-es", "0.3",
                 "--transcripts", str(work / "tr")]) == 0
    files = sorted((work / "tr").iterdir())
    assert len(files) == 14
    assert main(["replay", "--transcript", str(files[3])]) == 0
    assert last_json(capsys)["identical"] is True


def test_replay_mismatch_fails(work, capsys):
    src = sorted((work / "tr").iterdir())[0] if (work / "tr").exists() else None
    if src is None:
        pytest.skip("transcripts not generated")
    lines = src.read_text().splitlines()
    header = json.loads(lines[0])
    header["payload"]["seed"] += 1
    bad = work / "bad.jsonl"
    bad.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    assert main(["replay", "--transcript", str(bad)]) == 1
    assert "ReplayMismatch" in capsys.readouterr().err


def test_build_and_train(work, capsys):
    data = work / "s1.jsonl"
    assert main(["build-data", "--stage", "1", "--tasks", str(work / "tasks.jsonl"), "--out", str(data)]) == 0
    assert main(["build-data", "--stage", "3", "--tasks", str(work / "tasks.jsonl"),
                 "--out", str(work / "s3.jsonl"), "--aug-factor", "1"]) == 0
    pol = work / "bc.json"
    assert main(["train", "--algo", "bc", "--data", str(data), "--out", str(pol), "--iterations", "30",
                 "--batch-size", "64", "--metrics", str(work / "m.csv")]) == 0
    assert (work / "m.csv").read_text().startswith("iteration,objective,clip_fraction,mean_abs_adv,probe_sr")
    assert main(["eval", "--policy", str(pol), "--tasks", str(work / "tasks.jsonl")]) == 0
    assert last_json(capsys)["sr"] > 0.5


def test_train_rejects_digest_mismatch(work, capsys):
    text = (work / "s1.jsonl").read_text().splitlines()
    header = json.loads(text[0])
    header["feature_digest"] = "0123456789abcdef"
    bad = work / "bad-digest.jsonl"
    bad.write_text("\n".join([json.dumps(header)] + text[1:]) + "\n")
    code = main(["train", "--algo", "eipo", "--data", str(bad), "--out", str(work / "x.json"), "--iterations", "1"])
    assert code != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("error ") and json.loads(err[6:])["command"] == "train"


def test_unknown_flag_is_usage_error(work):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--tasks", str(work / "tasks.jsonl"), "--bogus"])
    assert e.value.code == 2


def test_config_file_supplies_flags(work, capsys):
    cfg = work / "run.cfg"
    cfg.write_text(f"# expert sweep\ntasks = {work / 'tasks.jsonl'}\np-og = 1.0\n")
    assert main(["expert-run", "--config", str(cfg)]) == 0
    assert last_json(capsys)["sr"] == 0.0
    cfg.write_text("nonsense = 1\n")
    assert main(["expert-run", "--config", str(cfg), "--tasks", str(work / "tasks.jsonl")]) == 2


def test_seed_falls_back_to_environment(work, monkeypatch):
    monkeypatch.setenv("CAPITA_SEED", "5")
    assert main(["gen", "--n", "14", "--out", str(work / "again.jsonl")]) == 0
    assert (work / "again.jsonl").read_bytes() == (work / "tasks.jsonl").read_bytes()


def test_missing_file_is_reported(work, capsys):
    assert main(["eval", "--policy", "expert", "--tasks", str(work / "nope.jsonl")]) == 1
    assert '"error":"FileNotFoundError"' in capsys.readouterr().err


def test_module_entry_point(work):
    out = subprocess.run([sys.executable, "-m", "capita.cli", "expert-run", "--tasks", str(work / "tasks.jsonl")],
                         capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["sr"] == 1.0


def test_stage3_merges_base(work, capsys):
    s1 = work / "base1.jsonl"
    assert main(["build-data", "--stage", "1", "--tasks", str(work / "tasks.jsonl"), "--out", str(s1)]) == 0
    n1 = last_json(capsys)["samples"]
    assert main(["build-data", "--stage", "3", "--tasks", str(work / "tasks.jsonl"), "--out", str(work / "m3.jsonl"),
                 "--base", str(s1)]) == 0
    merged = last_json(capsys)
    assert merged["samples"] > n1 and merged["counts"]["EG"] > 0
    assert main(["train", "--algo", "eipo", "--data", str(work / "m3.jsonl"), "--out", str(work / "e.json"),
                 "--iterations", "3", "--batch-size", "64"]) == 0
