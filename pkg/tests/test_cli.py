import csv
import io
import json
import math

import pytest

from moecollab.cli import main
from moecollab.data import word_pool

EXPERTS = ",".join(f"expert-domain{d}" for d in range(4))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    reg, data = root / "registry", root / "data"
    steps = [["synth", "--out-dir", data],
             ["pretrain", "--data", data / "train.jsonl", "--out-dir", root / "enc"]]
    for d in range(4):
        steps.append(["train-expert", "--data", data / "train.jsonl", "--encoder",
                      root / "enc" / "encoder.moec", "--domain", f"domain{d}",
                      "--out-dir", root / "experts"])
    steps.append(["register", "--registry-dir", reg, "--encoder", root / "enc" / "encoder.moec",
                  "--out-dir", root / "reg_out", "--bundle",
                  *[root / "experts" / f"expert-domain{d}-1.0.0.moec" for d in range(4)]])
    steps.append(["train-gate", "--registry-dir", reg, "--data", data / "train.jsonl",
                  "--experts", EXPERTS, "--out-dir", root / "gate"])
    steps.append(["eval", "--registry-dir", reg, "--data", data / "eval.jsonl", "--experts", EXPERTS,
                  "--gate", root / "gate" / "gate.moec", "--baseline", root / "enc" / "baseline.moec",
                  "--out-dir", root / "eval"])
    codes = [main([str(a) for a in s]) for s in steps]
    return root, reg, codes


def test_full_pipeline_exits_zero_and_writes_table(pipeline):
    root, _, codes = pipeline
    assert codes == [0] * len(codes)
    rows = list(csv.DictReader((root / "eval" / "table.csv").open()))
    assert [r["domain"] for r in rows] == [f"domain{d}" for d in range(4)] + ["mixed"]
    assert set(rows[0]) == {"domain", "baseline", "expert", "moe", "gain"}
    result = json.loads((root / "eval" / "eval.json").read_text())
    assert sum(result["utilization"]) == pytest.approx(1.0)
    assert 0 <= result["macro_f1"] <= 1


def test_every_command_writes_run_json(pipeline):
    root, reg, _ = pipeline
    cfg = json.loads((root / "gate" / "run.json").read_text())
    assert cfg["command"] == "train-gate" and cfg["args"]["lr"] == 1e-2
    assert str(reg) in cfg["argv"]


def test_replay_reproduces_a_command(pipeline, tmp_path, capsys):
    root, _, _ = pipeline
    cfg = json.loads((root / "eval" / "run.json").read_text())
    argv = list(cfg["argv"])
    argv[argv.index("--out-dir") + 1] = str(tmp_path)
    (tmp_path / "run.json").write_text(json.dumps({**cfg, "argv": argv}))
    code, _ = run(capsys, "replay", tmp_path / "run.json")
    assert code == 0
    assert (tmp_path / "table.csv").read_text() == (root / "eval" / "table.csv").read_text()


def test_single_expert_eval_matches_expert_eval(pipeline, tmp_path, capsys):
    root, reg, _ = pipeline
    code, out = run(capsys, "eval", "--registry-dir", reg, "--data", root / "data" / "eval.jsonl",
                    "--experts", "expert-domain1", "--out-dir", tmp_path)
    assert code == 0
    result = json.loads(out)
    mixed = result["table"][-1]
    assert mixed["moe"] == mixed["expert"]
    assert result["macro_f1"] == mixed["moe"]


def test_route_simplex_determinism_and_domain_purity(pipeline, tmp_path, capsys):
    _, reg, _ = pipeline
    gate = pipeline[0] / "gate" / "gate.moec"
    for d in range(4):
        text = " ".join(word_pool(d, 1, 8))
        args = ["route", "--registry-dir", reg, "--experts", EXPERTS, "--gate", gate,
                "--text", text, "--out-dir", tmp_path]
        code, out = run(capsys, *args)
        assert code == 0
        first = json.loads(out)
        assert math.isclose(sum(first["gate_weights"]), 1.0, abs_tol=1e-12)
        assert first["top_expert"] == d
        assert first["gate_weights"][d] > 0.5
        assert json.loads(run(capsys, *args)[1]) == first


def test_stats_csv_contract(pipeline, tmp_path, capsys):
    root, _, _ = pipeline
    code, out = run(capsys, "stats", "--report", root / "gate" / "gate_report.json",
                    "--out-dir", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["epoch", "expert", "utilization", "routing_entropy"]
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], []).append(float(r["utilization"]))
        assert 0.0 <= float(r["routing_entropy"]) <= math.log(4) + 1e-12
    assert len(by_epoch) == 10
    for utils in by_epoch.values():
        assert sum(utils) == pytest.approx(1.0)


def test_synth_is_deterministic_and_validates(tmp_path, capsys):
    assert run(capsys, "synth", "--out-dir", tmp_path / "a")[0] == 0
    assert run(capsys, "synth", "--out-dir", tmp_path / "b")[0] == 0
    assert (tmp_path / "a" / "corpus.jsonl").read_bytes() == (tmp_path / "b" / "corpus.jsonl").read_bytes()
    assert len((tmp_path / "a" / "corpus.jsonl").read_text().splitlines()) == 4 * 3 * 40
    assert run(capsys, "synth", "--noise-rate", "1.5", "--out-dir", tmp_path / "c")[0] == 2


def test_missing_inputs_exit_2(tmp_path, capsys):
    assert run(capsys, "stats", "--report", tmp_path / "nope.json", "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "route", "--registry-dir", tmp_path / "empty", "--experts", "x",
               "--text", "hi", "--out-dir", tmp_path)[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_registry_from_environment(pipeline, tmp_path, capsys, monkeypatch):
    _, reg, _ = pipeline
    monkeypatch.setenv("MOECOLLAB_REGISTRY", str(reg))
    code, out = run(capsys, "route", "--experts", "expert-domain0", "--text", "x", "--out-dir", tmp_path)
    assert code == 0
    assert json.loads(out)["gate_weights"] == [1.0]
    assert str(reg) in json.loads((tmp_path / "run.json").read_text())["argv"]


def test_mismatched_fingerprint_exits_3(pipeline, tmp_path, capsys):
    root, reg, _ = pipeline
    assert run(capsys, "synth", "--samples-per-class", "6", "--out-dir", tmp_path / "d")[0] == 0
    assert run(capsys, "pretrain", "--data", tmp_path / "d" / "train.jsonl", "--seed", "7",
               "--epochs", "1", "--baseline-epochs", "1", "--out-dir", tmp_path / "enc")[0] == 0
    assert run(capsys, "train-expert", "--data", tmp_path / "d" / "train.jsonl", "--encoder",
               tmp_path / "enc" / "encoder.moec", "--domain", "domain0", "--expert-id", "rogue",
               "--epochs", "1", "--out-dir", tmp_path / "ex")[0] == 0
    code = main(["register", "--registry-dir", str(reg), "--out-dir", str(tmp_path),
                 "--bundle", str(tmp_path / "ex" / "rogue-1.0.0.moec")])
    err = capsys.readouterr().err
    assert code == 3
    assert "fingerprint" in json.loads(err.strip().splitlines()[-1])["violations"][0]


def test_duplicate_registration_exits_2(pipeline, tmp_path, capsys):
    root, reg, _ = pipeline
    code = main(["register", "--registry-dir", str(reg), "--out-dir", str(tmp_path),
                 "--bundle", str(root / "experts" / "expert-domain0-1.0.0.moec")])
    assert code == 2
    assert "already registered" in capsys.readouterr().err


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip()
