from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from conftest import SMALL
from ptbench import cli, losses, rl
from ptbench import experiments as ex
from ptbench.trainer import TrainConfig

DATA = Path(__file__).parent / "data" / "published_comparison.csv"

TINY = ["--n-train", "16", "--n-test", "8", "--base-epochs", "1"]
SMALL_SETS = [f"--set={k}={getattr(SMALL, k)}" for k in ("vocab_size", "context_len", "window", "dim", "hidden")]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_list_algorithms(capsys):
    code, out, _ = run(capsys, "list-algorithms")
    assert code == 0
    lines = out.strip().splitlines()[1:]
    assert len(lines) == 24
    names = [l.split()[0] for l in lines]
    assert names == ["SFT", *losses.PREFERENCE_VARIANTS, *rl.RL_VARIANTS]
    simpo = next(l for l in lines if l.startswith("SimPO "))
    assert simpo.split()[2] == "no"
    assert next(l for l in lines if l.startswith("DPO ")).split()[2] == "yes"
    assert run(capsys, "list-algorithms")[1] == out


def test_list_algorithms_json(capsys):
    code, out, _ = run(capsys, "list-algorithms", "--json")
    rows = json.loads(out)
    assert len(rows) == 24
    by = {r["name"]: r for r in rows}
    assert by["SimPO"]["reference"] is False and by["SimPO"]["defaults"]["gamma"] == 0.5
    assert by["GSPO"]["category"] == "Online RL"


def test_bundled_configs_are_valid():
    for name in cli.all_algorithms():
        flat = cli.algorithm_config(name, None)
        assert flat["algorithm"] == name
        TrainConfig.from_flat(flat).validate()


def test_analyze_published_summary(capsys):
    code, out, _ = run(capsys, "analyze", "--summary-csv", str(DATA), "--baseline", "DPO")
    assert code == 0
    starred = [l.split()[0] for l in out.splitlines() if l.split() and l.split()[0].endswith("*") and len(l.split()[0]) > 1]
    assert starred == ["SimPO*"]
    orpo = next(l for l in out.splitlines() if l.startswith("ORPO"))
    assert "+4.13" in orpo and " 0.013" in orpo


def test_analyze_missing_baseline(capsys, tmp_path):
    code, _, err = run(capsys, "analyze", "--summary-csv", str(DATA), "--baseline", "Nope")
    assert code == 1 and "Nope" in err


def test_report_and_check_store(capsys, tmp_path):
    path = tmp_path / "r.jsonl"
    code, out, _ = run(capsys, "report", "--store", str(path))
    assert code == 0 and "empty store" in out
    cfg = TrainConfig()
    store = ex.ResultsStore(path)
    store.add({"task": "t", "algorithm": "SFT", "seed": 1, "config": cfg.to_dict(), "config_hash": cfg.config_hash(),
               "strict_accuracy": 10.0, "verdict": "ok"})
    assert run(capsys, "check-store", "--store", str(path))[0] == 0
    tampered = cfg.to_dict()
    tampered["epochs"] = 99
    store.add({"task": "t", "algorithm": "SFT", "seed": 2, "config": tampered, "config_hash": cfg.config_hash(),
               "strict_accuracy": 10.0, "verdict": "ok"})
    code, out, _ = run(capsys, "check-store", "--store", str(path))
    assert code == 1 and "1 integrity errors" in out


def test_sweep_unknown_algorithm_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "sweep", "--algorithms", "DPO,Bogus", "--seeds", "1", "--out", str(tmp_path), *TINY)
    assert code == 2 and "Bogus" in err
    assert not (tmp_path / "results.jsonl").exists()


def test_generate_train_eval_roundtrip(capsys, tmp_path):
    code, _, _ = run(capsys, "generate", "--out", str(tmp_path / "data"), *TINY)
    assert code == 0
    assert len((tmp_path / "data" / "train.jsonl").read_text().splitlines()) == 16
    code, out, _ = run(capsys, "train", "--algorithm", "SFT", "--seed", "3", "--out", str(tmp_path / "sft"),
                       "--set", "epochs=1", *SMALL_SETS, *TINY)
    assert code == 0 and "verdict ok" in out
    ckpt = next((tmp_path / "sft" / "run").glob("checkpoint-epoch*.bin"))
    code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--n-test", "8",
                       "--records", str(tmp_path / "rec.jsonl"))
    assert code == 0 and out.startswith("strict")
    assert len((tmp_path / "rec.jsonl").read_text().splitlines()) == 8


def test_train_from_config_file(capsys, tmp_path):
    cfg = {"algorithm": "DPO", "epochs": 1, "micro_batch": 4, "grad_accum": 1, "samples_per_prompt": 4,
           "max_new_tokens": 8, **{k: getattr(SMALL, k) for k in ("vocab_size", "context_len", "window", "dim", "hidden")}}
    path = tmp_path / "dpo.yaml"
    path.write_text(yaml.safe_dump(cfg))
    code, out, _ = run(capsys, "train", "--config", str(path), "--out", str(tmp_path / "o"), *TINY)
    assert code == 0 and "algorithm DPO" in out


def test_bad_config_value_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--algorithm", "SFT", "--set", "epochs=0", "--out", str(tmp_path), *TINY)
    assert code == 2 and "epochs" in err


def test_audit_command(capsys, tmp_path):
    argv = ["audit-determinism", "--seeds", "1,2", "--epochs", "1", "--work-dir", str(tmp_path), "--expect", *SMALL_SETS, *TINY]
    code, out, _ = run(capsys, *argv, "--propagate", "off", "--json", str(tmp_path / "a.json"))
    assert code == 0 and "DETERMINISTIC-ACROSS-SEEDS" in out
    assert json.loads((tmp_path / "a.json").read_text())["identical_params"] is True
    code, out, _ = run(capsys, *argv, "--propagate", "on")
    assert code == 0 and "SEED-SENSITIVE" in out


@pytest.mark.parametrize("text,value", [("3", 3), ("0.5", 0.5), ("true", True), ("abc", "abc"), ("1e-4", 1e-4), ("nan", "nan")])
def test_set_values_are_typed(text, value):
    assert cli.parse_sets([f"k={text}"]) == {"k": value}
