from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from conftest import SMALL
from ptbench import experiments as ex
from ptbench import losses, stats
from ptbench.stats import SummaryStat
from ptbench.trainer import TrainConfig

DATA = Path(__file__).parent / "data" / "published_comparison.csv"

TINY_OVERRIDES = {
    "vocab_size": SMALL.vocab_size, "context_len": SMALL.context_len, "window": SMALL.window,
    "dim": SMALL.dim, "hidden": SMALL.hidden,
    "epochs": 1, "micro_batch": 4, "grad_accum": 1, "samples_per_prompt": 4, "max_new_tokens": 8,
    "checkpoint_every_epoch": False,
}
TINY_PIPE = ex.PipelineConfig(n_train=16, n_test=8, base_epochs=1)


def tiny_spec(tmp_path, algorithms, seeds, **kw) -> ex.SweepSpec:
    rl_knobs = {"group_size": 2, "max_rollout_tokens": 8}
    per = {a: dict(rl_knobs) for a in ("SGRPO", "GSPO", "CISPO")}
    kw.setdefault("parallelism", 1)
    return ex.SweepSpec(algorithms, seeds, str(tmp_path), dict(TINY_OVERRIDES), per, TINY_PIPE, **kw)


def rec(algo, seed, acc, task="t", **kw):
    return {"task": task, "algorithm": algo, "seed": seed, "config_hash": "h", "strict_accuracy": acc, "verdict": "ok", **kw}


# ------------------------------------------------------------------ store


def test_store_add_is_idempotent_unless_overwrite(tmp_path):
    path = tmp_path / "r.jsonl"
    store = ex.ResultsStore(path)
    assert store.add(rec("DPO", 1, 50.0))
    assert not store.add(rec("DPO", 1, 99.0))
    assert ex.ResultsStore(path).records[0]["strict_accuracy"] == 50.0
    assert store.add(rec("DPO", 1, 99.0), overwrite=True)
    reloaded = ex.ResultsStore(path)
    assert len(reloaded.records) == 1 and reloaded.records[0]["strict_accuracy"] == 99.0
    assert store.add(rec("DPO", 1, 10.0, task="other"))
    assert len(ex.ResultsStore(path).records) == 2


def test_integrity_check_detects_tampering(tmp_path):
    cfg = TrainConfig(algorithm="DPO")
    good = {**rec("DPO", 1, 50.0), "config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    store = ex.ResultsStore(tmp_path / "r.jsonl")
    store.add(good)
    assert store.integrity_errors() == []
    bad = json.loads(json.dumps(good))
    bad["seed"] = 2
    bad["config"]["peak_lr"] = 1.0
    store.add(bad)
    errs = ex.ResultsStore(tmp_path / "r.jsonl").integrity_errors()
    assert len(errs) == 1 and "mismatch" in errs[0]


# ------------------------------------------------------------------ analysis


def test_published_rows_flag_only_simpo(tmp_path):
    rows = stats.read_summary_csv(DATA)
    store = ex.store_from_summaries(tmp_path / "r.jsonl", rows, task="pub")
    summ = ex.summaries_by_task(store)["pub"]
    for r in rows:
        assert summ[r.algorithm].mean == pytest.approx(r.mean, abs=1e-9)
        assert summ[r.algorithm].std == pytest.approx(r.std, abs=1e-9)
    report = ex.cmd_analyze(store, "DPO", 0.05, tmp_path / "out")
    starred = [line.split()[0] for line in report.splitlines() if line.split() and len(line.split()[0]) > 1 and line.split()[0].endswith("*")]
    assert starred == ["SimPO*"]
    assert (tmp_path / "out" / "comparison-pub.csv").exists()
    assert (tmp_path / "out" / "analysis.txt").read_text().strip() == report.strip()


def test_single_seed_store_gives_means_only_table():
    summ = {"DPO": SummaryStat("DPO", 50.0, float("nan"), 1), "IPO": SummaryStat("IPO", 52.0, float("nan"), 1)}
    rows, text = ex.analyze(summ, "DPO")
    assert rows == []
    assert text.startswith("WARNING")
    assert "52.00" in text


def test_missing_baseline_is_an_error(tmp_path):
    store = ex.ResultsStore(tmp_path / "r.jsonl")
    store.add(rec("IPO", 1, 50.0))
    store.add(rec("IPO", 2, 51.0))
    with pytest.raises(ex.StatsLookupError):
        ex.cmd_analyze(store, "DPO", 0.05, tmp_path / "out")


def test_two_task_store_gets_spread_and_rank_sections(tmp_path):
    store = ex.ResultsStore(tmp_path / "r.jsonl")
    gsm = {"SFT": 54.36, "SimPO": 38.67, "KTO": 51.15, "SGRPO": 58.00, "DPO": 49.08}
    math_ = {"SFT": 27.04, "SimPO": 26.72, "KTO": 26.64, "SGRPO": 26.58, "DPO": 26.50}
    for task, table in (("gsm", gsm), ("math", math_)):
        for algo, m in table.items():
            for i, v in enumerate(ex.synthetic_samples(m, 0.5, 3)):
                store.add(rec(algo, i, float(v), task=task))
    report = ex.cmd_analyze(store, "DPO", 0.05, tmp_path / "out")
    assert "gsm                  spread 19.33 pp" in report
    assert "math                 spread 0.54 pp" in report
    assert "gsm vs math: rho = 0.00 over 5 algorithms" in report


def test_synthetic_samples_reproduce_summary():
    v = ex.synthetic_samples(49.76, 2.27, 5)
    assert v.mean() == pytest.approx(49.76) and np.std(v, ddof=1) == pytest.approx(2.27)


# ------------------------------------------------------------------ report


def test_efficiency():
    assert ex.efficiency(10.0, 5.5) == pytest.approx(0.55)
    assert ex.efficiency(0.0, 5.5) is None
    assert ex.efficiency(-2.0, 1.0) is None


def test_report_lines(tmp_path):
    store = ex.ResultsStore(tmp_path / "r.jsonl")
    assert ex.cmd_report(store) == "empty store: no runs recorded"
    store.add(rec("SimPO", 1, 60.0, init_accuracy=50.0, wall_clock_seconds=5.5 * 3600))
    store.add(rec("Flat", 1, 50.0, init_accuracy=50.0, wall_clock_seconds=60))
    store.add({**rec("Broken", 1, None), "verdict": "failed"})
    text = ex.cmd_report(store)
    simpo = next(l for l in text.splitlines() if " SimPO " in l)
    assert "+10.00" in simpo and "0.5500" in simpo
    flat = next(l for l in text.splitlines() if " Flat " in l)
    assert "undef" in flat and "inf" not in flat
    assert "failed" in next(l for l in text.splitlines() if " Broken " in l)


# ------------------------------------------------------------------ sweep


def test_sweep_rejects_unknown_ids_before_running(tmp_path):
    with pytest.raises(ex.SweepError):
        ex.cmd_sweep(tiny_spec(tmp_path, ["DPO", "Nope"], [1]))
    assert not (tmp_path / "results.jsonl").exists()
    with pytest.raises(ex.SweepError):
        ex.cmd_sweep(tiny_spec(tmp_path, ["DPO"], [1, 1]))


@pytest.mark.slow
def test_five_by_three_sweep_then_noop_rerun(tmp_path):
    algos = ["SFT", "DPO", "IPO", "KTO", "SGRPO"]
    store = ex.cmd_sweep(tiny_spec(tmp_path, algos, [1, 2, 3]), log=lambda *_: None)
    assert len(store.records) == 15
    assert {r["verdict"] for r in store.records} == {"ok"}
    assert store.integrity_errors() == []
    notices = []
    ex.cmd_sweep(tiny_spec(tmp_path, algos, [1, 2, 3]), log=notices.append)
    assert len(notices) == 15 and all(n.startswith("skip") for n in notices)
    assert len(ex.ResultsStore(tmp_path / "results.jsonl").records) == 15


@pytest.mark.slow
def test_sweep_is_deterministic(tmp_path):
    a = ex.cmd_sweep(tiny_spec(tmp_path / "a", ["SFT", "DPO"], [1, 2]), log=lambda *_: None)
    b = ex.cmd_sweep(tiny_spec(tmp_path / "b", ["SFT", "DPO"], [1, 2], parallelism=2), log=lambda *_: None)
    key = lambda r: (r["algorithm"], r["seed"])  # noqa: E731
    assert [(key(r), r["param_hash"]) for r in sorted(a.records, key=key)] == \
           [(key(r), r["param_hash"]) for r in sorted(b.records, key=key)]


def _nan_loss(batch, spec):
    out = losses.dpo_loss(batch, spec)
    out.value = float("nan")
    return out


@pytest.mark.slow
def test_pathological_cell_does_not_stop_sweep(tmp_path):
    losses.register(losses.LossInfo("NaNPO", "test double", "Vanilla", True, 2024, _nan_loss, {"beta": 0.1}))
    try:
        store = ex.cmd_sweep(tiny_spec(tmp_path, ["DPO", "NaNPO"], [1]), log=lambda *_: None)
    finally:
        losses.unregister("NaNPO")
    by = {r["algorithm"]: r for r in store.records}
    assert by["NaNPO"]["verdict"] == "pathological"
    assert by["DPO"]["verdict"] == "ok" and by["DPO"]["strict_accuracy"] is not None


def test_failed_cell_is_recorded(tmp_path):
    spec = tiny_spec(tmp_path, ["SFT"], [1])
    spec.pipeline = ex.PipelineConfig(n_train=16, n_test=8, selfplay_seed=0)  # invalid pipeline
    out = ex.run_cell(spec, "SFT", 1)
    assert out["verdict"] == "failed" and "selfplay_seed" in out["pathology_reason"]


# ------------------------------------------------------------------ audit


def test_audit_verdicts(tiny_problems):
    cfg = TrainConfig.from_flat({**TINY_OVERRIDES, "algorithm": "SFT", "epochs": 2})
    test = tiny_problems[:6]
    off = ex.audit_determinism(TrainConfig.from_dict({**cfg.to_dict(), "propagate_seed_to_sampler": False}),
                               [1, 2, 3], tiny_problems, test)
    assert off.verdict == "DETERMINISTIC-ACROSS-SEEDS"
    assert off.identical_permutations and len(set(off.param_hashes.values())) == 1
    on = ex.audit_determinism(cfg, [1, 2, 3], tiny_problems, test)
    assert on.verdict == "SEED-SENSITIVE"
    assert len(set(on.param_hashes.values())) == 3
    assert set(on.accuracies) == {"1", "2", "3"}
    assert "verdict: SEED-SENSITIVE" in on.render()
    with pytest.raises(ex.AuditError):
        ex.audit_determinism(cfg, [1], tiny_problems, test)
