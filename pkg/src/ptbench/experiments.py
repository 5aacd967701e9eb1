"""Experiment orchestration: the desk-scale pipeline, sweeps, the results store,
analysis/report generation and the cross-seed determinism audit."""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing as mp
import os
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, rl, stats
from .evaluator import evaluate, rank_correlation, spread, write_records
from .model import TinyLM
from .taskdata import PreferencePair, Problem, build_pairs, generate_problems, read_pairs, write_jsonl
from .trainer import AdamWConfig, RunManifest, TrainConfig, TrainData, train


class SweepError(ValueError):
    pass


class StoreError(ValueError):
    pass


# ------------------------------------------------------------------ pipeline


@dataclass
class PipelineConfig:
    """Task and warm-start settings shared by every cell of a sweep.

    Preference and RL algorithms start from a shared SFT checkpoint trained for
    ``base_epochs`` on the gold-labelled pool. Self-play (pairs and rollouts) runs
    on a second train-split pool of the same size: the warm start reproduces its
    own training prompts almost perfectly, which would leave no incorrect samples
    to learn from. Pairs are built once, so all offline algorithms see the same data.
    """

    n_train: int = 512
    n_test: int = 256
    task_seed: int = 0
    selfplay_seed: int = 1
    test_seed: int = 0
    difficulty: str = "2-step"
    base_epochs: int = 40
    base_lr: float = 3e-3
    base_weight_decay: float = 0.3
    base_micro_batch: int = 8
    pair_seed: int = 0

    def task_name(self) -> str:
        return f"arith-{self.difficulty}"


def load_task(p: PipelineConfig) -> tuple[list[Problem], list[Problem], list[Problem]]:
    """(gold-labelled train pool, self-play train pool, test set)."""
    if p.selfplay_seed == p.task_seed:
        raise SweepError("selfplay_seed must differ from task_seed")
    gold = generate_problems(p.task_seed, p.n_train, p.difficulty, "train")
    selfplay = generate_problems(p.selfplay_seed, p.n_train, p.difficulty, "train")
    test_set = generate_problems(p.test_seed, p.n_test, p.difficulty, "test")
    return gold, selfplay, test_set


def base_config(p: PipelineConfig, template: TrainConfig) -> TrainConfig:
    return TrainConfig(
        algorithm="SFT",
        peak_lr=p.base_lr,
        epochs=p.base_epochs,
        micro_batch=p.base_micro_batch,
        grad_accum=1,
        seed=0,
        init_seed=template.init_seed,
        model=template.model,
        adamw=AdamWConfig(weight_decay=p.base_weight_decay),
        checkpoint_every_epoch=False,
    )


def ensure_base(p: PipelineConfig, template: TrainConfig, out_dir: Path, gold: list[Problem], selfplay: list[Problem]) -> tuple[TinyLM, list[PreferencePair]]:
    """Train (or load) the shared warm-start checkpoint and its self-play pairs.

    The checkpoint is cached per pipeline; pairs are cached per pair-sampling knobs.
    """
    cfg = base_config(p, template)
    key = hashlib.sha256(json.dumps([asdict(p), cfg.config_hash()], sort_keys=True).encode()).hexdigest()[:12]
    knobs = [template.samples_per_prompt, template.pair_temperature, template.max_new_tokens]
    pkey = hashlib.sha256(json.dumps(knobs).encode()).hexdigest()[:8]
    base_dir = out_dir / "base" / key
    ckpt = base_dir / "model.bin"
    pairs_path = base_dir / f"pairs-{pkey}.jsonl"
    base_dir.mkdir(parents=True, exist_ok=True)
    if ckpt.exists():
        model, _ = TinyLM.load(ckpt)
    else:
        _, model = train(cfg, TrainData(gold))
        model.save(ckpt, cfg.config_hash())
    if pairs_path.exists():
        return model, read_pairs(pairs_path)
    pairs = build_pairs(
        selfplay,
        model,
        template.samples_per_prompt,
        np.random.default_rng([p.pair_seed, 99]),
        temperature=template.pair_temperature,
        max_tokens=template.max_new_tokens,
    )
    write_jsonl(pairs_path, pairs)
    return model, pairs


# ------------------------------------------------------------------ results store


def record_key(rec: dict) -> tuple:
    return (rec.get("task", ""), rec["algorithm"], int(rec["seed"]), rec["config_hash"])


class ResultsStore:
    """Append-only JSONL of run records keyed by (task, algorithm, seed, config hash)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.records: list[dict] = []
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.records.append(json.loads(line))

    def keys(self) -> set:
        return {record_key(r) for r in self.records}

    def has(self, key: tuple) -> bool:
        return key in self.keys()

    def add(self, rec: dict, overwrite: bool = False) -> bool:
        """Store a record; an existing key is kept unless ``overwrite``. Returns True if written."""
        key = record_key(rec)
        if self.has(key):
            if not overwrite:
                return False
            self.records = [r for r in self.records if record_key(r) != key]
            self.records.append(rec)
            self._rewrite()
            return True
        self.records.append(rec)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return True

    def _rewrite(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        os.replace(tmp, self.path)

    def integrity_errors(self) -> list[str]:
        """Records whose stored config no longer hashes to their recorded config hash."""
        errors = []
        for i, r in enumerate(self.records):
            cfg = r.get("config")
            if cfg is None:
                continue
            try:
                h = TrainConfig.from_dict(cfg).config_hash()
            except Exception as exc:  # malformed config is an integrity failure too
                errors.append(f"record {i} ({r.get('algorithm')}, seed {r.get('seed')}): unreadable config: {exc}")
                continue
            if h != r["config_hash"]:
                errors.append(f"record {i} ({r.get('algorithm')}, seed {r.get('seed')}): config hash mismatch")
        return errors


# ------------------------------------------------------------------ sweep


@dataclass
class SweepSpec:
    algorithms: list[str]
    seeds: list[int]
    out_dir: str
    overrides: dict = field(default_factory=dict)
    per_algorithm: dict = field(default_factory=dict)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    parallelism: int = 0
    overwrite: bool = False

    def validate(self) -> None:
        known = set(losses.REGISTRY) | set(rl.RL_VARIANTS)
        unknown = [a for a in self.algorithms if a not in known]
        if unknown:
            raise SweepError(f"unknown algorithm ids: {unknown}; registered: {sorted(known)}")
        if len(set(self.seeds)) != len(self.seeds):
            raise SweepError("seeds must be distinct")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise SweepError("algorithms must be distinct")


def cell_config(spec: SweepSpec, algorithm: str, seed: int) -> TrainConfig:
    flat = {**spec.overrides, **spec.per_algorithm.get(algorithm, {}), "algorithm": algorithm, "seed": seed}
    return TrainConfig.from_flat(flat)


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1) - 1)


def run_cell(spec: SweepSpec, algorithm: str, seed: int) -> dict:
    """Train and evaluate one (algorithm, seed) cell; never raises."""
    cfg = cell_config(spec, algorithm, seed)
    p = spec.pipeline
    out = Path(spec.out_dir)
    run_dir = out / "runs" / p.task_name() / algorithm / f"seed{seed}"
    rec = {
        "task": p.task_name(),
        "algorithm": algorithm,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "pipeline": asdict(p),
        "run_dir": str(run_dir),
    }
    try:
        gold, selfplay, test_set = load_task(p)
        if cfg.kind == "sft":
            init = TinyLM.init(cfg.model, seed=cfg.init_seed)
            data = TrainData(gold)
        else:
            init, pairs = ensure_base(p, cfg, out, gold, selfplay)
            data = TrainData(selfplay, pairs if cfg.kind == "preference" else None)
        init_summary, _ = evaluate(init, test_set, max_tokens=cfg.max_new_tokens)
        man, model = train(cfg, data, init, out_dir=run_dir)
        summary, records = evaluate(model, test_set, max_tokens=cfg.max_new_tokens)
        write_records(run_dir / "eval.jsonl", records)
        rec.update(
            strict_accuracy=summary.strict_accuracy,
            flexible_accuracy=summary.flexible_accuracy,
            format_gap=summary.format_gap,
            n_problems=summary.n_problems,
            init_accuracy=init_summary.strict_accuracy,
            wall_clock_seconds=man.wall_clock_seconds,
            param_hash=man.param_hash,
            verdict=man.verdict,
            pathology_reason=man.pathology_reason,
            skipped_steps=man.skipped_steps,
            manifest=str(run_dir / "manifest.json"),
        )
    except Exception as exc:
        rec.update(
            strict_accuracy=None,
            flexible_accuracy=None,
            verdict="failed",
            pathology_reason=f"{type(exc).__name__}: {exc}",
            traceback=traceback.format_exc(limit=5),
        )
    return rec


def _cell_entry(args):
    return run_cell(*args)


def cmd_sweep(spec: SweepSpec, log=print) -> ResultsStore:
    """Run every missing cell of the grid and append results to ``out_dir/results.jsonl``."""
    spec.validate()
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = ResultsStore(out / "results.jsonl")
    todo = []
    for algo in spec.algorithms:
        for seed in spec.seeds:
            cfg = cell_config(spec, algo, seed)
            key = (spec.pipeline.task_name(), algo, seed, cfg.config_hash())
            if store.has(key) and not spec.overwrite:
                log(f"skip {algo} seed {seed}: already in store (use --overwrite to rerun)")
                continue
            todo.append((spec, algo, seed))
    if not todo:
        return store
    # warm start and pairs are built once in the parent, before any cell forks
    if any(cell_config(spec, a, s).kind != "sft" for _, a, s in todo):
        gold, selfplay, _ = load_task(spec.pipeline)
        seen = set()
        for _, a, s_ in todo:
            c = cell_config(spec, a, s_)
            knobs = (c.samples_per_prompt, c.pair_temperature, c.max_new_tokens)
            if c.kind != "sft" and knobs not in seen:
                seen.add(knobs)
                ensure_base(spec.pipeline, c, out, gold, selfplay)
    jobs = spec.parallelism or default_jobs()
    if jobs > 1 and len(todo) > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(min(jobs, len(todo))) as pool:
            results = pool.map(_cell_entry, todo, chunksize=1)
    else:
        # still isolate cells in child processes so a crash cannot take the sweep down
        ctx = mp.get_context("fork")
        results = []
        for item in todo:
            with ctx.Pool(1) as pool:
                results.append(pool.apply(_cell_entry, (item,)))
    for rec in results:
        store.add(rec, overwrite=spec.overwrite)
        acc = rec.get("strict_accuracy")
        shown = f"{acc:.2f}" if acc is not None else "n/a"
        log(f"{rec['algorithm']:<10} seed {rec['seed']:<5} strict {shown:>6}  verdict {rec['verdict']}")
    return store


# ------------------------------------------------------------------ analysis


def _usable(rec: dict) -> bool:
    return rec.get("strict_accuracy") is not None and rec.get("verdict") != "failed"


def summaries_by_task(store: ResultsStore) -> dict[str, dict[str, stats.SummaryStat]]:
    runs: dict[str, list[stats.RunResult]] = {}
    for r in store.records:
        if not _usable(r):
            continue
        runs.setdefault(r.get("task", ""), []).append(stats.RunResult(r["algorithm"], int(r["seed"]), r["strict_accuracy"]))
    return {task: stats.aggregate(rs) for task, rs in runs.items()}


def analyze(summaries: dict[str, stats.SummaryStat], baseline: str, alpha: float = 0.05) -> tuple[list[stats.ComparisonRow], str]:
    """Comparison rows and an aligned text table; refuses tests when n < 2."""
    if baseline not in summaries:
        raise StatsLookupError(f"baseline {baseline!r} not present; available: {sorted(summaries)}")
    base = summaries[baseline]
    variants = [s for a, s in summaries.items() if a != baseline]
    cats = {n: i.family for n, i in losses.REGISTRY.items()}
    cats.update({v: "Online RL" for v in rl.RL_VARIANTS})
    if not base.testable or any(not v.testable for v in variants):
        lines = ["WARNING: fewer than 2 seeds for some algorithms; significance tests skipped.", ""]
        lines.append(f"{'Algorithm':<12} {'Mean':>6} {'n':>3}")
        for s in sorted(summaries.values(), key=lambda s: -s.mean):
            lines.append(f"{s.algorithm:<12} {s.mean:>6.2f} {s.n:>3}")
        return [], "\n".join(lines)
    rows = stats.compare_variants(base, variants, alpha)
    return rows, stats.format_comparison(base, rows, cats)


class StatsLookupError(ValueError):
    pass


def cmd_analyze(store: ResultsStore, baseline: str, alpha: float, out_dir: str | Path) -> str:
    """Write per-task comparison tables plus spread and rank-correlation sections; returns the text report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_task = summaries_by_task(store)
    if not by_task:
        raise StatsLookupError("store holds no usable runs")
    sections = []
    for task, summ in sorted(by_task.items()):
        rows, text = analyze(summ, baseline, alpha)
        stats.write_summary_csv(out / f"summary-{task or 'default'}.csv", summ.values())
        if rows:
            stats.write_comparison_csv(out / f"comparison-{task or 'default'}.csv", rows)
        sections.append(f"== {task or 'default'} (baseline {baseline}, alpha {alpha}) ==\n{text}")
    sections.append(spread_section(by_task))
    report = "\n\n".join(s for s in sections if s)
    (out / "analysis.txt").write_text(report + "\n")
    return report


def spread_section(by_task: dict[str, dict[str, stats.SummaryStat]]) -> str:
    lines = ["== spread =="]
    for task, summ in sorted(by_task.items()):
        means = [s.mean for s in summ.values()]
        lines.append(f"{task or 'default':<20} spread {spread(means):.2f} pp over {len(means)} algorithms")
    tasks = sorted(by_task)
    if len(tasks) >= 2:
        lines.append("")
        lines.append("== rank correlation (Spearman, shared algorithms) ==")
        for i, a in enumerate(tasks):
            for b in tasks[i + 1 :]:
                shared = sorted(set(by_task[a]) & set(by_task[b]))
                if len(shared) < 2:
                    lines.append(f"{a} vs {b}: fewer than 2 shared algorithms")
                    continue
                rho = rank_correlation({k: by_task[a][k].mean for k in shared}, {k: by_task[b][k].mean for k in shared})
                lines.append(f"{a} vs {b}: rho = {rho:.2f} over {len(shared)} algorithms")
    return "\n".join(lines)


def efficiency(gain_pp: float, hours: float) -> float | None:
    """Hours spent per percentage point gained; undefined (None) without a positive gain."""
    if not gain_pp > 0:
        return None
    return hours / gain_pp


def cmd_report(store: ResultsStore) -> str:
    usable = [r for r in store.records if _usable(r)]
    if not store.records:
        return "empty store: no runs recorded"
    lines = [f"{'Task':<14} {'Algorithm':<10} {'Strict':>14} {'n':>3} {'Gain':>7} {'Hours':>8} {'h/pp':>8}  Verdicts"]
    groups: dict[tuple, list[dict]] = {}
    for r in store.records:
        groups.setdefault((r.get("task", ""), r["algorithm"]), []).append(r)
    for (task, algo), recs in sorted(groups.items()):
        ok = [r for r in recs if r in usable]
        verdicts = ",".join(sorted({r.get("verdict", "?") for r in recs}))
        hours = sum(r.get("wall_clock_seconds") or 0.0 for r in recs) / 3600.0
        if not ok:
            lines.append(f"{task:<14} {algo:<10} {'n/a':>14} {0:>3} {'n/a':>7} {hours:>8.4f} {'undef':>8}  {verdicts}")
            continue
        acc = np.array([r["strict_accuracy"] for r in ok])
        std = float(np.std(acc, ddof=1)) if len(acc) > 1 else float("nan")
        gain = float(np.mean([r["strict_accuracy"] - r.get("init_accuracy", 0.0) for r in ok]))
        eff = efficiency(gain, hours)
        acc_s = f"{acc.mean():.2f} ± {std:.2f}" if math.isfinite(std) else f"{acc.mean():.2f}"
        eff_s = f"{eff:.4f}" if eff is not None else "undef"
        lines.append(f"{task:<14} {algo:<10} {acc_s:>14} {len(ok):>3} {gain:>+7.2f} {hours:>8.4f} {eff_s:>8}  {verdicts}")
    return "\n".join(lines)


def store_from_summaries(path: str | Path, rows: Sequence[stats.SummaryStat], task: str = "") -> ResultsStore:
    """Synthesise a store whose per-algorithm seeds reproduce given (mean, std, n) exactly."""
    store = ResultsStore(path)
    for s in rows:
        for i, acc in enumerate(synthetic_samples(s.mean, s.std, s.n)):
            store.add({"task": task, "algorithm": s.algorithm, "seed": i, "config_hash": "summary", "strict_accuracy": float(acc), "verdict": "ok"})
    return store


def synthetic_samples(mean: float, std: float, n: int) -> np.ndarray:
    """n values with exactly the given mean and sample (n-1) standard deviation."""
    if n < 2:
        return np.array([mean] * n, dtype=float)
    base = np.linspace(-1.0, 1.0, n)
    base = base - base.mean()
    base = base / np.std(base, ddof=1)
    return mean + std * base


# ------------------------------------------------------------------ determinism audit


@dataclass
class AuditReport:
    verdict: str
    propagate_seed: bool
    seeds: list[int]
    param_hashes: dict
    accuracies: dict
    permutation_hashes: dict
    identical_params: bool
    identical_metrics: bool
    identical_permutations: bool
    pair_policy: str = (
        "pairs: first verified-correct sample vs first incorrect sample; gold response as chosen when no sample "
        "is correct; problems without an incorrect sample are skipped"
    )

    def to_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        lines = [
            f"verdict: {self.verdict}",
            f"propagate seed to sampler: {self.propagate_seed}",
            f"identical parameters: {self.identical_params}",
            f"identical metrics: {self.identical_metrics}",
            f"identical permutations: {self.identical_permutations}",
            "",
            f"{'seed':>6} {'accuracy':>9}  param hash",
        ]
        for s in self.seeds:
            lines.append(f"{s:>6} {self.accuracies[str(s)]:>9.2f}  {self.param_hashes[str(s)][:16]}")
        lines += ["", self.pair_policy]
        return "\n".join(lines)


class AuditError(RuntimeError):
    pass


def audit_determinism(config: TrainConfig, seeds: Sequence[int], problems: Sequence[Problem], test: Sequence[Problem], model: TinyLM | None = None, pairs=None) -> AuditReport:
    """Train once per seed and compare parameter hashes, accuracies and data orders."""
    if len(seeds) < 2:
        raise AuditError("audit needs at least 2 seeds")
    hashes, accs, perms = {}, {}, {}
    for s in seeds:
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": int(s)})
        try:
            man, m = train(cfg, TrainData(list(problems), pairs), model)
        except Exception as exc:
            raise AuditError(f"training failed for seed {s}: {exc}") from exc
        summary, _ = evaluate(m, list(test), max_tokens=cfg.max_new_tokens)
        hashes[str(s)] = man.param_hash
        accs[str(s)] = summary.strict_accuracy
        perms[str(s)] = hashlib.sha256(json.dumps(man.permutations).encode()).hexdigest()
    same_params = len(set(hashes.values())) == 1
    same_metrics = len(set(accs.values())) == 1
    same_perms = len(set(perms.values())) == 1
    verdict = "DETERMINISTIC-ACROSS-SEEDS" if same_params and same_metrics else "SEED-SENSITIVE"
    return AuditReport(
        verdict=verdict,
        propagate_seed=config.propagate_seed_to_sampler,
        seeds=[int(s) for s in seeds],
        param_hashes=hashes,
        accuracies=accs,
        permutation_hashes=perms,
        identical_params=same_params,
        identical_metrics=same_metrics,
        identical_permutations=same_perms,
    )
