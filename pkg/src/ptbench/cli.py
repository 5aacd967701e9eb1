"""Command-line entry point: ``ptbench <subcommand>``."""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import experiments as ex
from . import losses, rl, stats
from .evaluator import evaluate, write_records
from .model import TinyLM
from .taskdata import generate_problems, read_pairs, write_jsonl
from .trainer import TrainConfig, TrainConfigError, TrainData, train

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2
_EXPONENT = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)[eE][-+]?\d+")


# ------------------------------------------------------------------ config helpers


def default_config_dir() -> Path:
    return Path(str(resources.files("ptbench") / "configs"))


def parse_value(text: str):
    """Typed value of a ``--set key=value`` override (YAML scalar rules, plus bare exponents like 1e-4)."""
    value = yaml.safe_load(text)
    if isinstance(value, str) and _EXPONENT.fullmatch(value.strip()):
        return float(value)
    return value


def parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def load_flat(path: str | Path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise SystemExit(f"{path}: config files must be flat key: value mappings")
    return {k: parse_value(v) if isinstance(v, str) else v for k, v in data.items()}


def algorithm_config(name: str, config_dir: Path | None) -> dict:
    d = config_dir or default_config_dir()
    path = d / f"{name}.yaml"
    return load_flat(path) if path.exists() else {}


def csv_list(text: str, cast=str) -> list:
    return [cast(x.strip()) for x in text.split(",") if x.strip()]


def all_algorithms() -> list[str]:
    return ["SFT", *losses.PREFERENCE_VARIANTS, *rl.RL_VARIANTS]


def add_pipeline_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("task")
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-test", type=int, default=256)
    g.add_argument("--task-seed", type=int, default=0)
    g.add_argument("--selfplay-seed", type=int, default=1)
    g.add_argument("--test-seed", type=int, default=0)
    g.add_argument("--difficulty", default="2-step", choices=["1-step", "2-step", "mixed"])
    g.add_argument("--base-epochs", type=int, default=40, help="epochs of the shared SFT warm start")


def pipeline_from(args) -> ex.PipelineConfig:
    return ex.PipelineConfig(
        n_train=args.n_train,
        n_test=args.n_test,
        task_seed=args.task_seed,
        selfplay_seed=args.selfplay_seed,
        test_seed=args.test_seed,
        difficulty=args.difficulty,
        base_epochs=args.base_epochs,
    )


# ------------------------------------------------------------------ subcommands


def cmd_list_algorithms(args) -> int:
    rows = []
    for name in all_algorithms():
        if name in rl.RL_VARIANTS:
            defaults = {f.name: getattr(rl.RLConfig(variant=name), f.name) for f in fields(rl.RLConfig) if f.name != "variant"}
            rows.append({"name": name, "category": "Online RL", "reference": False, "modification": rl.DESCRIPTIONS.get(name, ""), "defaults": defaults})
            continue
        info = losses.get_info(name)
        rows.append(
            {
                "name": name,
                "category": info.family,
                "reference": info.uses_reference,
                "modification": info.modification,
                "defaults": {"beta": 0.1, **info.defaults} if name != "SFT" else {},
            }
        )
    if args.json:
        print(json.dumps(rows, indent=2))
        return EXIT_OK
    print(f"{'Name':<10} {'Category':<24} {'Ref':<4} {'Modification':<44} Defaults")
    for r in rows:
        d = ", ".join(f"{k}={v}" for k, v in r["defaults"].items())
        print(f"{r['name']:<10} {r['category']:<24} {'yes' if r['reference'] else 'no':<4} {r['modification']:<44} {d}")
    return EXIT_OK


def build_config(args) -> TrainConfig:
    flat = {}
    if args.config:
        flat.update(load_flat(args.config))
    elif args.algorithm:
        flat.update(algorithm_config(args.algorithm, Path(args.config_dir) if args.config_dir else None))
    if args.algorithm:
        flat["algorithm"] = args.algorithm
    flat.update(parse_sets(args.set))
    if args.seed is not None:
        flat["seed"] = args.seed
    if "algorithm" not in flat:
        raise SystemExit("give --config or --algorithm")
    cfg = TrainConfig.from_flat(flat)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = build_config(args)
    p = pipeline_from(args)
    out = Path(args.out)
    gold, selfplay, test = ex.load_task(p)
    if args.init:
        init, _ = TinyLM.load(args.init)
        pairs = None
    elif cfg.kind == "sft":
        init, pairs = TinyLM.init(cfg.model, seed=cfg.init_seed), None
    else:
        init, pairs = ex.ensure_base(p, cfg, out, gold, selfplay)
    if args.pairs:
        pairs = read_pairs(args.pairs)
    problems = gold if cfg.kind == "sft" else selfplay
    if cfg.kind == "preference" and pairs is None:
        raise SystemExit("preference training from --init needs --pairs")
    man, model = train(cfg, TrainData(problems, pairs if cfg.kind == "preference" else None), init, out_dir=out / "run")
    summary, records = evaluate(model, test, max_tokens=cfg.max_new_tokens)
    write_records(out / "run" / "eval.jsonl", records)
    print(f"algorithm {cfg.algorithm}  seed {cfg.seed}  verdict {man.verdict}")
    print(f"strict {summary.strict_accuracy:.2f}  flexible {summary.flexible_accuracy:.2f}  format gap {summary.format_gap:+.2f}")
    print(f"checkpoint {man.final_checkpoint}  param hash {man.param_hash[:16]}  {man.wall_clock_seconds:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = TinyLM.load(args.checkpoint)
    test = generate_problems(args.test_seed, args.n_test, args.difficulty, "test")
    summary, records = evaluate(model, test, max_tokens=args.max_tokens)
    if args.records:
        write_records(args.records, records)
    print(f"strict {summary.strict_accuracy:.2f}  flexible {summary.flexible_accuracy:.2f}  format gap {summary.format_gap:+.2f}  n {summary.n_problems}")
    return EXIT_OK


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, seed, n in (("train", args.task_seed, args.n_train), ("test", args.test_seed, args.n_test)):
        write_jsonl(out / f"{split}.jsonl", generate_problems(seed, n, args.difficulty, split))
    print(f"wrote {out / 'train.jsonl'} and {out / 'test.jsonl'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    algos = all_algorithms() if args.algorithms == "all" else csv_list(args.algorithms)
    cdir = Path(args.config_dir) if args.config_dir else None
    spec = ex.SweepSpec(
        algorithms=algos,
        seeds=csv_list(args.seeds, int),
        out_dir=args.out,
        overrides=parse_sets(args.set),
        per_algorithm={a: algorithm_config(a, cdir) for a in algos},
        pipeline=pipeline_from(args),
        parallelism=args.jobs,
        overwrite=args.overwrite,
    )
    try:
        ex.cmd_sweep(spec)
    except ex.SweepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.summary_csv:
        rows = stats.read_summary_csv(args.summary_csv)
        summ = {r.algorithm: r for r in rows}
        try:
            _, text = ex.analyze(summ, args.baseline, args.alpha)
        except (ex.StatsLookupError, stats.StatsError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVARIANT
        print(text)
        return EXIT_OK
    store = ex.ResultsStore(args.store)
    try:
        print(ex.cmd_analyze(store, args.baseline, args.alpha, args.out))
    except (ex.StatsLookupError, stats.StatsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_report(args) -> int:
    print(ex.cmd_report(ex.ResultsStore(args.store)))
    return EXIT_OK


def cmd_check_store(args) -> int:
    store = ex.ResultsStore(args.store)
    errors = store.integrity_errors()
    for e in errors:
        print(e)
    print(f"{len(store.records)} records, {len(errors)} integrity errors")
    return EXIT_INVARIANT if errors else EXIT_OK


def cmd_audit(args) -> int:
    flat = {**algorithm_config(args.algorithm, None), "algorithm": args.algorithm}
    flat.update(parse_sets(args.set))
    flat["propagate_seed_to_sampler"] = args.propagate == "on"
    if args.epochs:
        flat["epochs"] = args.epochs
    flat["checkpoint_every_epoch"] = False
    cfg = TrainConfig.from_flat(flat)
    p = pipeline_from(args)
    gold, selfplay, test = ex.load_task(p)
    model = pairs = None
    problems = gold
    if cfg.kind != "sft":
        model, pairs = ex.ensure_base(p, cfg, Path(args.work_dir), gold, selfplay)
        problems = selfplay
    try:
        report = ex.audit_determinism(cfg, csv_list(args.seeds, int), problems, test, model, pairs if cfg.kind == "preference" else None)
    except ex.AuditError as exc:
        print(f"audit aborted: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    print(report.render())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2))
    expected = "DETERMINISTIC-ACROSS-SEEDS" if args.propagate == "off" else "SEED-SENSITIVE"
    if args.expect and report.verdict != expected:
        return EXIT_INVARIANT
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptbench", description="Desk-scale post-training benchmark.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-algorithms", help="registered algorithms with category, reference use and defaults")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_list_algorithms)

    p = sub.add_parser("train", help="train and evaluate one run")
    p.add_argument("--config", help="flat YAML config file")
    p.add_argument("--algorithm", help="algorithm id (loads its bundled config unless --config is given)")
    p.add_argument("--config-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--init", help="initial checkpoint")
    p.add_argument("--pairs", help="preference pairs JSONL")
    p.add_argument("--out", required=True)
    add_pipeline_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-test", type=int, default=256)
    p.add_argument("--test-seed", type=int, default=0)
    p.add_argument("--difficulty", default="2-step", choices=["1-step", "2-step", "mixed"])
    p.add_argument("--max-tokens", type=int, default=24)
    p.add_argument("--records", help="write per-problem records (JSONL)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="write train/test problems as JSONL")
    p.add_argument("--out", required=True)
    add_pipeline_args(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("sweep", help="train algorithm x seed grid into a results store")
    p.add_argument("--algorithms", required=True, help="comma list or 'all'")
    p.add_argument("--seeds", default="42,123,456")
    p.add_argument("--out", required=True)
    p.add_argument("--config-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override applied to every cell")
    p.add_argument("--jobs", type=int, default=0, help="concurrent cells (default: cores - 1)")
    p.add_argument("--overwrite", action="store_true")
    add_pipeline_args(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze", help="significance tests against a baseline")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--store")
    src.add_argument("--summary-csv", help="analyze published (algorithm, mean, std, n) rows instead")
    p.add_argument("--baseline", default="DPO")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="analysis")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("report", help="accuracy and wall-clock summary of a store")
    p.add_argument("--store", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("check-store", help="verify every record's config hash")
    p.add_argument("--store", required=True)
    p.set_defaults(fn=cmd_check_store)

    p = sub.add_parser("audit-determinism", help="train per seed and compare parameter hashes")
    p.add_argument("--algorithm", default="SFT")
    p.add_argument("--seeds", default="42,123,456")
    p.add_argument("--propagate", choices=["on", "off"], default="off")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--work-dir", default="audit-work")
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--expect", action="store_true", help="exit nonzero unless the verdict matches the flag")
    add_pipeline_args(p)
    p.set_defaults(fn=cmd_audit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (TrainConfigError, losses.LossConfigError, rl.RLConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
