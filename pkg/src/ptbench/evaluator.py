"""Exact-match evaluation: strict/flexible answer extraction, format gap, spread and rank correlation."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import vocab
from .model import sample_batch

_MARKER = "####"
_STRICT = re.compile(r"#### (-?\d+)(?![\d\w])")
_INTEGER = re.compile(r"(?<![\d\w])-?\d+(?![\d\w])")


def extract_strict(text: str) -> int | None:
    """Integer after the final ``#### `` marker, or None if that marker is malformed."""
    pos = text.rfind(_MARKER)
    if pos < 0:
        return None
    m = _STRICT.match(text, pos)
    return int(m.group(1)) if m else None


def extract_flexible(text: str) -> int | None:
    """Last integer literal anywhere in the text."""
    found = _INTEGER.findall(text)
    return int(found[-1]) if found else None


@dataclass
class EvalRecord:
    problem_id: str
    generated: list[int]
    text: str
    strict_extracted: int | None
    flexible_extracted: int | None
    strict_correct: bool
    flexible_correct: bool
    error: str | None = None


@dataclass
class EvalSummary:
    strict_accuracy: float
    flexible_accuracy: float
    format_gap: float
    n_problems: int


def format_gap(strict_accuracy: float, flexible_accuracy: float) -> float:
    return strict_accuracy - flexible_accuracy


def score_text(problem_id: str, tokens: Sequence[int], gold: int) -> EvalRecord:
    text = vocab.detokenize(tokens)
    s, f = extract_strict(text), extract_flexible(text)
    return EvalRecord(
        problem_id=problem_id,
        generated=[int(t) for t in tokens],
        text=text,
        strict_extracted=s,
        flexible_extracted=f,
        strict_correct=s is not None and s == gold,
        flexible_correct=f is not None and f == gold,
    )


def summarize(records: Sequence[EvalRecord]) -> EvalSummary:
    n = len(records)
    if n == 0:
        return EvalSummary(0.0, 0.0, 0.0, 0)
    strict = 100.0 * sum(r.strict_correct for r in records) / n
    flexible = 100.0 * sum(r.flexible_correct for r in records) / n
    return EvalSummary(strict, flexible, format_gap(strict, flexible), n)


def evaluate(model, problems, max_tokens: int = 24, batch_size: int = 256) -> tuple[EvalSummary, list[EvalRecord]]:
    """Greedy decoding on every problem; both accuracies come from the same generations."""
    records: list[EvalRecord] = []
    rng = np.random.default_rng(0)  # unused under greedy decoding
    for start in range(0, len(problems), batch_size):
        chunk = problems[start : start + batch_size]
        try:
            outs = sample_batch(model, [p.prompt for p in chunk], 1.0, rng, max_tokens, greedy=True, eos_id=vocab.EOS)
        except Exception as exc:  # generation failure counts as incorrect
            for p in chunk:
                rec = score_text(p.id, [], p.gold_answer)
                rec.error = f"{type(exc).__name__}: {exc}"
                records.append(rec)
            continue
        records.extend(score_text(p.id, out, p.gold_answer) for p, out in zip(chunk, outs))
    return summarize(records), records


def implication_audit(records: Sequence[EvalRecord]) -> list[EvalRecord]:
    """Counterexamples to strict-correct => flexible-correct among outputs whose
    marker integer is also their last number."""
    bad = []
    for r in records:
        if r.strict_correct and r.strict_extracted == r.flexible_extracted and not r.flexible_correct:
            bad.append(r)
    return bad


def write_records(path: str | Path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def spread(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("spread of an empty collection")
    return float(max(values) - min(values))


def _average_ranks(scores: Sequence[float]) -> np.ndarray:
    """Rank 1 = highest score; tied scores share their average rank."""
    x = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_correlation(scores_a: Mapping[str, float], scores_b: Mapping[str, float]) -> float:
    """Spearman correlation between two keyed score maps (Pearson on average ranks)."""
    if set(scores_a) != set(scores_b):
        raise ValueError(f"key sets differ: {sorted(set(scores_a) ^ set(scores_b))}")
    keys = sorted(scores_a)
    if len(keys) < 2:
        raise ValueError("rank correlation needs at least 2 keys")
    ra = _average_ranks([scores_a[k] for k in keys])
    rb = _average_ranks([scores_b[k] for k in keys])
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        return float("nan")
    return float((ra * rb).sum() / denom)
