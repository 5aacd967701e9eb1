"""Synthetic verifiable arithmetic task, self-play preference pairs and seeded data ordering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import vocab
from .evaluator import extract_strict
from .model import sample_batch

DIFFICULTIES = ("1-step", "2-step", "mixed")
SPLITS = ("train", "test")
TEST_RESIDUE = 0
SPLIT_MODULUS = 5

# every operand, intermediate and answer is a two-digit number
OPERAND_MIN = 10
OPERAND_MAX = 99
VALUE_MAX = 99
RESULT_MIN = 10

_INC = ("gets", "finds")
_DEC = ("gives", "loses")


@dataclass
class Problem:
    id: str
    prompt: list[int]
    gold_answer: int
    gold_response: list[int]
    operands: list[int] = field(default_factory=list)
    ops: list[str] = field(default_factory=list)

    @property
    def text(self) -> str:
        return vocab.detokenize(self.prompt)


@dataclass
class PreferencePair:
    problem_id: str
    prompt: list[int]
    chosen: list[int]
    rejected: list[int]
    provenance: dict = field(default_factory=dict)


def split_of(operands: Sequence[int]) -> str:
    """Train/test membership is a residue class of a weighted operand sum.

    Every digit value still occurs at every position in both splits, while no
    operand tuple is shared between them.
    """
    key = sum((2 * i + 1) * v for i, v in enumerate(operands)) % SPLIT_MODULUS
    return "test" if key == TEST_RESIDUE else "train"


def evaluate_expression(operands: Sequence[int], ops: Sequence[str]) -> int:
    """Left-to-right evaluation of ``operands[0] ops[0] operands[1] ...``."""
    acc = operands[0]
    for op, v in zip(ops, operands[1:]):
        acc = acc + v if op == "+" else acc - v
    return acc


def _draw(rng: np.random.Generator, steps: int) -> tuple[list[int], list[str]]:
    lo, top = OPERAND_MIN, VALUE_MAX
    a = int(rng.integers(lo, OPERAND_MAX + 1))
    operands, ops, acc = [a], [], a
    for _ in range(steps):
        choices = []
        if acc + lo <= top:
            choices.append("+")
        if acc - lo >= RESULT_MIN:
            choices.append("-")
        op = choices[int(rng.integers(len(choices)))]
        hi = min(OPERAND_MAX, top - acc) if op == "+" else min(OPERAND_MAX, acc - RESULT_MIN)
        v = int(rng.integers(lo, hi + 1))
        acc = acc + v if op == "+" else acc - v
        operands.append(v)
        ops.append(op)
    return operands, ops


def _render(operands: list[int], ops: list[str], rng: np.random.Generator) -> tuple[list[int], list[int], int]:
    name = vocab.NAMES[int(rng.integers(len(vocab.NAMES)))]
    obj = vocab.OBJECTS[int(rng.integers(len(vocab.OBJECTS)))]
    words: list = ["<bos>", name, "has", operands[0], obj, "."]
    for op, v in zip(ops, operands[1:]):
        verbs = _INC if op == "+" else _DEC
        words += [verbs[int(rng.integers(2))], v, "."]
    words += ["how", "many", "?"]
    prompt = vocab.encode(words)

    resp: list = []
    acc = operands[0]
    for k, (op, v) in enumerate(zip(ops, operands[1:])):
        if k:
            resp.append(";")
        new = acc + v if op == "+" else acc - v
        resp += [acc, op, v, "=", new]
        acc = new
    resp += ["####", acc, "<eos>"]
    return prompt, vocab.encode(resp), acc


def generate_problems(seed: int, count: int, difficulty: str = "2-step", split: str = "train") -> list[Problem]:
    """Deterministic problem list; train and test are disjoint residue classes of operand tuples."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    out: list[Problem] = []
    for index in range(count):
        rng = np.random.default_rng([seed, SPLITS.index(split), DIFFICULTIES.index(difficulty), index])
        if difficulty == "mixed":
            steps = 1 + int(rng.integers(2))
        else:
            steps = 1 if difficulty == "1-step" else 2
        while True:
            operands, ops = _draw(rng, steps)
            if split_of(operands) == split:
                break
        prompt, response, answer = _render(operands, ops, rng)
        out.append(
            Problem(
                id=f"{split}-{difficulty}-s{seed}-{index:05d}",
                prompt=prompt,
                gold_answer=answer,
                gold_response=response,
                operands=operands,
                ops=ops,
            )
        )
    return out


def reward(tokens: Sequence[int], gold_answer: int) -> float:
    """Task verifier: 1.0 iff the strict-extracted answer equals the gold answer."""
    return 1.0 if extract_strict(vocab.detokenize(tokens)) == gold_answer else 0.0


def build_pairs(
    problems: Sequence[Problem],
    model,
    samples_per_prompt: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    max_tokens: int = 24,
) -> list[PreferencePair]:
    """Self-play pairs: a verified-correct sample against an incorrect one.

    When no sample is correct the gold response stands in as ``chosen``; problems
    with no incorrect sample yield no pair.
    """
    if samples_per_prompt < 2:
        raise ValueError("samples_per_prompt must be >= 2")
    prompts = [p.prompt for p in problems for _ in range(samples_per_prompt)]
    outs = sample_batch(model, prompts, temperature, rng, max_tokens, eos_id=vocab.EOS)
    pairs: list[PreferencePair] = []
    for i, prob in enumerate(problems):
        group = outs[i * samples_per_prompt : (i + 1) * samples_per_prompt]
        correct = [g for g in group if reward(g, prob.gold_answer) == 1.0]
        wrong = [g for g in group if reward(g, prob.gold_answer) == 0.0]
        if not wrong:
            continue
        if correct:
            chosen, source = correct[0], "self-play-correct"
        else:
            chosen, source = list(prob.gold_response), "gold"
        rejected = wrong[0]
        if chosen == rejected:
            continue
        pairs.append(
            PreferencePair(
                problem_id=prob.id,
                prompt=list(prob.prompt),
                chosen=list(chosen),
                rejected=list(rejected),
                provenance={"chosen": source, "rejected": "self-play-incorrect"},
            )
        )
    return pairs


# ------------------------------------------------------------------ ordering


@dataclass
class SamplerState:
    """Data-order sampler settings.

    With ``propagate_run_seed`` off the run seed never reaches the shuffle, so every
    run sees the same order.
    """

    epoch: int = 0
    shuffle_seed: int = 0
    propagate_run_seed: bool = True


def epoch_order(n_items: int, state: SamplerState, run_seed: int) -> np.ndarray:
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    if state.propagate_run_seed:
        key = [state.shuffle_seed, state.epoch, 1, run_seed]
    else:
        key = [state.shuffle_seed, state.epoch, 0]
    return np.random.default_rng(key).permutation(n_items)


# ---------------------------------------------------------------- persistence


def write_jsonl(path: str | Path, items: Sequence) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(json.dumps(asdict(it), sort_keys=True) + "\n")


def read_problems(path: str | Path) -> list[Problem]:
    return [Problem(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def read_pairs(path: str | Path) -> list[PreferencePair]:
    return [PreferencePair(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def audit_determinism(config, seeds, problems, test, model=None, pairs=None):
    """Cross-seed determinism audit; see :func:`ptbench.experiments.audit_determinism`."""
    from .experiments import audit_determinism as _audit

    return _audit(config, seeds, problems, test, model, pairs)
