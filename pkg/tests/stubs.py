"""Scripted policies that plug into the samplers."""

from __future__ import annotations

import numpy as np

from ptbench import vocab
from ptbench.model import ModelConfig


class ScriptedPolicy:
    """Emits a fixed response per prompt (with near-certainty), EOS for unknown prompts."""

    def __init__(self, responses: dict[tuple, list[int]], confidence: float = 50.0):
        self.responses = responses
        self.config = ModelConfig()
        self.confidence = confidence

    def _check(self, tokens):
        pass

    def next_logits(self, seqs, positions):
        out = np.zeros((len(seqs), self.config.vocab_size))
        for i, (row, pos) in enumerate(zip(seqs, positions)):
            seq = [int(t) for t in row[: pos + 1]]
            tok = vocab.EOS
            for prompt, resp in self.responses.items():
                k = len(prompt)
                if tuple(seq[:k]) == prompt and len(seq) - k < len(resp):
                    tok = resp[len(seq) - k]
                    break
            out[i, tok] = self.confidence
        return out


def gold_policy(problems) -> ScriptedPolicy:
    return ScriptedPolicy({tuple(p.prompt): list(p.gold_response) for p in problems})


def silent_policy() -> ScriptedPolicy:
    return ScriptedPolicy({})
