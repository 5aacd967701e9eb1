"""Fixed symbol vocabulary for the synthetic arithmetic task."""

from __future__ import annotations

from typing import Iterable, Sequence

SPECIALS = ["<pad>", "<bos>", "<eos>"]
DIGITS = [str(d) for d in range(10)]
SYMBOLS = ["+", "-", "=", ";", "####", "?", "."]
WORDS = ["has", "gets", "finds", "gives", "loses", "how", "many", "then"]
NAMES = ["Ann", "Ben", "Cal", "Dee", "Eli", "Fay"]
OBJECTS = ["apples", "pens", "coins", "cards", "shells", "beads"]

TOKENS: list[str] = SPECIALS + DIGITS + SYMBOLS + WORDS + NAMES + OBJECTS
VOCAB_SIZE = len(TOKENS)
ID = {tok: i for i, tok in enumerate(TOKENS)}

PAD, BOS, EOS = ID["<pad>"], ID["<bos>"], ID["<eos>"]
MARKER = ID["####"]
DIGIT_IDS = frozenset(ID[d] for d in DIGITS)

assert PAD == 0


def encode_number(n: int) -> list[int]:
    text = str(n)
    out = [ID["-"]] if text.startswith("-") else []
    return out + [ID[c] for c in text.lstrip("-")]


def encode(words: Iterable[str | int]) -> list[int]:
    out: list[int] = []
    for w in words:
        if isinstance(w, int):
            out.extend(encode_number(w))
        else:
            out.append(ID[w])
    return out


def detokenize(tokens: Sequence[int], stop_at_eos: bool = True) -> str:
    """Render token ids as text; consecutive digits fuse into one number."""
    parts: list[str] = []
    prev_digit = False
    for t in tokens:
        t = int(t)
        if stop_at_eos and t == EOS:
            break
        if t in (PAD, BOS, EOS):
            prev_digit = False
            continue
        tok = TOKENS[t] if 0 <= t < VOCAB_SIZE else "<unk>"
        is_digit = t in DIGIT_IDS
        if is_digit and prev_digit:
            parts[-1] += tok
        else:
            parts.append(tok)
        prev_digit = is_digit
    return " ".join(parts)
