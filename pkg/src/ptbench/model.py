"""Tiny windowed-MLP language model with exact log-probabilities and hand-derived gradients.

The network is deliberately small: every position sees a fixed causal window of
token embeddings, runs two MLP blocks and projects back through the (tied)
embedding matrix.  All arithmetic is float64 so finite-difference checks are tight.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PAD_ID = 0

BASE_NAMES = ("embed", "out_bias", "w1", "b1", "w2", "b2", "proj", "proj_bias")
ADAPTED = ("w1", "w2", "proj")


class SequenceLengthError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 40
    context_len: int = 40
    window: int = 20
    dim: int = 16
    hidden: int = 192

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, d, h, w = self.vocab_size, self.dim, self.hidden, self.window
        return {
            "embed": (v, d),
            "out_bias": (v,),
            "w1": (h, w * d),
            "b1": (h,),
            "w2": (h, h),
            "b2": (h,),
            "proj": (d, h),
            "proj_bias": (d,),
        }


@dataclass(frozen=True)
class AdapterConfig:
    """Low-rank deltas on the MLP and head-projection matrices: W + (alpha/rank) A @ B."""

    rank: int = 16
    alpha: float = 32.0
    enabled: bool = False
    target: tuple[str, ...] = ADAPTED

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def shapes(self, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        if not self.enabled:
            return {}
        base = cfg.shapes()
        out = {}
        for name in self.target:
            rows, cols = base[name]
            out[f"{name}.lora_a"] = (rows, self.rank)
            out[f"{name}.lora_b"] = (self.rank, cols)
        return out


@dataclass
class SequenceLogProb:
    total: float
    per_token: list[float]
    length: int


class TinyLM:
    """Parameters plus forward/backward for the windowed MLP language model.

    Instances are treated as immutable by the scoring functions; training code
    produces new instances through :meth:`with_flat`.
    """

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, np.ndarray],
        adapter: AdapterConfig | None = None,
    ):
        self.config = config
        self.adapter = adapter or AdapterConfig()
        self.params = params
        expected = self.shapes()
        if set(expected) != set(params):
            raise ValueError(f"parameter names mismatch: {sorted(set(expected) ^ set(params))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")

    # ------------------------------------------------------------------ params

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        seed: int = 0,
        adapter: AdapterConfig | None = None,
        scale: float = 1.0,
    ) -> "TinyLM":
        rng = np.random.default_rng(seed)
        adapter = adapter or AdapterConfig()
        params: dict[str, np.ndarray] = {}
        for name, shape in config.shapes().items():
            if name in ("out_bias", "b1", "b2", "proj_bias"):
                params[name] = np.zeros(shape)
            elif name == "embed":
                params[name] = rng.normal(0.0, scale * 0.5, shape)
            else:
                params[name] = rng.normal(0.0, scale / np.sqrt(shape[1]), shape)
        params.update(_init_adapter(config, adapter, rng))
        return cls(config, params, adapter)

    @classmethod
    def zeros(cls, config: ModelConfig, adapter: AdapterConfig | None = None) -> "TinyLM":
        adapter = adapter or AdapterConfig()
        shapes = {**config.shapes(), **adapter.shapes(config)}
        return cls(config, {k: np.zeros(s) for k, s in shapes.items()}, adapter)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {**self.config.shapes(), **self.adapter.shapes(self.config)}

    def names(self) -> list[str]:
        return list(self.shapes())

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.names()])

    def with_flat(self, vec: np.ndarray) -> "TinyLM":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"flat vector has {vec.size} entries, model has {self.n_params}")
        params, off = {}, 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            params[name] = vec[off : off + size].reshape(shape).copy()
            off += size
        return TinyLM(self.config, params, self.adapter)

    def with_adapter(self, adapter: AdapterConfig, seed: int = 0) -> "TinyLM":
        """Attach a fresh adapter (A random, B zero), so outputs are unchanged."""
        rng = np.random.default_rng(seed)
        params = {n: self.params[n].copy() for n in self.config.shapes()}
        params.update(_init_adapter(self.config, adapter, rng))
        return TinyLM(self.config, params, adapter)

    def trainable_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector; with an adapter only its factors train."""
        parts = []
        for name, shape in self.shapes().items():
            train = (".lora_" in name) if self.adapter.enabled else True
            parts.append(np.full(int(np.prod(shape)), train))
        return np.concatenate(parts)

    def param_hash(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    def effective(self, name: str) -> np.ndarray:
        w = self.params[name]
        if self.adapter.enabled and name in self.adapter.target:
            a = self.params[f"{name}.lora_a"]
            b = self.params[f"{name}.lora_b"]
            return w + self.adapter.scale * (a @ b)
        return w

    # ----------------------------------------------------------------- forward

    def _check(self, tokens: Sequence[int]) -> None:
        if len(tokens) > self.config.context_len:
            raise SequenceLengthError(
                f"sequence of {len(tokens)} tokens exceeds context_len={self.config.context_len}"
            )
        for t in tokens:
            if not 0 <= int(t) < self.config.vocab_size:
                raise VocabularyError(f"token {t} outside vocabulary of size {self.config.vocab_size}")

    def _windows(self, tokens: np.ndarray) -> np.ndarray:
        """(B, L) token ids -> (B, L, W) window ids, left-padded with PAD."""
        w = self.config.window
        bsz, length = tokens.shape
        padded = np.concatenate([np.full((bsz, w - 1), PAD_ID, dtype=tokens.dtype), tokens], axis=1)
        idx = np.arange(length)[:, None] + np.arange(w)[None, :]
        return padded[:, idx]

    def _hidden(self, win: np.ndarray):
        """Window ids (..., W) -> intermediate activations for every position."""
        embed = self.params["embed"]
        u = embed[win].reshape(*win.shape[:-1], -1)
        w1, w2, proj = self.effective("w1"), self.effective("w2"), self.effective("proj")
        h1 = np.tanh(u @ w1.T + self.params["b1"])
        a2 = np.tanh(h1 @ w2.T + self.params["b2"])
        h2 = h1 + a2
        z = h2 @ proj.T + self.params["proj_bias"]
        logits = z @ embed.T + self.params["out_bias"]
        return u, h1, a2, h2, z, logits

    def log_probs(self, tokens: Sequence[int]) -> np.ndarray:
        """Full next-token log-distributions, shape (L, V); row t predicts token t+1."""
        self._check(tokens)
        arr = np.asarray(tokens, dtype=np.int64)[None, :]
        logits = self._hidden(self._windows(arr))[-1][0]
        return log_softmax(logits)

    def next_logits(self, seqs: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Logits at ``positions[b]`` of each row of ``seqs`` (B, L) -> (B, V)."""
        w = self.config.window
        padded = np.concatenate([np.full((seqs.shape[0], w - 1), PAD_ID, dtype=seqs.dtype), seqs], axis=1)
        idx = positions[:, None] + np.arange(w)[None, :]
        win = np.take_along_axis(padded, idx, axis=1)
        return self._hidden(win)[-1]

    def forward_batch(self, batch: "TokenBatch") -> tuple[np.ndarray, dict]:
        """Per-target log-probs (B, L-1) for a padded batch, plus a backward cache."""
        tokens = batch.tokens
        win = self._windows(tokens[:, :-1])
        u, h1, a2, h2, z, logits = self._hidden(win)
        lp = log_softmax(logits)
        targets = tokens[:, 1:]
        tok_lp = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
        cache = dict(win=win, u=u, h1=h1, a2=a2, h2=h2, z=z, lp=lp, targets=targets)
        return tok_lp, cache

    def backward(self, cache: dict, weights: np.ndarray) -> np.ndarray:
        """Flat gradient of sum(weights * token_logprobs) w.r.t. all parameters."""
        lp, targets = cache["lp"], cache["targets"]
        win, u, h1, a2, h2, z = (cache[k] for k in ("win", "u", "h1", "a2", "h2", "z"))
        cfg = self.config
        probs = np.exp(lp)
        dlogits = -weights[..., None] * probs
        np.put_along_axis(
            dlogits,
            targets[..., None],
            np.take_along_axis(dlogits, targets[..., None], axis=-1) + weights[..., None],
            axis=-1,
        )
        dlogits = dlogits.reshape(-1, cfg.vocab_size)
        z2 = z.reshape(-1, cfg.dim)
        h2f = h2.reshape(-1, cfg.hidden)
        h1f = h1.reshape(-1, cfg.hidden)
        a2f = a2.reshape(-1, cfg.hidden)
        uf = u.reshape(-1, cfg.window * cfg.dim)
        embed = self.params["embed"]
        w1, w2, proj = self.effective("w1"), self.effective("w2"), self.effective("proj")

        g: dict[str, np.ndarray] = {}
        g["out_bias"] = dlogits.sum(0)
        d_embed = dlogits.T @ z2
        dz = dlogits @ embed
        g["proj"] = dz.T @ h2f
        g["proj_bias"] = dz.sum(0)
        dh2 = dz @ proj
        dpre2 = dh2 * (1.0 - a2f**2)
        g["w2"] = dpre2.T @ h1f
        g["b2"] = dpre2.sum(0)
        dh1 = dh2 + dpre2 @ w2
        dpre1 = dh1 * (1.0 - h1f**2)
        g["w1"] = dpre1.T @ uf
        g["b1"] = dpre1.sum(0)
        du = (dpre1 @ w1).reshape(-1, cfg.dim)
        np.add.at(d_embed, win.reshape(-1), du)
        g["embed"] = d_embed

        if self.adapter.enabled:
            s = self.adapter.scale
            for name in self.adapter.target:
                a = self.params[f"{name}.lora_a"]
                b = self.params[f"{name}.lora_b"]
                g[f"{name}.lora_a"] = s * g[name] @ b.T
                g[f"{name}.lora_b"] = s * a.T @ g[name]
        return np.concatenate([g[n].ravel() for n in self.names()])

    # -------------------------------------------------------------- checkpoint

    def save(self, path: str | Path, config_hash: str = "") -> None:
        header = {
            "model": asdict(self.config),
            "adapter": {**asdict(self.adapter), "target": list(self.adapter.target)},
            "config_hash": config_hash,
            "shapes": {k: list(v) for k, v in self.shapes().items()},
        }
        raw = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(self.flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["TinyLM", dict]:
        data = Path(path).read_bytes()
        if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        off = len(CKPT_MAGIC)
        (n,) = struct.unpack("<I", data[off : off + 4])
        header = json.loads(data[off + 4 : off + 4 + n])
        config = ModelConfig(**header["model"])
        ad = header["adapter"]
        adapter = AdapterConfig(rank=ad["rank"], alpha=ad["alpha"], enabled=ad["enabled"], target=tuple(ad["target"]))
        vec = np.frombuffer(data[off + 4 + n :], dtype="<f8").astype(np.float64)
        model = cls.zeros(config, adapter).with_flat(vec)
        return model, header


CKPT_MAGIC = b"PTBCKPT1"


def _init_adapter(config: ModelConfig, adapter: AdapterConfig, rng) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in adapter.shapes(config).items():
        if name.endswith("lora_a"):
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        else:
            out[name] = np.zeros(shape)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    y = x - m
    return y - np.log(np.exp(y).sum(axis=-1, keepdims=True))


@dataclass
class TokenBatch:
    """Right-padded prompt+response sequences with a response-token mask.

    ``mask[b, t]`` marks whether target ``tokens[b, t+1]`` is a response token.
    """

    tokens: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def build(cls, prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]) -> "TokenBatch":
        seqs = [list(p) + list(r) for p, r in zip(prompts, responses)]
        width = max(len(s) for s in seqs)
        tokens = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), width - 1))
        for i, (p, r) in enumerate(zip(prompts, responses)):
            s = seqs[i]
            tokens[i, : len(s)] = s
            mask[i, len(p) - 1 : len(s) - 1] = 1.0
        lengths = np.array([len(r) for r in responses], dtype=np.int64)
        return cls(tokens, mask, lengths)


# ------------------------------------------------------------------ operations


def score_sequence(model, prompt: Sequence[int], response: Sequence[int]) -> SequenceLogProb:
    """Exact log-probability of ``response`` given ``prompt``."""
    tokens = list(prompt) + list(response)
    lp = model.log_probs(tokens)
    start = len(prompt)
    per_token = [float(lp[t - 1, tokens[t]]) for t in range(start, len(tokens))]
    return SequenceLogProb(total=float(sum(per_token)), per_token=per_token, length=len(per_token))


def grad_logprob(model: TinyLM, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
    model._check(list(prompt) + list(response))
    batch = TokenBatch.build([prompt], [response])
    _, cache = model.forward_batch(batch)
    return model.backward(cache, batch.mask)


def sample(
    model: TinyLM,
    prompt: Sequence[int],
    temperature: float,
    rng: np.random.Generator,
    max_tokens: int,
    greedy: bool = False,
    eos_id: int | None = None,
) -> list[int]:
    return sample_batch(model, [prompt], temperature, rng, max_tokens, greedy=greedy, eos_id=eos_id)[0]


def sample_batch(
    model: TinyLM,
    prompts: Sequence[Sequence[int]],
    temperature: float,
    rng: np.random.Generator,
    max_tokens: int,
    greedy: bool = False,
    eos_id: int | None = None,
) -> list[list[int]]:
    """Autoregressive sampling for several prompts at once (inverse-CDF draws)."""
    if not greedy and not temperature > 0:
        raise ValueError("temperature must be > 0 unless greedy=True")
    for p in prompts:
        model._check(p)
    n = len(prompts)
    lens = np.array([len(p) for p in prompts])
    budget = np.minimum(max_tokens, model.config.context_len - lens)
    width = int(lens.max() + max(budget.max(), 0) + 1)
    seqs = np.full((n, width), PAD_ID, dtype=np.int64)
    for i, p in enumerate(prompts):
        seqs[i, : len(p)] = p
    out: list[list[int]] = [[] for _ in range(n)]
    active = budget > 0
    pos = lens.copy()
    while active.any():
        idx = np.flatnonzero(active)
        logits = model.next_logits(seqs[idx], pos[idx] - 1)
        if greedy:
            choice = logits.argmax(axis=-1)
        else:
            probs = np.exp(log_softmax(logits / temperature))
            cdf = np.cumsum(probs, axis=-1)
            u = rng.random(len(idx))[:, None] * cdf[:, -1:]
            choice = np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)
        for j, i in enumerate(idx):
            tok = int(choice[j])
            out[i].append(tok)
            seqs[i, pos[i]] = tok
            pos[i] += 1
            if (eos_id is not None and tok == eos_id) or len(out[i]) >= budget[i]:
                active[i] = False
    return out


class BigramModel:
    """Count-table bigram model; the brute-force oracle for scoring."""

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)
        self.config = ModelConfig(vocab_size=counts.shape[0], context_len=10**9)

    @classmethod
    def fit(cls, corpus: Sequence[Sequence[int]], vocab_size: int, smoothing: float = 0.0) -> "BigramModel":
        counts = np.full((vocab_size, vocab_size), smoothing)
        for seq in corpus:
            for a, b in zip(seq[:-1], seq[1:]):
                counts[a, b] += 1
        return cls(counts)

    def log_probs(self, tokens: Sequence[int]) -> np.ndarray:
        rows = self.counts[np.asarray(tokens, dtype=np.int64)]
        with np.errstate(divide="ignore"):
            return np.log(rows) - np.log(rows.sum(axis=-1, keepdims=True))
