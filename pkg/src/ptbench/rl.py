"""Group-relative policy gradient objectives on the verifiable task.

The three objectives share rollout generation and group-normalised advantages and
differ only in how importance ratios enter the surrogate:

* SGRPO: per-token ratio inside a min/clip surrogate, averaged over all tokens.
* GSPO: one geometric-mean sequence ratio per completion.
* CISPO: REINFORCE on log-probs weighted by a clipped, stop-gradient token ratio.

Objectives operate on per-token log-prob arrays so they can be checked against
finite differences without a model; the trainer chains the returned partials
through :meth:`TinyLM.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import vocab
from .model import TokenBatch, sample_batch
from .taskdata import Problem, reward

RL_VARIANTS = ("SGRPO", "GSPO", "CISPO")
DESCRIPTIONS = {
    "SGRPO": "Token-level clipped ratio, group advantages",
    "GSPO": "Sequence-level clipped ratio",
    "CISPO": "Clipped importance weights, stop-gradient",
}


class RLConfigError(ValueError):
    pass


@dataclass
class RLConfig:
    variant: str = "SGRPO"
    group_size: int = 4
    kl_coeff: float = 0.0
    clip_low: float = 0.8
    clip_high: float = 1.2
    max_rollout_tokens: int = 24
    temperature: float = 1.0
    adv_eps: float = 1e-8
    updates_per_batch: int = 1

    def validate(self) -> None:
        if self.variant not in RL_VARIANTS:
            raise RLConfigError(f"unknown RL variant {self.variant!r}; expected one of {RL_VARIANTS}")
        if self.group_size < 2:
            raise RLConfigError("group_size must be >= 2")
        if not self.clip_low < 1.0 < self.clip_high:
            raise RLConfigError("need clip_low < 1 < clip_high")
        if not self.temperature > 0:
            raise RLConfigError("temperature must be > 0")


@dataclass
class RolloutGroup:
    problem_id: str
    prompt: list[int]
    completions: list[list[int]]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logps: list[np.ndarray] = field(default_factory=list)

    def ratios(self, new_logps: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [np.exp(n - o) for n, o in zip(new_logps, self.old_logps)]


@dataclass
class RLDiagnostics:
    clip_fraction: float = 0.0
    approx_kl: float = 0.0
    nan_flag: bool = False
    mean_reward: float = 0.0

    def as_dict(self) -> dict:
        return {
            "clip_fraction": self.clip_fraction,
            "approx_kl": self.approx_kl,
            "nan_flag": self.nan_flag,
            "mean_reward": self.mean_reward,
        }


@dataclass
class ObjectiveResult:
    loss: float
    grads: list[np.ndarray]
    diagnostics: RLDiagnostics


def group_advantages(rewards, epsilon: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + epsilon); an all-equal group gives exact zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("group_advantages needs at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centred = r - r.mean()
    return centred / (r.std() + epsilon)


def approx_kl(old_logps, new_logps) -> float:
    """Mean of exp(d) - d - 1 with d = old - new (non-negative k3 estimator)."""
    old = np.asarray(old_logps, dtype=np.float64)
    new = np.asarray(new_logps, dtype=np.float64)
    if old.shape != new.shape:
        raise ValueError(f"log-prob arrays differ in shape: {old.shape} vs {new.shape}")
    if old.size == 0:
        return 0.0
    with np.errstate(all="ignore"):
        d = old - new
        return float(np.mean(np.exp(d) - d - 1.0))


# ------------------------------------------------------------------ objectives


def _flatten(groups: Sequence[RolloutGroup], new_logps: Sequence[Sequence[np.ndarray]]):
    """Per-completion arrays across groups plus bookkeeping for non-finite groups."""
    if len(groups) != len(new_logps):
        raise ValueError("one list of new log-probs per group is required")
    news, olds, advs, owner = [], [], [], []
    bad = set()
    for gi, (g, nl) in enumerate(zip(groups, new_logps)):
        if len(nl) != len(g.completions):
            raise ValueError(f"group {gi}: {len(nl)} log-prob arrays for {len(g.completions)} completions")
        for ci, n in enumerate(nl):
            n = np.asarray(n, dtype=np.float64)
            o = np.asarray(g.old_logps[ci], dtype=np.float64)
            if n.shape != o.shape:
                raise ValueError("new and old log-probs must be aligned")
            a = float(g.advantages[ci])
            if not (np.all(np.isfinite(n)) and np.all(np.isfinite(o)) and np.isfinite(a)):
                bad.add(gi)
            news.append(n)
            olds.append(o)
            advs.append(a)
            owner.append(gi)
    return news, olds, np.array(advs), np.array(owner, dtype=np.int64), bad


def _kl_terms(news, olds, keep, cfg: RLConfig, denom: float):
    """Value and per-token partials of kl_coeff * mean-token k3 KL to the behaviour policy."""
    if cfg.kl_coeff == 0.0:
        return 0.0, [np.zeros_like(n) for n in news]
    val, grads = 0.0, []
    for n, o, k in zip(news, olds, keep):
        if not k:
            grads.append(np.zeros_like(n))
            continue
        d = o - n
        val += float(np.sum(np.exp(d) - d - 1.0))
        grads.append(cfg.kl_coeff * (1.0 - np.exp(d)) / denom)
    return cfg.kl_coeff * val / denom, grads


def _diagnostics(groups, news, olds, clipped: int, counted: int, bad) -> RLDiagnostics:
    rewards = np.concatenate([np.asarray(g.rewards, dtype=np.float64) for g in groups]) if groups else np.zeros(0)
    all_old = np.concatenate(olds) if olds else np.zeros(0)
    all_new = np.concatenate(news) if news else np.zeros(0)
    kl = approx_kl(all_old, all_new)
    nan_flag = bool(bad) or not np.isfinite(kl) or not np.all(np.isfinite(rewards))
    return RLDiagnostics(
        clip_fraction=clipped / counted if counted else 0.0,
        approx_kl=kl,
        nan_flag=nan_flag,
        mean_reward=float(rewards.mean()) if rewards.size else 0.0,
    )


def sgrpo_objective(groups: Sequence[RolloutGroup], new_logps, cfg: RLConfig) -> ObjectiveResult:
    """Token-level clipped surrogate, averaged over every completion token in the batch."""
    news, olds, advs, owner, bad = _flatten(groups, new_logps)
    keep = np.array([o not in bad for o in owner], dtype=bool)
    total = sum(len(n) for n, k in zip(news, keep) if k)
    denom = max(total, 1)
    loss, grads, clipped, counted = 0.0, [], 0, 0
    for n, o, a, k in zip(news, olds, advs, keep):
        with np.errstate(all="ignore"):
            rho = np.exp(n - o)
        counted += len(n)
        clipped += int(np.sum((rho < cfg.clip_low) | (rho > cfg.clip_high)))
        if not k:
            grads.append(np.zeros_like(n))
            continue
        unclipped = rho * a
        clipped_term = np.clip(rho, cfg.clip_low, cfg.clip_high) * a
        take_raw = unclipped <= clipped_term
        loss -= float(np.sum(np.minimum(unclipped, clipped_term)))
        grads.append(np.where(take_raw, -a * rho, 0.0) / denom)
    loss /= denom
    kl_val, kl_grads = _kl_terms(news, olds, keep, cfg, denom)
    grads = [g + kg for g, kg in zip(grads, kl_grads)]
    return ObjectiveResult(loss + kl_val, _regroup(grads, groups), _diagnostics(groups, news, olds, clipped, counted, bad))


def gspo_objective(groups: Sequence[RolloutGroup], new_logps, cfg: RLConfig) -> ObjectiveResult:
    """Sequence-level clipped surrogate with ratio exp(mean_t(new - old)), averaged over completions."""
    news, olds, advs, owner, bad = _flatten(groups, new_logps)
    keep = np.array([o not in bad for o in owner], dtype=bool)
    denom = max(int(keep.sum()), 1)
    loss, grads, clipped, counted = 0.0, [], 0, 0
    for n, o, a, k in zip(news, olds, advs, keep):
        length = max(len(n), 1)
        with np.errstate(all="ignore"):
            s = float(np.exp(np.sum(n - o) / length))
        counted += 1
        clipped += int(s < cfg.clip_low or s > cfg.clip_high)
        if not k:
            grads.append(np.zeros_like(n))
            continue
        unclipped = s * a
        clipped_term = min(max(s, cfg.clip_low), cfg.clip_high) * a
        loss -= min(unclipped, clipped_term)
        g = -a * s / length if unclipped <= clipped_term else 0.0
        grads.append(np.full_like(n, g / denom))
    loss /= denom
    tokens = max(sum(len(n) for n, k in zip(news, keep) if k), 1)
    kl_val, kl_grads = _kl_terms(news, olds, keep, cfg, tokens)
    grads = [g + kg for g, kg in zip(grads, kl_grads)]
    return ObjectiveResult(loss + kl_val, _regroup(grads, groups), _diagnostics(groups, news, olds, clipped, counted, bad))


def cispo_weights(groups: Sequence[RolloutGroup], new_logps, cfg: RLConfig) -> list[list[np.ndarray]]:
    """Clipped token ratios, treated as constants by :func:`cispo_objective`."""
    out = []
    for g, nl in zip(groups, new_logps):
        with np.errstate(all="ignore"):
            out.append([np.clip(np.exp(np.asarray(n) - o), cfg.clip_low, cfg.clip_high) for n, o in zip(nl, g.old_logps)])
    return out


def cispo_objective(groups: Sequence[RolloutGroup], new_logps, cfg: RLConfig, weights=None) -> ObjectiveResult:
    """-mean_t sg(clip(rho_t)) * A * logp_t.

    ``weights`` fixes the stop-gradient factors; by default they are computed from
    the current ratios, so the returned gradient is exact for the value with the
    weights held constant.
    """
    news, olds, advs, owner, bad = _flatten(groups, new_logps)
    keep = np.array([o not in bad for o in owner], dtype=bool)
    if weights is None:
        weights = cispo_weights(groups, new_logps, cfg)
    flat_w = [np.asarray(w, dtype=np.float64) for ws in weights for w in ws]
    total = sum(len(n) for n, k in zip(news, keep) if k)
    denom = max(total, 1)
    loss, grads, clipped, counted = 0.0, [], 0, 0
    for n, o, a, k, w in zip(news, olds, advs, keep, flat_w):
        with np.errstate(all="ignore"):
            rho = np.exp(n - o)
        counted += len(n)
        clipped += int(np.sum((rho < cfg.clip_low) | (rho > cfg.clip_high)))
        if not k:
            grads.append(np.zeros_like(n))
            continue
        loss -= float(np.sum(w * a * n))
        grads.append(-w * a / denom)
    loss /= denom
    kl_val, kl_grads = _kl_terms(news, olds, keep, cfg, denom)
    grads = [g + kg for g, kg in zip(grads, kl_grads)]
    return ObjectiveResult(loss + kl_val, _regroup(grads, groups), _diagnostics(groups, news, olds, clipped, counted, bad))


OBJECTIVES = {"SGRPO": sgrpo_objective, "GSPO": gspo_objective, "CISPO": cispo_objective}


def objective(groups, new_logps, cfg: RLConfig) -> ObjectiveResult:
    cfg.validate()
    return OBJECTIVES[cfg.variant](groups, new_logps, cfg)


def _regroup(flat: list[np.ndarray], groups: Sequence[RolloutGroup]) -> list[np.ndarray]:
    out, i = [], 0
    for g in groups:
        k = len(g.completions)
        out.append(flat[i : i + k])
        i += k
    return out


# ------------------------------------------------------------------ rollout


def completion_logps(model, prompts: Sequence[Sequence[int]], completions: Sequence[Sequence[int]]):
    """Per-token log-probs of each completion plus the batch/cache for a backward pass."""
    batch = TokenBatch.build(prompts, completions)
    tok_lp, cache = model.forward_batch(batch)
    out = []
    for i, (p, c) in enumerate(zip(prompts, completions)):
        start = len(p) - 1
        out.append(tok_lp[i, start : start + len(c)].copy())
    return out, batch, cache


def rollout(model, problems: Sequence[Problem], cfg: RLConfig, rng: np.random.Generator) -> list[RolloutGroup]:
    """Sample ``group_size`` completions per prompt, score them and snapshot behaviour log-probs."""
    cfg.validate()
    n = cfg.group_size
    prompts = [p.prompt for p in problems for _ in range(n)]
    outs = sample_batch(model, prompts, cfg.temperature, rng, cfg.max_rollout_tokens, eos_id=vocab.EOS)
    outs = [o if o else [vocab.EOS] for o in outs]
    old, _, _ = completion_logps(model, prompts, outs)
    groups = []
    for k, prob in enumerate(problems):
        comps = outs[k * n : (k + 1) * n]
        rewards = np.array([reward(c, prob.gold_answer) for c in comps])
        groups.append(
            RolloutGroup(
                problem_id=prob.id,
                prompt=list(prob.prompt),
                completions=[list(c) for c in comps],
                rewards=rewards,
                advantages=group_advantages(rewards, cfg.adv_eps),
                old_logps=old[k * n : (k + 1) * n],
            )
        )
    return groups


def token_weights(groups: Sequence[RolloutGroup], grads: Sequence[Sequence[np.ndarray]], batch: TokenBatch) -> np.ndarray:
    """Scatter per-completion partials into a (B, L-1) weight matrix for ``TinyLM.backward``."""
    w = np.zeros_like(batch.mask)
    row = 0
    for g, gl in zip(groups, grads):
        for c, d in zip(g.completions, gl):
            start = len(g.prompt) - 1
            w[row, start : start + len(c)] = d
            row += 1
    return w


# ------------------------------------------------------------------ pathology


@dataclass
class PathologyDetector:
    """Flags sustained high clip fractions or any non-finite diagnostic."""

    threshold: float = 0.7
    patience: int = 3
    streak: int = 0
    fired: bool = False
    reason: str = ""

    def update(self, diag: RLDiagnostics) -> bool:
        if diag.nan_flag:
            self.fired, self.reason = True, "non-finite diagnostics"
            return True
        self.streak = self.streak + 1 if diag.clip_fraction > self.threshold else 0
        if self.streak >= self.patience:
            self.fired = True
            self.reason = f"clip_fraction > {self.threshold} for {self.streak} consecutive steps"
        return self.fired
