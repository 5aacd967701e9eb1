"""One training loop for every algorithm.

SFT, the preference losses and the RL objectives differ only in how a micro-batch
is turned into a loss and a gradient; data order, optimiser, schedule,
accumulation, checkpointing and manifests are shared.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, rl
from .model import AdapterConfig, ModelConfig, TinyLM, TokenBatch
from .taskdata import PreferencePair, Problem, SamplerState, build_pairs, epoch_order


class TrainConfigError(ValueError):
    pass


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    algorithm: str = "SFT"
    loss_params: dict = field(default_factory=dict)
    rl: rl.RLConfig = field(default_factory=rl.RLConfig)
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.1
    epochs: int = 3
    micro_batch: int = 1
    grad_accum: int = 8
    seed: int = 42
    propagate_seed_to_sampler: bool = True
    shuffle_seed: int = 0
    init_seed: int = 0
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    max_skip_fraction: float = 0.1
    samples_per_prompt: int = 4
    pair_temperature: float = 1.0
    max_new_tokens: int = 24
    checkpoint_every_epoch: bool = True
    # iterative self-play: rebuild pairs from the current policy every k epochs (0 = never; ODPO always every epoch)
    pair_refresh_epochs: int = 0
    refresh_reference: bool = False

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    @property
    def kind(self) -> str:
        if self.algorithm in rl.RL_VARIANTS:
            return "rl"
        if self.algorithm == "SFT":
            return "sft"
        return "preference"

    def validate(self) -> None:
        if not 0 <= self.warmup_fraction < 1:
            raise TrainConfigError("warmup_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.micro_batch < 1 or self.grad_accum < 1:
            raise TrainConfigError("epochs, micro_batch and grad_accum must be >= 1")
        if not self.peak_lr >= 0:
            raise TrainConfigError("peak_lr must be >= 0")
        if self.pair_refresh_epochs < 0:
            raise TrainConfigError("pair_refresh_epochs must be >= 0")
        if self.kind == "rl":
            if self.rl.variant != self.algorithm:
                raise TrainConfigError(f"rl.variant {self.rl.variant!r} does not match algorithm {self.algorithm!r}")
            self.rl.validate()
        else:
            losses.get_info(self.algorithm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter"]["target"] = list(self.adapter.target)
        return d

    def config_hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {
            "rl": rl.RLConfig,
            "adamw": AdamWConfig,
            "model": ModelConfig,
        }
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if isinstance(d.get("adapter"), dict):
            ad = dict(d["adapter"])
            ad["target"] = tuple(ad.get("target", AdapterConfig().target))
            d["adapter"] = AdapterConfig(**ad)
        return cls(**d)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        """Build from a flat key/value mapping.

        Keys may name a top-level field or a field of the RL, AdamW or model
        sub-configs; ``lora_*`` keys configure the adapter and anything else is a
        loss hyperparameter (beta, gamma, variant knobs).
        """
        top = {f.name for f in fields(cls)} - {"rl", "adamw", "model", "adapter", "loss_params"}
        routes = {
            "rl": {f.name for f in fields(rl.RLConfig)} - {"variant"},
            "adamw": {f.name for f in fields(AdamWConfig)},
            "model": {f.name for f in fields(ModelConfig)},
        }
        kw: dict = {}
        nested: dict = {k: {} for k in routes}
        adapter: dict = {}
        loss_params: dict = dict(flat.get("loss_params") or {})
        for key, val in flat.items():
            if key == "loss_params":
                continue
            if key.startswith("lora_"):
                name = key[5:]
                adapter[name] = tuple(val) if name == "target" else val
                continue
            if key in top:
                kw[key] = val
                continue
            for name, keys in routes.items():
                if key in keys:
                    nested[name][key] = val
                    break
            else:
                loss_params[key] = val
        if kw.get("algorithm") in rl.RL_VARIANTS:
            nested["rl"]["variant"] = kw["algorithm"]
        return cls(
            **kw,
            loss_params=loss_params,
            rl=rl.RLConfig(**nested["rl"]),
            adamw=AdamWConfig(**nested["adamw"]),
            model=ModelConfig(**nested["model"]),
            adapter=AdapterConfig(**adapter),
        )


# ------------------------------------------------------------------ schedule / optimiser


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` over the first warmup_fraction of steps, then cosine to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.peak_lr * step / warm
    if total_steps == warm:
        return cfg.peak_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float, cfg: AdamWConfig, mask=None):
    """One decoupled-weight-decay Adam update.

    Returns ``(params, state, applied)``; a non-finite gradient leaves both
    untouched and ``applied`` False.
    """
    if params.shape != grads.shape:
        raise ValueError("params and grads differ in shape")
    if not np.all(np.isfinite(grads)):
        return params, state, False
    if mask is not None:
        grads = np.where(mask, grads, 0.0)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    update = lr * cfg.weight_decay * params + lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if mask is not None:
        update = np.where(mask, update, 0.0)
    return params - update, AdamState(m, v, t), True


# ------------------------------------------------------------------ data / manifest


@dataclass
class TrainData:
    problems: list[Problem]
    pairs: list[PreferencePair] | None = None


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    algorithm: str
    seed: int
    n_items: int = 0
    steps_per_epoch: int = 0
    total_steps: int = 0
    metrics: list[dict] = field(default_factory=list)
    permutations: list[list[int]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    final_checkpoint: str | None = None
    wall_clock_seconds: float = 0.0
    param_hash: str = ""
    skipped_steps: int = 0
    incidents: list[dict] = field(default_factory=list)
    verdict: str = "ok"
    pathology_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class _Abort(Exception):
    pass


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


def sequence_logps(model: TinyLM, prompts, responses, chunk: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(prompts), chunk):
        batch = TokenBatch.build(prompts[s : s + chunk], responses[s : s + chunk])
        tok_lp, _ = model.forward_batch(batch)
        out.append((tok_lp * batch.mask).sum(1))
    return np.concatenate(out) if out else np.zeros(0)


class _Runner:
    """Per-run state: model, optimiser, reference log-probs and logs."""

    def __init__(self, cfg: TrainConfig, data: TrainData, model: TinyLM, out_dir):
        self.cfg = cfg
        self.data = data
        self.model = model
        self.reference = model
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.mask = model.trainable_mask()
        self.opt = AdamState.zeros(model.n_params)
        self.spec = losses.spec_for(cfg.algorithm, **cfg.loss_params) if cfg.kind == "preference" else None
        self.info = losses.get_info(cfg.algorithm) if cfg.kind != "rl" else None
        self.pairs = list(data.pairs or []) if cfg.kind == "preference" else None
        self.ref_w = self.ref_l = None
        if self.pairs is not None:
            if not self.pairs:
                raise TrainConfigError(f"{cfg.algorithm} needs preference pairs")
            # data order runs over problems for every algorithm; each problem owns its pair slots
            pos = {p.id: i for i, p in enumerate(data.problems)}
            self.slots: list[list[int]] = [[] for _ in data.problems]
            for j, pair in enumerate(self.pairs):
                if pair.problem_id not in pos:
                    raise TrainConfigError(f"pair for unknown problem {pair.problem_id!r}")
                self.slots[pos[pair.problem_id]].append(j)
            self._score_reference(range(len(self.pairs)))
        self.detector = rl.PathologyDetector()

    # ---------------------------------------------------------------- helpers

    def sampler_rng(self, *extra) -> np.random.Generator:
        """Stream for data-dependent sampling (rollouts, pair regeneration).

        Follows the propagate flag exactly like the data order does.
        """
        c = self.cfg
        key = [c.shuffle_seed, 1, c.seed, *extra] if c.propagate_seed_to_sampler else [c.shuffle_seed, 0, *extra]
        return np.random.default_rng(key)

    def _score_reference(self, indices) -> None:
        idx = list(indices)
        if self.ref_w is None or len(self.ref_w) < len(self.pairs):
            grow = len(self.pairs) - (0 if self.ref_w is None else len(self.ref_w))
            self.ref_w = np.concatenate([self.ref_w if self.ref_w is not None else [], np.zeros(grow)])
            self.ref_l = np.concatenate([self.ref_l if self.ref_l is not None else [], np.zeros(grow)])
        if not idx or not self.info.uses_reference:
            return
        pr = [self.pairs[i].prompt for i in idx]
        self.ref_w[idx] = sequence_logps(self.reference, pr, [self.pairs[i].chosen for i in idx])
        self.ref_l[idx] = sequence_logps(self.reference, pr, [self.pairs[i].rejected for i in idx])

    def n_items(self) -> int:
        return len(self.data.problems)

    def pair_indices(self, problem_idx) -> list[int]:
        return [j for i in problem_idx for j in self.slots[i]]

    # ---------------------------------------------------------------- losses

    def sft_chunk(self, idx):
        probs = [self.data.problems[i] for i in idx]
        batch = TokenBatch.build([p.prompt for p in probs], [p.gold_response for p in probs])
        tok_lp, cache = self.model.forward_batch(batch)
        weights = np.zeros_like(batch.mask)
        total = 0.0
        for r in range(len(probs)):
            sel = batch.mask[r] > 0
            out = losses.sft_loss(tok_lp[r, sel])
            total += out.value
            weights[r, sel] = out.d_token_logps
        n = len(probs)
        return total / n, self.model.backward(cache, weights / n), {}

    def preference_chunk(self, idx):
        pairs = [self.pairs[i] for i in idx]
        n = len(pairs)
        prompts = [p.prompt for p in pairs] * 2
        responses = [p.chosen for p in pairs] + [p.rejected for p in pairs]
        batch = TokenBatch.build(prompts, responses)
        tok_lp, cache = self.model.forward_batch(batch)
        seq = (tok_lp * batch.mask).sum(1)
        lens = batch.mask.sum(1)
        ref = self.info.uses_reference
        pb = losses.PreferenceBatch(
            policy_chosen=seq[:n],
            policy_rejected=seq[n:],
            ref_chosen=self.ref_w[list(idx)] if ref else None,
            ref_rejected=self.ref_l[list(idx)] if ref else None,
            len_chosen=lens[:n],
            len_rejected=lens[n:],
        )
        out = losses.variant_loss(pb, self.spec)
        d = np.concatenate([out.d_policy_chosen, out.d_policy_rejected])
        if not (np.isfinite(out.value) and _finite(d)):
            return out.value, np.full(self.model.n_params, np.nan), {}
        grad = self.model.backward(cache, batch.mask * d[:, None])
        extra = {
            "reward_margin": float(np.mean(out.margins)),
            "reward_accuracy": float(np.mean(out.margins > 0)),
        }
        return out.value, grad, extra

    def rl_grad(self, groups):
        prompts = [g.prompt for g in groups for _ in g.completions]
        comps = [c for g in groups for c in g.completions]
        new, batch, cache = rl.completion_logps(self.model, prompts, comps)
        k = 0
        nested = []
        for g in groups:
            nested.append(new[k : k + len(g.completions)])
            k += len(g.completions)
        res = rl.objective(groups, nested, self.cfg.rl)
        grad = self.model.backward(cache, rl.token_weights(groups, res.grads, batch))
        return res.loss, grad, res.diagnostics

    # ---------------------------------------------------------------- regeneration

    def refresh_due(self, epoch: int) -> bool:
        if epoch == 0:
            return False
        if self.cfg.algorithm == "ODPO":
            return True
        k = self.cfg.pair_refresh_epochs
        return k > 0 and epoch % k == 0

    def regenerate_pairs(self, epoch: int) -> int:
        """Rebuild one pair per problem from the current policy; problems with no usable pair keep their old one.

        With ``refresh_reference`` the reference is re-anchored to the current
        policy and every slot is rescored.
        """
        fresh = build_pairs(
            self.data.problems,
            self.model,
            self.cfg.samples_per_prompt,
            self.sampler_rng(epoch, 0),
            temperature=self.cfg.pair_temperature,
            max_tokens=self.cfg.max_new_tokens,
        )
        new_by_id = {p.problem_id: p for p in fresh}
        changed = []
        for i, prob in enumerate(self.data.problems):
            new = new_by_id.get(prob.id)
            if new is None:
                continue
            if self.slots[i]:
                j = self.slots[i][0]
                self.pairs[j] = new
            else:
                j = len(self.pairs)
                self.pairs.append(new)
                self.slots[i].append(j)
            changed.append(j)
        if self.cfg.refresh_reference:
            self.reference = self.model
            self._score_reference(range(len(self.pairs)))
        else:
            self._score_reference(changed)
        return len(changed)


def train(cfg: TrainConfig, data: TrainData, model: TinyLM | None = None, out_dir=None):
    """Run one training job; returns ``(manifest, final_model)``.

    ``model`` defaults to a fresh initialisation from ``cfg.init_seed``; the run
    seed only enters through the data sampler.
    """
    cfg.validate()
    start = time.perf_counter()
    if model is None:
        model = TinyLM.init(cfg.model, seed=cfg.init_seed)
    if cfg.adapter.enabled and not model.adapter.enabled:
        model = model.with_adapter(cfg.adapter, seed=cfg.init_seed)
    if not data.problems:
        raise TrainConfigError("training data is empty")
    run = _Runner(cfg, data, model, out_dir)
    if run.out_dir is not None:
        run.out_dir.mkdir(parents=True, exist_ok=True)

    n = run.n_items()
    per_step = cfg.effective_batch
    steps_per_epoch = math.ceil(n / per_step)
    updates = cfg.rl.updates_per_batch if cfg.kind == "rl" else 1
    total = cfg.epochs * steps_per_epoch * updates
    man = RunManifest(
        config_hash=cfg.config_hash(),
        config=cfg.to_dict(),
        algorithm=cfg.algorithm,
        seed=cfg.seed,
        n_items=n,
        steps_per_epoch=steps_per_epoch,
        total_steps=total,
    )
    log = open(run.out_dir / "metrics.jsonl", "w") if run.out_dir is not None else None
    step = 0
    max_skips = cfg.max_skip_fraction * total

    def apply(loss, grad, epoch, extra):
        nonlocal step
        step += 1
        lr = lr_at(step, total, cfg)
        ok = np.isfinite(loss) and _finite(grad)
        if ok:
            x, run.opt, ok = adamw_step(run.model.flat(), grad, run.opt, lr, cfg.adamw, run.mask)
            if ok:
                run.model = run.model.with_flat(x)
        rec = {
            "step": step,
            "epoch": epoch,
            "loss": float(loss) if np.isfinite(loss) else None,
            "lr": lr,
            "grad_norm": float(np.linalg.norm(grad)) if _finite(grad) else None,
            "skipped": not ok,
            **extra,
        }
        man.metrics.append(rec)
        if log is not None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
        if not ok:
            man.skipped_steps += 1
            man.incidents.append({"step": step, "epoch": epoch, "kind": "non-finite loss or gradient"})
            if man.skipped_steps > max_skips:
                man.verdict = "pathological"
                man.pathology_reason = f"{man.skipped_steps} of {total} steps skipped (non-finite)"
                raise _Abort()

    def skip_empty(epoch):
        # a step whose problems have no pairs still advances the schedule
        nonlocal step
        step += 1
        rec = {"step": step, "epoch": epoch, "loss": None, "lr": lr_at(step, total, cfg), "grad_norm": None, "skipped": False, "empty": True}
        man.metrics.append(rec)
        if log is not None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")

    try:
        for epoch in range(cfg.epochs):
            if cfg.kind == "preference" and run.refresh_due(epoch):
                refreshed = run.regenerate_pairs(epoch)
                man.incidents.append({"epoch": epoch, "kind": "pairs-regenerated", "count": refreshed})
            state = SamplerState(epoch=epoch, shuffle_seed=cfg.shuffle_seed, propagate_run_seed=cfg.propagate_seed_to_sampler)
            perm = epoch_order(n, state, cfg.seed)
            man.permutations.append([int(i) for i in perm])
            for s in range(steps_per_epoch):
                idx = perm[s * per_step : (s + 1) * per_step]
                chunks = [idx[c : c + cfg.micro_batch] for c in range(0, len(idx), cfg.micro_batch)]
                if cfg.kind == "rl":
                    groups = [
                        rl.rollout(run.model, [data.problems[i] for i in ch], cfg.rl, run.sampler_rng(epoch, s, ci))
                        for ci, ch in enumerate(chunks)
                    ]
                    for _ in range(updates):
                        loss, grad, diag = 0.0, np.zeros(run.model.n_params), None
                        diags = []
                        for ch, gr in zip(chunks, groups):
                            frac = len(ch) / len(idx)
                            l, g, d = run.rl_grad(gr)
                            loss += frac * l
                            grad += frac * g
                            diags.append(d)
                        diag = rl.RLDiagnostics(
                            clip_fraction=float(np.mean([d.clip_fraction for d in diags])),
                            approx_kl=float(np.mean([d.approx_kl for d in diags])),
                            nan_flag=any(d.nan_flag for d in diags),
                            mean_reward=float(np.mean([d.mean_reward for d in diags])),
                        )
                        if run.detector.update(diag) and man.verdict == "ok":
                            man.verdict = "pathological"
                            man.pathology_reason = run.detector.reason
                        apply(loss, grad, epoch, diag.as_dict())
                    continue
                if cfg.kind == "preference":
                    chunks = [run.pair_indices(ch) for ch in chunks]
                    chunks = [ch for ch in chunks if ch]
                    if not chunks:
                        skip_empty(epoch)
                        continue
                    fn, size = run.preference_chunk, sum(len(ch) for ch in chunks)
                else:
                    fn, size = run.sft_chunk, len(idx)
                loss, grad, extra_acc = 0.0, np.zeros(run.model.n_params), {}
                for ch in chunks:
                    frac = len(ch) / size
                    l, g, extra = fn(ch)
                    loss += frac * l
                    grad += frac * g
                    for k, v in extra.items():
                        extra_acc[k] = extra_acc.get(k, 0.0) + frac * v
                apply(loss, grad, epoch, extra_acc)
            if run.out_dir is not None and cfg.checkpoint_every_epoch:
                path = run.out_dir / f"checkpoint-epoch{epoch + 1}.bin"
                run.model.save(path, man.config_hash)
                man.checkpoints.append(str(path))
    except _Abort:
        pass
    finally:
        if log is not None:
            log.close()

    man.param_hash = run.model.param_hash()
    if man.checkpoints:
        man.final_checkpoint = man.checkpoints[-1]
    man.wall_clock_seconds = time.perf_counter() - start
    if run.out_dir is not None:
        man.write(run.out_dir / "manifest.json")
    return man, run.model
