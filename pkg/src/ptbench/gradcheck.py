"""Central finite-difference checks for every loss and RL objective on random inputs.

Each check perturbs the inputs the analytic gradient is taken with respect to
(sequence log-probs for preference losses, per-token log-probs for SFT and the RL
objectives) and compares with a vector-norm relative error. Draws that land on a
kink (hinge corners, clamps, CVaR selection changes) are detected by disagreeing
one-sided differences and redrawn, since no derivative exists there.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, rl

H = 1e-5
KINK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    n_inputs: int
    max_rel_error: float
    redraws: int = 0
    seconds: float = 0.0
    errors: list = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_inputs > 0 and self.max_rel_error <= tol


class _Kink(Exception):
    pass


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error; gradients that vanish identically are compared absolutely."""
    a, b = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences; raises _Kink where one-sided slopes disagree."""
    g = np.zeros_like(x)
    f0 = f(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp, fm = f(xp), f(xm)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > KINK_TOL * max(1.0, abs(fwd), abs(bwd)):
            raise _Kink()
        g.flat[i] = (fp - fm) / (2 * h)
    return g


# ------------------------------------------------------------------ random inputs


def random_preference_batch(rng: np.random.Generator, n: int | None = None) -> losses.PreferenceBatch:
    n = n or int(rng.integers(1, 7))
    len_w = rng.integers(1, 21, n).astype(float)
    len_l = rng.integers(1, 21, n).astype(float)
    pol_w = -len_w * rng.uniform(0.05, 3.0, n)
    pol_l = -len_l * rng.uniform(0.05, 3.0, n)
    return losses.PreferenceBatch(
        policy_chosen=pol_w,
        policy_rejected=pol_l,
        ref_chosen=pol_w + rng.normal(0, 1.5, n),
        ref_rejected=pol_l + rng.normal(0, 1.5, n),
        len_chosen=len_w,
        len_rejected=len_l,
    )


def random_spec(variant: str, rng: np.random.Generator) -> losses.LossSpec:
    over: dict = {"beta": float(rng.uniform(0.05, 2.0))}
    if variant in ("SimPO", "AlphaPO"):
        over["gamma"] = float(rng.uniform(0.0, 1.0))
    if variant == "GPO":
        over["link"] = str(rng.choice(["logistic", "hinge", "squared"]))
    if variant == "CDPO":
        over["label_smoothing"] = float(rng.uniform(0.0, 0.4))
    if variant == "FocalPO":
        over["focal_gamma"] = float(rng.uniform(0.5, 3.0))
    if variant == "RobustDPO":
        over["rho"] = float(rng.uniform(0.2, 1.0))
    if variant == "AlphaPO":
        over["alpha"] = float(rng.choice([-1.0, 0.5, 1.0, 2.0]))
    return losses.spec_for(variant, **over)


# ------------------------------------------------------------------ per-kind checks


def _check_pair(variant: str, rng: np.random.Generator) -> float:
    batch = random_preference_batch(rng)
    spec = random_spec(variant, rng)
    out = losses.variant_loss(batch, spec)
    fields = ["policy_chosen", "policy_rejected"]
    if variant not in losses.REFERENCE_FREE:
        fields += ["ref_chosen", "ref_rejected"]
    x = np.concatenate([getattr(batch, f) for f in fields])
    n = len(batch)

    def f(v):
        kw = {name: v[i * n : (i + 1) * n] for i, name in enumerate(fields)}
        return losses.variant_loss(batch.replace(**kw), spec).value

    analytic = np.concatenate([getattr(out, "d_" + name) for name in fields])
    return rel_error(analytic, _numeric_grad(f, x))


def _check_kto_unpaired(rng: np.random.Generator) -> float:
    n = int(rng.integers(1, 9))
    pol = -rng.uniform(1, 30, n)
    batch = losses.KTOBatch(policy=pol, ref=pol + rng.normal(0, 2, n), desirable=rng.random(n) < 0.5)
    spec = losses.spec_for("KTO", beta=float(rng.uniform(0.05, 2.0)), desirable_weight=float(rng.uniform(0.5, 2)))
    out = losses.kto_loss(batch, spec)
    x = np.concatenate([batch.policy, batch.ref])

    def f(v):
        return losses.kto_loss(losses.KTOBatch(v[:n], v[n:], batch.desirable), spec).value

    return rel_error(np.concatenate([out.d_policy_chosen, out.d_ref_chosen]), _numeric_grad(f, x))


def _check_sft(rng: np.random.Generator) -> float:
    lp = -rng.uniform(0.01, 5.0, int(rng.integers(1, 25)))
    out = losses.sft_loss(lp)
    return rel_error(out.d_token_logps, _numeric_grad(lambda v: losses.sft_loss(v).value, lp))


def random_groups(rng: np.random.Generator, spread: float = 0.3):
    groups, news = [], []
    for gi in range(int(rng.integers(1, 4))):
        k = int(rng.integers(2, 5))
        rewards = rng.integers(0, 2, k).astype(float)
        if np.all(rewards == rewards[0]):
            rewards[0] = 1.0 - rewards[0]
        olds, new = [], []
        for _ in range(k):
            length = int(rng.integers(1, 6))
            o = -rng.uniform(0.05, 3.0, length)
            olds.append(o)
            new.append(o + rng.normal(0, spread, length))
        groups.append(
            rl.RolloutGroup(
                problem_id=f"g{gi}",
                prompt=[1],
                completions=[[3] * len(o) for o in olds],
                rewards=rewards,
                advantages=rl.group_advantages(rewards),
                old_logps=olds,
            )
        )
        news.append(new)
    return groups, news


def _check_rl(variant: str, rng: np.random.Generator) -> float:
    groups, news = random_groups(rng)
    cfg = rl.RLConfig(variant=variant, kl_coeff=float(rng.choice([0.0, 0.05])))
    sizes = [len(n) for g in news for n in g]
    flat = np.concatenate([n for g in news for n in g])
    weights = rl.cispo_weights(groups, news, cfg) if variant == "CISPO" else None

    def unflatten(v):
        out, i, c = [], 0, 0
        for g in news:
            row = []
            for _ in g:
                row.append(v[i : i + sizes[c]])
                i += sizes[c]
                c += 1
            out.append(row)
        return out

    def f(v):
        if variant == "CISPO":
            return rl.cispo_objective(groups, unflatten(v), cfg, weights).loss
        return rl.objective(groups, unflatten(v), cfg).loss

    res = rl.cispo_objective(groups, news, cfg, weights) if variant == "CISPO" else rl.objective(groups, news, cfg)
    analytic = np.concatenate([g for row in res.grads for g in row])
    return rel_error(analytic, _numeric_grad(f, flat))


# ------------------------------------------------------------------ drivers


def check(name: str, n_inputs: int = 100, seed: int = 0, max_redraws: int = 1000) -> CheckResult:
    """Run ``n_inputs`` successful finite-difference comparisons for one loss/objective."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    if name == "SFT":
        one = _check_sft
    elif name == "KTO-unpaired":
        one = _check_kto_unpaired
    elif name in rl.RL_VARIANTS:
        one = lambda r: _check_rl(name, r)  # noqa: E731
    else:
        losses.get_info(name)
        one = lambda r: _check_pair(name, r)  # noqa: E731
    start = time.perf_counter()
    worst, done, redraws = 0.0, 0, 0
    while done < n_inputs:
        try:
            err = one(rng)
        except _Kink:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(f"{name}: too many non-differentiable draws")
            continue
        worst = max(worst, err) if math.isfinite(err) else math.inf
        done += 1
    return CheckResult(name, done, worst, redraws, time.perf_counter() - start)


def suite_names() -> list[str]:
    return ["SFT", *losses.PREFERENCE_VARIANTS, "KTO-unpaired", *rl.RL_VARIANTS]


def run_suite(n_inputs: int = 100, seed: int = 0) -> list[CheckResult]:
    return [check(name, n_inputs, seed) for name in suite_names()]
