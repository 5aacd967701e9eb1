"""Offline preference losses with exact gradients.

Every loss consumes sequence-level log-probabilities (policy and, where needed,
reference) and returns the batch-mean value together with its partial derivatives
with respect to each of the four log-prob inputs.  The trainer chains those
partials into parameter gradients, so nothing here touches the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit


class LossConfigError(ValueError):
    pass


class LossDomainError(ValueError):
    pass


@dataclass
class PreferenceBatch:
    policy_chosen: np.ndarray
    policy_rejected: np.ndarray
    ref_chosen: np.ndarray | None
    ref_rejected: np.ndarray | None
    len_chosen: np.ndarray
    len_rejected: np.ndarray

    def __post_init__(self):
        self.policy_chosen = np.asarray(self.policy_chosen, dtype=np.float64)
        self.policy_rejected = np.asarray(self.policy_rejected, dtype=np.float64)
        if self.ref_chosen is not None:
            self.ref_chosen = np.asarray(self.ref_chosen, dtype=np.float64)
        if self.ref_rejected is not None:
            self.ref_rejected = np.asarray(self.ref_rejected, dtype=np.float64)
        self.len_chosen = np.asarray(self.len_chosen, dtype=np.float64)
        self.len_rejected = np.asarray(self.len_rejected, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.policy_chosen)

    @property
    def has_reference(self) -> bool:
        return self.ref_chosen is not None and self.ref_rejected is not None

    def fields(self) -> list[np.ndarray]:
        return [self.policy_chosen, self.policy_rejected, self.ref_chosen, self.ref_rejected]

    def replace(self, **kw) -> "PreferenceBatch":
        data = dict(
            policy_chosen=self.policy_chosen,
            policy_rejected=self.policy_rejected,
            ref_chosen=self.ref_chosen,
            ref_rejected=self.ref_rejected,
            len_chosen=self.len_chosen,
            len_rejected=self.len_rejected,
        )
        data.update(kw)
        return PreferenceBatch(**data)


@dataclass
class KTOBatch:
    """Unpaired examples, each tagged desirable or undesirable."""

    policy: np.ndarray
    ref: np.ndarray
    desirable: np.ndarray
    lengths: np.ndarray | None = None

    def __post_init__(self):
        self.policy = np.asarray(self.policy, dtype=np.float64)
        self.ref = np.asarray(self.ref, dtype=np.float64)
        self.desirable = np.asarray(self.desirable, dtype=bool)


@dataclass
class LossSpec:
    variant: str
    beta: float = 0.1
    gamma: float = 0.5
    params: dict = field(default_factory=dict)

    def param(self, key: str):
        if key in self.params:
            return self.params[key]
        info = REGISTRY.get(self.variant)
        if info is None or key not in info.defaults:
            raise LossConfigError(f"{self.variant}: no value for parameter {key!r}")
        return info.defaults[key]


@dataclass
class LossOutput:
    value: float
    d_policy_chosen: np.ndarray
    d_policy_rejected: np.ndarray
    d_ref_chosen: np.ndarray
    d_ref_rejected: np.ndarray
    margins: np.ndarray
    per_example: np.ndarray | None = None


def _softplus(x):
    return np.logaddexp(0.0, x)


def _dsigmoid(x):
    s = expit(x)
    return s * (1.0 - s)


def _require_ref(batch: PreferenceBatch, name: str) -> None:
    if not batch.has_reference:
        raise LossConfigError(f"{name} needs reference log-probs")


def _check_spec(spec: LossSpec) -> None:
    if not spec.beta > 0:
        raise LossConfigError("beta must be > 0")
    if spec.gamma < 0:
        raise LossConfigError("gamma must be >= 0")


def _ratios(batch: PreferenceBatch):
    lw = batch.policy_chosen - batch.ref_chosen
    ll = batch.policy_rejected - batch.ref_rejected
    return lw, ll


def _from_logratio_grads(per, g_w, g_l, margins, n=None) -> LossOutput:
    """Mean-reduce per-pair losses whose partials are given w.r.t. the two log-ratios."""
    n = len(per) if n is None else n
    g_w = g_w / n
    g_l = g_l / n
    return LossOutput(
        value=float(per.mean()),
        d_policy_chosen=g_w,
        d_policy_rejected=g_l,
        d_ref_chosen=-g_w,
        d_ref_rejected=-g_l,
        margins=margins,
        per_example=per,
    )


# ------------------------------------------------------------------ paired, reference-based


def dpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "DPO")
    _check_spec(spec)
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    per = _softplus(-x)
    g = -expit(-x) * spec.beta
    return _from_logratio_grads(per, g, -g, x)


def ipo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "IPO")
    _check_spec(spec)
    lw, ll = _ratios(batch)
    m = lw - ll
    gap = m - 1.0 / (2.0 * spec.beta)
    per = gap**2
    g = 2.0 * gap
    return _from_logratio_grads(per, g, -g, spec.beta * m)


def hinge_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "Hinge")
    _check_spec(spec)
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    per = np.maximum(0.0, 1.0 - x)
    g = np.where(1.0 - x > 0.0, -spec.beta, 0.0)
    return _from_logratio_grads(per, g, -g, x)


def rdpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "RDPO")
    _check_spec(spec)
    lw, ll = _ratios(batch)
    alpha = spec.param("length_penalty")
    x = spec.beta * (lw - ll) - alpha * (batch.len_chosen - batch.len_rejected)
    per = _softplus(-x)
    g = -expit(-x) * spec.beta
    return _from_logratio_grads(per, g, -g, x)


def cdpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "CDPO")
    _check_spec(spec)
    eps = spec.param("label_smoothing")
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    per = (1.0 - eps) * _softplus(-x) + eps * _softplus(x)
    g = ((1.0 - eps) * -expit(-x) + eps * expit(x)) * spec.beta
    return _from_logratio_grads(per, g, -g, x)


def beta_dpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    """Per-pair beta from the reference margin, clamped to [beta/2, 2 beta]."""
    _require_ref(batch, "BetaDPO")
    _check_spec(spec)
    beta = spec.beta
    m_ref = batch.ref_chosen - batch.ref_rejected
    th = np.tanh(m_ref)
    raw = beta * (1.0 + th)
    beta_i = np.clip(raw, beta / 2.0, 2.0 * beta)
    free = (raw > beta / 2.0) & (raw < 2.0 * beta)
    dbeta = np.where(free, beta * (1.0 - th**2), 0.0)

    lw, ll = _ratios(batch)
    m = lw - ll
    x = beta_i * m
    per = _softplus(-x)
    gx = -expit(-x)
    n = len(per)
    d_pw = gx * beta_i / n
    d_pl = -d_pw
    via_beta = gx * m * dbeta / n
    return LossOutput(
        value=float(per.mean()),
        d_policy_chosen=d_pw,
        d_policy_rejected=d_pl,
        d_ref_chosen=-d_pw + via_beta,
        d_ref_rejected=-d_pl - via_beta,
        margins=x,
        per_example=per,
    )


def caldpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "CalDPO")
    _check_spec(spec)
    lam = spec.param("calibration_weight")
    c = 1.0 / (2.0 * spec.beta)
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    per = _softplus(-x) + lam * ((lw - c) ** 2 + (ll + c) ** 2)
    g = -expit(-x) * spec.beta
    return _from_logratio_grads(per, g + 2 * lam * (lw - c), -g + 2 * lam * (ll + c), x)


def dpop_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "DPOP")
    _check_spec(spec)
    lam = spec.param("positive_weight")
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    per = _softplus(-x) + lam * np.maximum(0.0, -lw)
    g = -expit(-x) * spec.beta
    return _from_logratio_grads(per, g - lam * (lw < 0), -g, x)


def exo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    """Reverse KL between softmax(beta * log-ratios) over the pair and the target (1-eps, eps)."""
    _require_ref(batch, "EXO")
    _check_spec(spec)
    eps = spec.param("target_eps")
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    log_pw, log_pl = log_expit(x), log_expit(-x)
    pw = expit(x)
    a = log_pw - math.log1p(-eps)
    b = log_pl - math.log(eps)
    per = pw * a + (1.0 - pw) * b
    g = (a - b) * pw * (1.0 - pw) * spec.beta
    return _from_logratio_grads(per, g, -g, x)


def apo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    """Anchored form that pushes the chosen log-ratio up and the rejected one down independently."""
    _require_ref(batch, "APO")
    _check_spec(spec)
    b = spec.beta
    lw, ll = _ratios(batch)
    per = (1.0 - expit(b * lw)) + expit(b * ll)
    return _from_logratio_grads(per, -b * _dsigmoid(b * lw), b * _dsigmoid(b * ll), b * (lw - ll))


def sppo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "SPPO")
    _check_spec(spec)
    c = 1.0 / (2.0 * spec.beta)
    lw, ll = _ratios(batch)
    per = (lw - c) ** 2 + (ll + c) ** 2
    return _from_logratio_grads(per, 2 * (lw - c), 2 * (ll + c), spec.beta * (lw - ll))


def robust_dpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    """CVaR of per-pair DPO losses: mean over the worst ``rho`` fraction."""
    _require_ref(batch, "RobustDPO")
    _check_spec(spec)
    rho = spec.param("rho")
    if not 0 < rho <= 1:
        raise LossConfigError("rho must lie in (0, 1]")
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    per = _softplus(-x)
    n = len(per)
    k = max(1, math.ceil(rho * n - 1e-12))
    worst = np.argsort(-per, kind="stable")[:k]
    weight = np.zeros(n)
    weight[worst] = 1.0 / k
    g = -expit(-x) * spec.beta * weight
    return LossOutput(
        value=float(per[worst].mean()),
        d_policy_chosen=g,
        d_policy_rejected=-g,
        d_ref_chosen=-g,
        d_ref_rejected=g,
        margins=x,
        per_example=per,
    )


_GPO_LINKS = ("logistic", "hinge", "squared")


def gpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _require_ref(batch, "GPO")
    _check_spec(spec)
    link = spec.param("link")
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    if link == "logistic":
        per, gx = _softplus(-x), -expit(-x)
    elif link == "hinge":
        per, gx = np.maximum(0.0, 1.0 - x), np.where(1.0 - x > 0, -1.0, 0.0)
    elif link == "squared":
        per, gx = (x - 1.0) ** 2, 2.0 * (x - 1.0)
    else:
        raise LossConfigError(f"GPO link must be one of {_GPO_LINKS}, got {link!r}")
    g = gx * spec.beta
    return _from_logratio_grads(per, g, -g, x)


def focal_po_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    """DPO term scaled by sigma(beta m)^gamma_f, which down-weights mis-ranked pairs."""
    _require_ref(batch, "FocalPO")
    _check_spec(spec)
    gf = spec.param("focal_gamma")
    lw, ll = _ratios(batch)
    x = spec.beta * (lw - ll)
    s = expit(x)
    base = _softplus(-x)
    w = s**gf
    per = w * base
    gx = w * (1.0 - s) * (gf * base - 1.0)
    g = gx * spec.beta
    return _from_logratio_grads(per, g, -g, x)


# ------------------------------------------------------------------ reference-free


def _check_lengths(batch: PreferenceBatch, name: str) -> None:
    if np.any(batch.len_chosen <= 0) or np.any(batch.len_rejected <= 0):
        raise LossDomainError(f"{name}: response lengths must be >= 1")


def _ref_free_output(per, d_pw, d_pl, margins) -> LossOutput:
    n = len(per)
    zeros = np.zeros(n)
    return LossOutput(
        value=float(per.mean()),
        d_policy_chosen=d_pw / n,
        d_policy_rejected=d_pl / n,
        d_ref_chosen=zeros,
        d_ref_rejected=zeros.copy(),
        margins=margins,
        per_example=per,
    )


def simpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _check_spec(spec)
    _check_lengths(batch, "SimPO")
    b = spec.beta
    x = b / batch.len_chosen * batch.policy_chosen - b / batch.len_rejected * batch.policy_rejected - spec.gamma
    per = _softplus(-x)
    gx = -expit(-x)
    return _ref_free_output(per, gx * b / batch.len_chosen, -gx * b / batch.len_rejected, x)


def cpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _check_spec(spec)
    _check_lengths(batch, "CPO")
    lam = spec.param("sft_weight")
    x = spec.beta * (batch.policy_chosen - batch.policy_rejected)
    per = _softplus(-x) - lam * batch.policy_chosen / batch.len_chosen
    gx = -expit(-x) * spec.beta
    return _ref_free_output(per, gx - lam / batch.len_chosen, -gx, x)


def _log_odds(logp, length):
    """log(p / (1 - p)) for the per-token geometric-mean probability p = exp(logp / length)."""
    a = logp / length
    if np.any(a >= 0):
        raise LossDomainError("ORPO needs strictly negative log-probabilities")
    lo = a - np.log(-np.expm1(a))
    dlo = 1.0 / (-np.expm1(a)) / length
    return lo, dlo


def orpo_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _check_spec(spec)
    _check_lengths(batch, "ORPO")
    lam = spec.param("odds_ratio_weight")
    lo_w, dlo_w = _log_odds(batch.policy_chosen, batch.len_chosen)
    lo_l, dlo_l = _log_odds(batch.policy_rejected, batch.len_rejected)
    x = lo_w - lo_l
    per = -batch.policy_chosen / batch.len_chosen + lam * _softplus(-x)
    gx = -expit(-x) * lam
    return _ref_free_output(per, -1.0 / batch.len_chosen + gx * dlo_w, -gx * dlo_l, x)


def alpha_po_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    _check_spec(spec)
    _check_lengths(batch, "AlphaPO")
    alpha = spec.param("alpha")
    if alpha == 0:
        raise LossConfigError("AlphaPO alpha must be non-zero")

    def reward(logp, length):
        e = np.exp(alpha * logp / length)
        return (e - 1.0) / alpha, e / length

    r_w, dr_w = reward(batch.policy_chosen, batch.len_chosen)
    r_l, dr_l = reward(batch.policy_rejected, batch.len_rejected)
    x = spec.beta * (r_w - r_l) - spec.gamma
    per = _softplus(-x)
    gx = -expit(-x) * spec.beta
    return _ref_free_output(per, gx * dr_w, -gx * dr_l, x)


# ------------------------------------------------------------------ unpaired / token-level


def kto_loss(batch: KTOBatch, spec: LossSpec) -> LossOutput:
    """KTO with reference point z = max(0, batch-mean log-ratio); z is differentiated through.

    Returned partials are per example: ``d_policy_chosen`` holds d/d policy and
    ``d_ref_chosen`` d/d reference; the rejected slots are empty.
    """
    _check_spec(spec)
    n = len(batch.policy)
    if n == 0:
        raise LossDomainError("KTO needs a non-empty batch")
    lam_w = spec.param("desirable_weight")
    lam_l = spec.param("undesirable_weight")
    b = spec.beta
    r = batch.policy - batch.ref
    mean_r = r.mean()
    z = max(0.0, mean_r)
    des = batch.desirable
    arg = np.where(des, b * (r - z), b * (z - r))
    lam = np.where(des, lam_w, lam_l)
    per = lam * (1.0 - expit(arg))
    ds = lam * _dsigmoid(arg) * b
    d_r = np.where(des, -ds, ds)
    d_z = np.where(des, ds, -ds).sum()
    g = d_r / n
    if mean_r > 0:
        g = g + d_z / n / n
    empty = np.zeros(0)
    return LossOutput(
        value=float(per.mean()),
        d_policy_chosen=g,
        d_policy_rejected=empty,
        d_ref_chosen=-g,
        d_ref_rejected=empty.copy(),
        margins=arg,
        per_example=per,
    )


def kto_pair_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    """KTO on paired data: chosen responses are desirable, rejected ones undesirable."""
    _require_ref(batch, "KTO")
    n = len(batch)
    unpaired = KTOBatch(
        policy=np.concatenate([batch.policy_chosen, batch.policy_rejected]),
        ref=np.concatenate([batch.ref_chosen, batch.ref_rejected]),
        desirable=np.concatenate([np.ones(n, bool), np.zeros(n, bool)]),
    )
    out = kto_loss(unpaired, spec)
    gp, gr = out.d_policy_chosen, out.d_ref_chosen
    return LossOutput(
        value=out.value,
        d_policy_chosen=gp[:n],
        d_policy_rejected=gp[n:],
        d_ref_chosen=gr[:n],
        d_ref_rejected=gr[n:],
        margins=spec.beta * ((batch.policy_chosen - batch.ref_chosen) - (batch.policy_rejected - batch.ref_rejected)),
        per_example=out.per_example,
    )


@dataclass
class SFTOutput:
    value: float
    d_token_logps: np.ndarray


def sft_loss(token_logps) -> SFTOutput:
    """Mean per-token negative log-likelihood of one gold response."""
    lp = np.asarray(token_logps, dtype=np.float64)
    if lp.size == 0:
        raise LossDomainError("SFT needs a non-empty response")
    return SFTOutput(float(-lp.mean()), np.full(lp.shape, -1.0 / lp.size))


# ------------------------------------------------------------------ registry


@dataclass(frozen=True)
class LossInfo:
    name: str
    modification: str
    family: str
    uses_reference: bool
    year: int
    fn: Callable | None
    defaults: dict = field(default_factory=dict)
    kind: str = "pair"
    margin_only: bool = True
    chosen_shape: str = "monotone"
    form: str = ""


def _info(name, modification, family, ref, fn, defaults=None, **kw) -> LossInfo:
    return LossInfo(name, modification, family, ref, 2023 if name == "DPO" else 2024, fn, dict(defaults or {}), **kw)


_TABLE = [
    _info("DPO", "Baseline logistic loss", "Vanilla", True, dpo_loss, {"beta": 0.1}),
    _info("IPO", "Squared loss regularization", "Alternative divergence", True, ipo_loss, {"beta": 0.1},
          chosen_shape="target"),
    _info("SimPO", "Length-normalized, no ref", "Reference-free", False, simpo_loss, {"beta": 0.1, "gamma": 0.5},
          margin_only=False),
    _info("KTO", "Unpaired binary feedback", "Unpaired", True, kto_pair_loss,
          {"beta": 0.1, "desirable_weight": 1.0, "undesirable_weight": 1.0}, kind="unpaired", margin_only=False,
          chosen_shape="unpaired"),
    _info("Hinge", "Hinge loss replacement", "Alternative divergence", True, hinge_loss, {"beta": 0.1}),
    _info("CPO", "Contrastive preference", "Reference-free", False, cpo_loss, {"beta": 0.1, "sft_weight": 1.0},
          margin_only=False),
    _info("ORPO", "SFT-integrated preference", "Reference-free", False, orpo_loss,
          {"beta": 0.1, "odds_ratio_weight": 0.25}, margin_only=False),
    _info("RDPO", "Robust divergence penalty", "Alternative divergence", True, rdpo_loss,
          {"beta": 0.1, "length_penalty": 0.01}),
    _info("CDPO", "Conservative DPO", "Robustness", True, cdpo_loss, {"beta": 0.1, "label_smoothing": 0.1},
          chosen_shape="target"),
    _info("BetaDPO", "Adaptive β scheduling", "Weighting/calibration", True, beta_dpo_loss, {"beta": 0.1}),
    _info("CalDPO", "Calibrated reward margin", "Weighting/calibration", True, caldpo_loss,
          {"beta": 0.1, "calibration_weight": 0.1}, margin_only=False, chosen_shape="target"),
    _info("DPOP", "Pref.-weighted optimization", "Weighting/calibration", True, dpop_loss,
          {"beta": 0.1, "positive_weight": 5.0}, margin_only=False),
    _info("ODPO", "Online DPO", "Data augmentation", True, dpo_loss, {"beta": 0.1},
          form="DPO loss; pairs regenerated from the current policy each epoch"),
    _info("EXO", "Exponentiated gradient", "Data augmentation", True, exo_loss, {"beta": 0.1, "target_eps": 1e-3},
          chosen_shape="target"),
    _info("AlphaPO", "Alpha-divergence pref.", "Reference-free", False, alpha_po_loss,
          {"beta": 0.1, "gamma": 0.5, "alpha": 0.5}, margin_only=False),
    _info("APO", "Anchored preference", "Data augmentation", True, apo_loss, {"beta": 0.1}, margin_only=False,
          form="zero"),
    _info("SPPO", "Self-play preference", "Data augmentation", True, sppo_loss, {"beta": 0.1}, margin_only=False,
          chosen_shape="target"),
    _info("RobustDPO", "Dist. robust DPO", "Robustness", True, robust_dpo_loss, {"beta": 0.1, "rho": 0.5},
          form="CVaR over per-pair DPO losses"),
    _info("GPO", "Generalized pref. opt.", "Alternative divergence", True, gpo_loss, {"beta": 0.1, "link": "logistic"}),
    _info("FocalPO", "Focal loss preference", "Weighting/calibration", True, focal_po_loss,
          {"beta": 0.1, "focal_gamma": 2.0}, chosen_shape="focal",
          form="weight sigma(beta m)^gamma on the DPO term (emphasises correctly ranked pairs)"),
]

PREFERENCE_VARIANTS: tuple[str, ...] = tuple(i.name for i in _TABLE)

REGISTRY: dict[str, LossInfo] = {i.name: i for i in _TABLE}
REGISTRY["SFT"] = LossInfo("SFT", "Next-token prediction on gold responses", "Supervised", False, 2023, None,
                           {}, kind="tokens", margin_only=False, chosen_shape="n/a")

REFERENCE_FREE = frozenset(n for n, i in REGISTRY.items() if n != "SFT" and not i.uses_reference)


def register(info: LossInfo, replace: bool = False) -> None:
    """Add a custom preference loss to the registry (experiments, test doubles)."""
    if info.name in REGISTRY and not replace:
        raise LossConfigError(f"loss variant {info.name!r} already registered")
    if info.fn is None:
        raise LossConfigError("a registered loss needs a loss function")
    REGISTRY[info.name] = info


def unregister(name: str) -> None:
    if name == "SFT" or name in PREFERENCE_VARIANTS:
        raise LossConfigError(f"built-in variant {name!r} cannot be removed")
    REGISTRY.pop(name, None)


def get_info(variant: str) -> LossInfo:
    try:
        return REGISTRY[variant]
    except KeyError:
        raise LossConfigError(f"unknown loss variant {variant!r}; registered: {', '.join(REGISTRY)}") from None


def spec_for(variant: str, **overrides) -> LossSpec:
    """LossSpec populated with the registry defaults for ``variant``."""
    info = get_info(variant)
    params = {k: v for k, v in info.defaults.items() if k not in ("beta", "gamma")}
    beta = overrides.pop("beta", info.defaults.get("beta", 0.1))
    gamma = overrides.pop("gamma", info.defaults.get("gamma", 0.5))
    params.update(overrides)
    return LossSpec(variant, beta=beta, gamma=gamma, params=params)


def variant_loss(batch: PreferenceBatch, spec: LossSpec) -> LossOutput:
    info = get_info(spec.variant)
    if info.fn is None:
        raise LossConfigError(f"{spec.variant} is not a preference loss")
    return info.fn(batch, spec)


def monotone_interval(batch: PreferenceBatch, spec: LossSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair interval of ``policy_chosen`` on which the loss cannot increase as it grows.

    Global for logistic-type losses; bounded above for regression/smoothing losses
    (beyond their target the loss rises again) and bounded below for FocalPO, whose
    weight vanishes on badly mis-ranked pairs.
    """
    info = get_info(spec.variant)
    n = len(batch)
    lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    if info.chosen_shape == "monotone" and not (spec.variant == "GPO" and spec.param("link") == "squared"):
        return lo, hi
    b = spec.beta
    rw = batch.ref_chosen
    ll = batch.policy_rejected - batch.ref_rejected
    if spec.variant == "IPO":
        hi = rw + ll + 1.0 / (2 * b)
    elif spec.variant in ("CDPO", "EXO"):
        eps = spec.param("label_smoothing" if spec.variant == "CDPO" else "target_eps")
        hi = rw + ll + math.log((1 - eps) / eps) / b
    elif spec.variant in ("SPPO", "CalDPO"):
        hi = rw + 1.0 / (2 * b)
    elif spec.variant == "GPO":
        hi = rw + ll + 1.0 / b
    elif spec.variant == "FocalPO":
        s = math.exp(-1.0 / spec.param("focal_gamma"))
        lo = rw + ll + math.log(s / (1 - s)) / b
    else:
        raise LossConfigError(f"{spec.variant} has no pairwise monotone region")
    return lo, hi
