from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import SMALL
from ptbench import losses
from ptbench.model import TinyLM
from ptbench.taskdata import PreferencePair, build_pairs
from ptbench.trainer import (
    AdamState,
    AdamWConfig,
    RunManifest,
    TrainConfig,
    TrainConfigError,
    TrainData,
    adamw_step,
    lr_at,
    train,
)


def small_cfg(**kw) -> TrainConfig:
    base = dict(model=SMALL, epochs=2, micro_batch=4, grad_accum=1, peak_lr=3e-3, checkpoint_every_epoch=False)
    base.update(kw)
    return TrainConfig(**base)


def gold_pairs(problems) -> list[PreferencePair]:
    out = []
    for p in problems:
        wrong = list(p.gold_response)
        wrong[-2] = wrong[-2] + 1 if wrong[-2] < 12 else 3  # perturb the final answer digit
        out.append(PreferencePair(p.id, list(p.prompt), list(p.gold_response), wrong))
    return out


# ------------------------------------------------------------------ schedule / optimiser


def test_lr_schedule_warmup_and_cosine():
    cfg = TrainConfig(peak_lr=1e-6, warmup_fraction=0.1)
    assert lr_at(0, 100, cfg) == 0.0
    assert lr_at(5, 100, cfg) == pytest.approx(5e-7)
    assert lr_at(10, 100, cfg) == pytest.approx(1e-6)
    assert lr_at(55, 100, cfg) == pytest.approx(5e-7)
    assert lr_at(100, 100, cfg) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        lr_at(101, 100, cfg)


def test_adamw_first_step_matches_scalar_oracle():
    cfg = AdamWConfig(beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0)
    p = np.array([1.0, -2.0])
    g = np.array([0.5, -0.25])
    out, state, ok = adamw_step(p, g, AdamState.zeros(2), 1e-2, cfg)
    assert ok and state.t == 1
    # bias-corrected first moments equal g, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(out, p - 1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-14)
    np.testing.assert_allclose(state.m, 0.1 * g)

    # second step by hand
    g2 = np.array([-0.5, 0.1])
    m = 0.9 * state.m + 0.1 * g2
    v = 0.95 * state.v + 0.05 * g2**2
    expect = out - 1e-2 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.95**2)) + 1e-8)
    out2, _, _ = adamw_step(out, g2, state, 1e-2, cfg)
    np.testing.assert_allclose(out2, expect, rtol=1e-13)


def test_weight_decay_is_decoupled():
    cfg = AdamWConfig(weight_decay=0.1)
    p = np.array([2.0, -4.0])
    out, _, _ = adamw_step(p, np.zeros(2), AdamState.zeros(2), 0.5, cfg)
    np.testing.assert_allclose(out, p * (1 - 0.5 * 0.1))


def test_adamw_refuses_non_finite_gradients_and_respects_mask():
    p = np.ones(3)
    st = AdamState.zeros(3)
    out, st2, ok = adamw_step(p, np.array([1.0, np.nan, 0.0]), st, 0.1, AdamWConfig())
    assert not ok and out is p and st2 is st
    out, _, ok = adamw_step(p, np.ones(3), st, 0.1, AdamWConfig(), mask=np.array([True, False, True]))
    assert ok and out[1] == 1.0 and out[0] < 1.0


# ------------------------------------------------------------------ config


def test_config_hash_roundtrip_and_from_flat():
    cfg = TrainConfig.from_flat({"algorithm": "SGRPO", "peak_lr": 1e-4, "group_size": 8, "weight_decay": 0.0,
                                 "beta": 0.5, "lora_rank": 2, "lora_enabled": True})
    assert cfg.rl.group_size == 8 and cfg.rl.variant == "SGRPO"
    assert cfg.adamw.weight_decay == 0.0
    assert cfg.loss_params == {"beta": 0.5}
    assert cfg.adapter.rank == 2 and cfg.adapter.enabled
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.config_hash() == cfg.config_hash()
    assert TrainConfig(seed=1).config_hash() != TrainConfig(seed=2).config_hash()


def test_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(TrainConfigError):
        TrainConfig(algorithm="GSPO").validate()  # rl.variant left at its default
    with pytest.raises(losses.LossConfigError):
        TrainConfig(algorithm="Nope").validate()
    with pytest.raises(TrainConfigError):
        TrainConfig(pair_refresh_epochs=-1).validate()
    assert TrainConfig(algorithm="SFT", micro_batch=2, grad_accum=4).effective_batch == 8


# ------------------------------------------------------------------ loop


def test_gradient_accumulation_matches_large_micro_batch(tiny_problems):
    data = TrainData(tiny_problems)
    a, ma = train(small_cfg(micro_batch=1, grad_accum=4), data)
    b, mb = train(small_cfg(micro_batch=4, grad_accum=1), data)
    assert a.permutations == b.permutations
    assert np.max(np.abs(ma.flat() - mb.flat())) < 1e-10


def test_sft_reduces_loss(tiny_problems):
    man, _ = train(small_cfg(epochs=6), TrainData(tiny_problems))
    first = np.mean([m["loss"] for m in man.metrics[:6]])
    last = np.mean([m["loss"] for m in man.metrics[-6:]])
    assert last < first


def test_same_config_same_result(tiny_problems):
    a, _ = train(small_cfg(seed=5), TrainData(tiny_problems))
    b, _ = train(small_cfg(seed=5), TrainData(tiny_problems))
    assert a.param_hash == b.param_hash
    assert a.permutations == b.permutations


def test_seed_propagation_flag(tiny_problems):
    data = TrainData(tiny_problems)
    off = [train(small_cfg(seed=s, propagate_seed_to_sampler=False), data)[0] for s in (1, 2)]
    on = [train(small_cfg(seed=s, propagate_seed_to_sampler=True), data)[0] for s in (1, 2)]
    assert off[0].param_hash == off[1].param_hash
    assert off[0].permutations == off[1].permutations
    assert on[0].param_hash != on[1].param_hash
    assert on[0].permutations != on[1].permutations


def test_preference_algorithms_share_data_order(tiny_problems):
    data = TrainData(tiny_problems, gold_pairs(tiny_problems))
    sft = train(small_cfg(seed=9), TrainData(tiny_problems))[0]
    dpo = train(small_cfg(algorithm="DPO", seed=9), data)[0]
    ipo = train(small_cfg(algorithm="IPO", seed=9), data)[0]
    assert dpo.permutations == ipo.permutations == sft.permutations
    assert dpo.param_hash != ipo.param_hash
    assert all("reward_margin" in m for m in dpo.metrics)


def test_problems_without_pairs_give_empty_steps(tiny_problems):
    pairs = gold_pairs(tiny_problems[:2])
    man, _ = train(small_cfg(algorithm="DPO", micro_batch=1), TrainData(tiny_problems, pairs))
    empty = [m for m in man.metrics if m.get("empty")]
    assert len(empty) == 2 * (len(tiny_problems) - 2)
    assert man.total_steps == len(man.metrics)


def test_pair_for_unknown_problem_is_rejected(tiny_problems):
    pairs = gold_pairs(tiny_problems[:1])
    with pytest.raises(TrainConfigError):
        train(small_cfg(algorithm="DPO"), TrainData(tiny_problems[1:], pairs))
    with pytest.raises(TrainConfigError):
        train(small_cfg(algorithm="DPO"), TrainData(tiny_problems, []))


def test_odpo_regenerates_pairs_each_epoch(tiny_problems):
    model = TinyLM.init(SMALL, seed=0)
    pairs = build_pairs(tiny_problems, model, 4, np.random.default_rng(0), max_tokens=8)
    cfg = small_cfg(algorithm="ODPO", epochs=3, samples_per_prompt=4, max_new_tokens=8)
    man, _ = train(cfg, TrainData(tiny_problems, pairs), model=model)
    regen = [i for i in man.incidents if i["kind"] == "pairs-regenerated"]
    assert [i["epoch"] for i in regen] == [1, 2]


def test_periodic_refresh_schedule(tiny_problems):
    model = TinyLM.init(SMALL, seed=0)
    pairs = build_pairs(tiny_problems, model, 4, np.random.default_rng(0), max_tokens=8)
    cfg = small_cfg(algorithm="DPO", epochs=5, pair_refresh_epochs=2, refresh_reference=True,
                    samples_per_prompt=4, max_new_tokens=8)
    man, _ = train(cfg, TrainData(tiny_problems, pairs), model=model)
    assert [i["epoch"] for i in man.incidents if i["kind"] == "pairs-regenerated"] == [2, 4]


def _nan_loss(batch, spec):
    out = losses.dpo_loss(batch, spec)
    out.value = float("nan")
    return out


def test_non_finite_loss_is_skipped_then_declared_pathological(tiny_problems):
    losses.register(losses.LossInfo("NaNLoss", "test double", "Vanilla", True, 2024, _nan_loss, {"beta": 0.1}))
    try:
        man, model = train(small_cfg(algorithm="NaNLoss"), TrainData(tiny_problems, gold_pairs(tiny_problems)))
    finally:
        losses.unregister("NaNLoss")
    assert man.verdict == "pathological"
    assert "non-finite" in man.pathology_reason
    assert model.param_hash() == TinyLM.init(SMALL, seed=0).param_hash()


def test_rl_run_records_diagnostics(tiny_problems):
    cfg = small_cfg(algorithm="SGRPO", epochs=1, micro_batch=2, grad_accum=2)
    cfg.rl.variant = "SGRPO"
    cfg.rl.group_size = 2
    cfg.rl.max_rollout_tokens = 6
    man, _ = train(cfg, TrainData(tiny_problems[:8]))
    assert len(man.metrics) == 2
    assert {"clip_fraction", "approx_kl", "nan_flag", "mean_reward"} <= set(man.metrics[0])


def test_checkpoints_and_manifest(tmp_path, tiny_problems):
    cfg = small_cfg(checkpoint_every_epoch=True)
    man, model = train(cfg, TrainData(tiny_problems), out_dir=tmp_path)
    assert len(man.checkpoints) == 2
    loaded, header = TinyLM.load(man.final_checkpoint)
    assert loaded.param_hash() == model.param_hash() == man.param_hash
    disk = RunManifest.read(tmp_path / "manifest.json")
    assert disk.config_hash == cfg.config_hash()
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == man.total_steps
    assert all(math.isfinite(json.loads(x)["loss"]) for x in lines)
