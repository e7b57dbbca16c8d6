import math
from math import fsum

import numpy as np
import pytest

from grpoagg.aggregate import ClipConfig, objective_balanced, objective_token
from grpoagg.decompose import decompose
from grpoagg.groups import normalize_advantages
from grpoagg.sim import (
    COUNT_SYMBOL,
    EOS_TOKEN,
    PolicyTable,
    SimulationError,
    TaskSpec,
    TrainConfig,
    evaluate_batch,
    logit_gradient_check,
    rollout_seed,
    run_training,
    sample_group,
    train_step,
    verify_reward,
)


def count_task(**kw):
    defaults = dict(kind="count", vocab_size=3, t_max=8, num_prompts=4)
    defaults.update(kw)
    return TaskSpec(**defaults)


def deterministic_policy(task, strings):
    """Policy that emits the given token string per prompt with certainty."""
    logits = np.zeros((task.num_prompts, task.t_max, task.vocab_size))
    for p, string in enumerate(strings):
        for t, tok in enumerate(string):
            logits[p, t, tok] = 50.0
    return PolicyTable(logits)


# --- task and reward ---

def test_verify_reward_count():
    task = count_task(counts=(3, 1, 2, 4))
    a, e = COUNT_SYMBOL, EOS_TOKEN
    assert verify_reward(task, 0, (a, a, a, e)) == 1.0
    assert verify_reward(task, 0, (a, a, e)) == 0.0
    assert verify_reward(task, 0, (a, a, a, a, e)) == 0.0
    assert verify_reward(task, 0, (a, a, a)) == 0.0  # truncated, no EOS
    assert verify_reward(task, 0, (e,)) == 0.0


def test_verify_reward_free_length():
    task = TaskSpec("free-length", vocab_size=4, t_max=6, num_prompts=2, targets=(2, 3))
    assert verify_reward(task, 0, (2, 1, 1, 1, EOS_TOKEN)) == 1.0
    assert verify_reward(task, 0, (2,)) == 1.0
    assert verify_reward(task, 0, (3, EOS_TOKEN)) == 0.0
    assert verify_reward(task, 1, (3, 2, 2)) == 1.0


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("bogus")
    with pytest.raises(ValueError):
        TaskSpec("count", vocab_size=1)
    with pytest.raises(ValueError):
        TaskSpec("count", t_max=4, counts=(4, 1, 1, 1))  # no room for EOS
    with pytest.raises(ValueError):
        TaskSpec("free-length", vocab_size=3, targets=(0, 1, 1, 1))  # EOS target
    task = count_task(t_max=8, num_prompts=4)
    assert task.counts == (1, 2, 3, 4)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(rule="bogus", steps=1)
    with pytest.raises(ValueError):
        TrainConfig(rule="token", steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(rule="token", steps=1, learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(rule="token", steps=1, inner_epochs=0)


# --- sampling ---

def test_sample_group_ratios_exactly_one():
    task = count_task()
    policy = PolicyTable.uniform(4, 8, 3)
    group = sample_group(policy, policy, task, 0, 8, rollout_seed(0, 0, 0), 1e-6)
    assert group.size == 8
    for resp in group.responses:
        assert all(r == 1.0 for r in resp.ratios)
        assert 1 <= resp.length <= task.t_max


def test_sample_group_deterministic():
    task = count_task()
    policy = PolicyTable.uniform(4, 8, 3)
    a = sample_group(policy, policy, task, 2, 16, rollout_seed(5, 3, 2), 1e-6)
    b = sample_group(policy, policy, task, 2, 16, rollout_seed(5, 3, 2), 1e-6)
    assert a == b


def test_sample_group_forced_correct_string():
    task = count_task(counts=(3, 1, 2, 4))
    correct = [(COUNT_SYMBOL,) * n + (EOS_TOKEN,) for n in task.counts]
    policy = deterministic_policy(task, correct)
    group = sample_group(policy, policy, task, 0, 4, rollout_seed(0, 0, 0))
    for resp in group.responses:
        assert resp.reward == 1.0
        assert resp.length == task.counts[0] + 1
        assert not resp.truncated


def test_sample_group_truncation_flag():
    task = count_task()
    # never emits EOS: every response runs to t_max and is flagged
    logits = np.zeros((4, 8, 3))
    logits[:, :, COUNT_SYMBOL] = 50.0
    policy = PolicyTable(logits)
    group = sample_group(policy, policy, task, 0, 4, rollout_seed(1, 0, 0))
    for resp in group.responses:
        assert resp.truncated
        assert resp.length == task.t_max
        assert resp.tokens[-1] != EOS_TOKEN
        assert resp.reward == 0.0


# --- training step ---

def test_train_step_zero_advantages_leaves_policy_unchanged():
    task = count_task()
    # deterministic wrong answer: all rewards 0, eps floor keeps advantages 0
    logits = np.zeros((4, 8, 3))
    logits[:, :, 2] = 50.0
    policy = PolicyTable(logits)
    config = TrainConfig(rule="balanced", steps=1, group_size=8, eps_var=1e-6, seed=0)
    new_policy, records, groups = train_step(policy, policy, task, range(4), config, 0)
    assert np.array_equal(new_policy.logits, policy.logits)
    for rec in records:
        assert rec.objective == 0.0
        assert rec.mean_reward == 0.0


def reinforce_oracle_grad(logits, groups, rule, eps_var):
    """Independent REINFORCE-with-baseline gradient for ratio-1 rollouts."""
    exp = np.exp(logits - logits.max(-1, keepdims=True))
    probs = exp / exp.sum(-1, keepdims=True)
    grad = np.zeros_like(logits)
    for group in groups:
        p = int(group.prompt_id)
        rewards = [r.reward for r in group.responses]
        g = len(rewards)
        mu = sum(rewards) / g
        sigma = math.sqrt(sum((r - mu) ** 2 for r in rewards) / g + eps_var)
        advs = [(r - mu) / sigma for r in rewards]
        lengths = [r.length for r in group.responses]
        n = sum(lengths)
        pos = [i for i, a in enumerate(advs) if a > 0]
        neg = [i for i, a in enumerate(advs) if a < 0]
        n_pos = sum(lengths[i] for i in pos)
        n_neg = sum(lengths[i] for i in neg)
        for i, resp in enumerate(group.responses):
            a = advs[i]
            if rule == "token":
                w = 1.0 / n
            elif rule == "seq":
                w = 1.0 / (g * lengths[i])
            elif i in pos:
                w = (len(pos) / g) / n_pos
            elif i in neg:
                w = (len(neg) / g) / n_neg
            else:
                w = 0.0
            for t, tok in enumerate(resp.tokens):
                grad[p, t, tok] += w * a
                grad[p, t, :] -= w * a * probs[p, t, :]
    return grad / len(groups)


@pytest.mark.parametrize("rule", ["token", "seq", "balanced"])
def test_first_epoch_update_matches_reinforce_oracle(rule):
    task = count_task(num_prompts=2, counts=(1, 2))
    rng = np.random.default_rng(17)
    policy = PolicyTable(rng.normal(scale=0.4, size=(2, 8, 3)))
    lr = 0.1
    config = TrainConfig(rule=rule, steps=1, group_size=4, learning_rate=lr, seed=9)
    new_policy, _, groups = train_step(policy, policy, task, range(2), config, 0)
    update = (new_policy.logits - policy.logits) / lr
    oracle = reinforce_oracle_grad(policy.logits, groups, rule, config.eps_var)
    np.testing.assert_allclose(update, oracle, rtol=1e-10, atol=1e-14)


def test_token_vs_balanced_update_reweighting():
    # at ratio 1 the token and balanced gradients differ per response by the
    # factor the decomposition predicts: (G/N) * Tbar of that response's sign
    task = count_task()
    policy = PolicyTable.uniform(4, 8, 3)
    clip = ClipConfig()
    group = sample_group(policy, policy, task, 0, 16, rollout_seed(3, 0, 0))
    adv = normalize_advantages(group)
    if adv.k == 0 or adv.k == group.size:
        pytest.skip("needs a mixed group for this seed")
    report = decompose(group, adv, clip, "token")
    tok = objective_token(group, adv, clip)
    bal = objective_balanced(group, adv, clip)
    g, n = group.size, group.total_tokens
    for i in range(group.size):
        if i in adv.pos_indices:
            factor = (g / n) * report.tbar_pos
        elif i in adv.neg_indices:
            factor = (g / n) * report.tbar_neg
        else:
            continue
        np.testing.assert_allclose(
            tok.grad_ratios[i], bal.grad_ratios[i] * factor, rtol=1e-12
        )


def test_run_training_zero_steps(tmp_path):
    task = count_task()
    config = TrainConfig(rule="balanced", steps=0)
    csv = tmp_path / "m.csv"
    records, policy = run_training(task, config, metrics_path=csv)
    assert records == []
    assert np.array_equal(policy.logits, np.zeros((4, 8, 3)))
    assert len(csv.read_text(encoding="utf-8").splitlines()) == 1


def test_run_training_deterministic_stream(tmp_path):
    task = count_task()
    config = TrainConfig(rule="balanced", steps=20, group_size=8, learning_rate=0.5, seed=13)
    rec1, pol1 = run_training(task, config, metrics_path=tmp_path / "a.csv")
    rec2, pol2 = run_training(task, config, metrics_path=tmp_path / "b.csv")
    assert rec1 == rec2
    assert np.array_equal(pol1.logits, pol2.logits)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_run_training_improves_reward():
    task = count_task()
    config = TrainConfig(rule="balanced", steps=60, group_size=16, learning_rate=0.5, seed=3)
    records, _ = run_training(task, config)
    own = [r for r in records if r.rule == "balanced"]
    first = fsum(r.mean_reward for r in own[:5]) / 5
    last = fsum(r.mean_reward for r in own[-5:]) / 5
    assert last > first


def test_run_training_emits_all_rules_per_step():
    task = count_task()
    config = TrainConfig(rule="token", steps=3, group_size=4, seed=0)
    records, _ = run_training(task, config)
    assert len(records) == 3 * 4
    for step in range(3):
        rules = [r.rule for r in records if r.step == step]
        assert rules == ["token", "seq", "balanced", "balanced_gen"]


def test_run_training_rollout_dump(tmp_path):
    from grpoagg.rollout_io import read_rollouts

    task = count_task()
    config = TrainConfig(rule="balanced", steps=2, group_size=4, seed=1)
    run_training(task, config, rollouts_path=tmp_path / "r.jsonl")
    groups = list(read_rollouts(tmp_path / "r.jsonl"))
    assert len(groups) == 2 * 4
    assert groups[0].group_id == "s0-p0"
    assert all(g.has_ratios for g in groups)


def test_count_task_induces_positive_length_gap():
    # once the policy over-generates, wrong responses miss EOS and run long
    task = count_task()
    config = TrainConfig(rule="balanced", steps=60, group_size=16, learning_rate=0.5, seed=3)
    records, policy = run_training(task, config)
    own = [r for r in records if r.rule == "balanced"]
    tail_gaps = [r.len_gap for r in own[-10:] if r.len_gap is not None]
    assert tail_gaps, "expected sign-classified batches late in training"
    assert fsum(tail_gaps) / len(tail_gaps) > 0.0


def test_logit_gradient_check_all_rules():
    rng = np.random.default_rng(5)
    task = count_task(num_prompts=2, t_max=5, counts=(1, 2))
    clip = ClipConfig()
    old = PolicyTable(rng.normal(scale=0.3, size=(2, 5, 3)))
    policy = PolicyTable(old.logits + rng.normal(scale=0.05, size=(2, 5, 3)))
    groups = [
        sample_group(old, old, task, p, 8, rollout_seed(9, 0, p), 1e-6)
        for p in range(2)
    ]
    for rule in ("token", "seq", "balanced", "balanced_gen"):
        assert logit_gradient_check(policy, old, groups, rule, clip, h=1e-4) < 1e-4


def test_inner_epochs_move_ratios_off_one():
    task = count_task()
    config = TrainConfig(
        rule="balanced", steps=1, group_size=16, learning_rate=0.5, seed=3, inner_epochs=3
    )
    policy = PolicyTable.uniform(4, 8, 3)
    new_policy, records, groups = train_step(policy, policy, task, range(4), config, 0)
    assert not np.array_equal(new_policy.logits, policy.logits)
    # second and later epochs see off-policy ratios; the logged objective
    # averages over epochs, so it can move away from the on-policy value
    advs = [normalize_advantages(g) for g in groups]
    ev = evaluate_batch(new_policy, policy, groups, advs, "balanced", config.clip)
    assert ev.objective != 0.0


def test_evaluate_batch_reports_non_finite_gradient():
    task = count_task(num_prompts=2, counts=(1, 2))
    policy = PolicyTable.uniform(2, 8, 3)
    groups = [
        sample_group(policy, policy, task, p, 8, rollout_seed(2, 0, p), 1e-6)
        for p in range(2)
    ]
    advs = [normalize_advantages(g) for g in groups]
    bad_old = np.zeros((2, 8, 3))
    bad_old[:, :, COUNT_SYMBOL] = -800.0  # ratio exp(~800) overflows
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(SimulationError) as err:
        evaluate_batch(policy, PolicyTable(bad_old), groups, advs, "token", ClipConfig())
    assert "prompt" in str(err.value)


def test_policy_table_invariants():
    with pytest.raises(ValueError):
        PolicyTable(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PolicyTable(np.full((1, 2, 3), np.nan))
    policy = PolicyTable(np.random.default_rng(0).normal(size=(2, 4, 5)))
    assert np.allclose(policy.probs().sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        policy.logits[0, 0, 0] = 1.0  # read-only
