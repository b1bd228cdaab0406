import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparse_metanet import wcst
from sparse_metanet.autodiff import Tape, parameter
from sparse_metanet.core import FastWeightConfig
from sparse_metanet.optim import OptimizerSpec
from sparse_metanet.trainer import OnlineLearner, PlainLearner, TrainerConfig


def test_first_task_any_rule():
    rules = set()
    for s in range(60):
        env = wcst.WCST(seed=s)
        env.next_task()
        assert env.old_rule is None
        rules.add(env.current_rule)
    assert rules == {0, 1, 2}


def test_switch_never_repeats_and_is_balanced():
    env = wcst.WCST(seed=1)
    n, counts = 10_000, {1: 0, 2: 0}
    for _ in range(n):
        env.current_rule = 0
        env.next_task()
        counts[env.current_rule] += 1
    assert set(counts) == {1, 2}
    sigma = math.sqrt(n * 0.25)
    assert abs(counts[1] - n / 2) <= 3 * sigma


def test_same_task_allowed():
    env = wcst.WCST(seed=2, allow_same_task=True)
    hits = 0
    for _ in range(300):
        env.current_rule = 0
        env.next_task()
        hits += env.current_rule == 0
    assert hits > 0


def test_targets_and_encoding_for_2_0_3():
    assert wcst.encode_card([2, 0, 3]).tolist() == [0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0]
    codes = (2, 0, 3)
    assert [codes[r] for r in (wcst.RULES["color"], wcst.RULES["shape"], wcst.RULES["number"])] == [2, 0, 3]


@given(st.permutations(range(4)))
def test_encode_decode_roundtrip(perm):
    codes = list(perm[:3])
    assert wcst.decode_card(wcst.encode_card(codes)) == codes


def test_generated_cards_are_consistent():
    env = wcst.WCST(seed=3)
    for _ in range(500):
        enc, target, prev = env.next_card()
        card = env.pending
        assert len(set(card.code_indices)) == 3
        assert target == card.code_indices[env.current_rule]
        assert wcst.decode_card(enc) == list(card.code_indices)
        env.step(0)


def _answer(env, correct=True):
    env.next_card()
    card = env.pending
    a = card.target if correct else (card.target + 1) % 4
    return env.step(a)


def test_solved_exactly_at_48th_correct():
    env = wcst.WCST(seed=4)
    flags = [_answer(env)[1] for _ in range(48)]
    assert flags == [False] * 47 + [True]
    assert 1 <= env.episodes_until_switch <= 50


def test_error_resets_streak():
    env = wcst.WCST(seed=5)
    for _ in range(47):
        assert not _answer(env)[1]
    assert not _answer(env, correct=False)[1]
    flags = [_answer(env)[1] for _ in range(48)]
    assert flags == [False] * 47 + [True]


def test_perseveration_flag():
    env = wcst.WCST(seed=6)
    env.next_task()
    env.next_task()
    seen = 0
    for _ in range(400):
        env.next_card()
        card = env.pending
        a = card.target_prev
        r, _, persev = env.step(a)
        assert persev == (a != card.target)
        seen += persev
    assert seen > 0


def test_action_out_of_range():
    env = wcst.WCST(seed=0)
    env.next_card()
    with pytest.raises(ValueError):
        env.step(4)


def test_switch_happens_after_scheduled_episodes():
    env = wcst.WCST(seed=7)
    for _ in range(48):
        _answer(env)
    wait, rule = env.episodes_until_switch, env.current_rule
    switched = [env.end_episode() for _ in range(wait)]
    assert switched == [False] * (wait - 1) + [True]
    assert env.current_rule != rule


# -- A2C -----------------------------------------------------------------------------


def test_discounted_returns():
    assert wcst.discounted_returns([1.0, -1.0, 1.0], 0.9).tolist() == pytest.approx([1 - 0.9 + 0.81, -1 + 0.9, 1.0])


def test_uniform_policy_entropy_is_log4():
    tape = Tape()
    _, parts = wcst.a2c_loss(tape, parameter(np.zeros((5, 4))), parameter(np.zeros((5, 1))), [0, 1, 2, 3, 0],
                             [1, -1, 1, 1, -1])
    assert parts["entropy"] == pytest.approx(math.log(4), abs=1e-12)


def test_perfect_value_zero_advantage():
    rewards = [1.0, -1.0, 1.0]
    returns = wcst.discounted_returns(rewards, 0.9)
    tape = Tape()
    logits = parameter(np.random.default_rng(0).normal(size=(3, 4)))
    _, parts = wcst.a2c_loss(tape, logits, parameter(returns[:, None]), [0, 2, 1], rewards)
    assert np.abs(parts["advantage"]).max() == 0.0 and parts["policy"] == 0.0


def test_single_step_loss_by_hand():
    logits = np.array([[0.2, -0.5, 1.0, 0.1]])
    value, action, reward = 0.3, 2, -1.0
    cfg = wcst.A2CConfig(0.9, 0.5, 0.01)
    loss, _ = wcst.a2c_loss(Tape(), parameter(logits), parameter(np.array([[value]])), [action], [reward], cfg)
    z = logits[0] - logits[0].max()
    logp = z - math.log(sum(math.exp(v) for v in z))
    adv = reward - value
    ent = -sum(math.exp(v) * v for v in logp)
    want = -adv * logp[action] + 0.5 * adv ** 2 - 0.01 * ent
    assert abs(float(loss.value) - want) <= 1e-12


def test_empty_trajectory():
    with pytest.raises(ValueError):
        wcst.a2c_loss(Tape(), parameter(np.zeros((0, 4))), parameter(np.zeros((0, 1))), [], [])


def test_agent_net_avoids_dead_initialization():
    net = wcst.make_agent_net(0, hidden=(8, 8))
    assert not wcst.hidden_all_zero(net, wcst.ALL_CARDS)
    assert wcst.ALL_CARDS.shape == (24, 12)


def _short_run(learner_kind, n_tasks=3, cap=20, seed=0):
    net = wcst.make_agent_net(seed, hidden=(16, 16), fast=learner_kind == "smn")
    if learner_kind == "smn":
        cfg = TrainerConfig(k=3, fast=FastWeightConfig(), slow_optimizer=OptimizerSpec("adam", 1e-3),
                            meta_optimizer=OptimizerSpec("adam", 1e-3), seed=seed)
        learner = OnlineLearner(net, cfg, wcst.wcst_loss)
    else:
        learner = PlainLearner(net, 1, OptimizerSpec("adam", 1e-3), wcst.wcst_loss)
    env = wcst.WCST(seed=[seed, 3])
    return wcst.run_agent(learner, env, np.random.default_rng([seed, 4]), n_tasks, cap)


def test_run_agent_records_and_caps():
    recs = _short_run("smn")
    assert [r.task_index for r in recs] == [0, 1, 2]
    for r in recs:
        assert r.episodes <= 20 + 50
        if not r.solved:
            assert r.updates_to_solve is None and r.episodes == 20
        assert 0 <= r.perseveration_errors <= r.errors <= 16 * r.episodes
    assert all(a.rule != b.rule for a, b in zip(recs, recs[1:]))


def test_run_agent_deterministic():
    a, b = _short_run("plain", seed=3), _short_run("plain", seed=3)
    assert a == b
