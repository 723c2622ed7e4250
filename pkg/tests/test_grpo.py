import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpcc.errors import ConfigError, InputError, NumericalError
from mpcc.grpo import (METRIC_COLUMNS, RftConfig, assemble_group, grpo_gradient, grpo_objective,
                       grpo_update, make_prior, normalize_advantages, rollout_group, rollout_groups,
                       train_rft, write_metrics_csv)
from mpcc.policy import logprob, make_trajectory, snapshot_reference
from mpcc.reward import RewardBreakdown, score_tokens
from mpcc.world import generate_queries, synthesize_think_trace

from test_policy import fd_grad, random_response, rel_error


def rb(total):
    return RewardBreakdown(0.0, 0.0, 0.0, float(total))


def traj(params, q, tokens):
    ids = params.encode(tokens)
    lp = [logprob(params, q, tokens[:i + 1])[0] - logprob(params, q, tokens[:i])[0] for i in range(len(tokens))]
    return make_trajectory(params, q.query_id, ids, np.array(lp))


def hand_group(params, q, responses, rewards, prior_index=None):
    return assemble_group(q, [traj(params, q, r) for r in responses], [rb(r) for r in rewards], prior_index)


@pytest.fixture(scope="module")
def queries(world):
    return generate_queries(world, 20, np.random.default_rng(5))


# normalisation

def test_two_point_group():
    adv, mu, sigma, skipped = normalize_advantages([0, 2])
    assert list(adv) == [-1.0, 1.0] and mu == 1.0 and sigma == 1.0 and not skipped


def test_equal_rewards_are_skipped():
    adv, _, _, skipped = normalize_advantages([1.5] * 5)
    assert skipped and np.all(adv == 0.0)


def test_prior_fold_in_example(small_policy, queries):
    q = queries[0]
    g = hand_group(small_policy, q, [["cup"], ["pan"], ["fork"], ["<think>"]], [0, 0, 1, 3], prior_index=3)
    assert g.mu == 1.0 and g.sigma == pytest.approx(math.sqrt(1.5), abs=1e-12)
    assert g.advantages == pytest.approx([-0.81650, -0.81650, 0.0, 1.63299], abs=1e-5)
    assert [m.is_prior for m in g.members] == [False, False, False, True]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 3, allow_nan=False), min_size=2, max_size=12))
def test_advantage_invariants(rewards):
    adv, _, _, skipped = normalize_advantages(rewards)
    if skipped:
        assert np.all(adv == 0.0)
    else:
        assert abs(adv.mean()) < 1e-9
        assert abs(adv.std() - 1.0) < 1e-6


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 3, allow_nan=False), min_size=2, max_size=12),
       st.floats(-5, 5), st.floats(0.1, 10))
def test_shift_and_scale_invariance(rewards, c, s):
    base, _, _, skipped = normalize_advantages(rewards)
    if skipped or np.std(rewards) < 1e-6:
        return
    assert np.max(np.abs(normalize_advantages(np.add(rewards, c))[0] - base)) < 1e-9
    assert np.max(np.abs(normalize_advantages(np.multiply(rewards, s))[0] - base)) < 1e-9


def test_fold_in_equals_plain_group_on_concatenation(small_policy, queries):
    rng = np.random.default_rng(0)
    q = queries[0]
    t = traj(small_policy, q, ["cup"])
    for _ in range(1000):
        G = int(rng.integers(2, 9))
        on = list(rng.uniform(0, 3, G - 1))
        prior = float(rng.uniform(0, 3))
        folded = assemble_group(q, [t] * G, [rb(r) for r in on + [prior]], prior_index=G - 1)
        plain, *_ = normalize_advantages(on + [prior])
        assert np.max(np.abs(folded.advantages - plain)) < 1e-9


# rollout

def test_rollout_group_shapes(small_policy, queries, world):
    q = queries[1]
    g = rollout_group(small_policy, q, 5, 1.0, np.random.default_rng(0))
    assert len(g.members) == 5 and not any(m.is_prior for m in g.members)
    for m in g.members:
        assert m.reward == score_tokens(m.trajectory.response_tokens, q.gold)
    prior = make_prior(q, synthesize_think_trace(world, q).tokens)
    g = rollout_group(small_policy, q, 5, 1.0, np.random.default_rng(0), prior)
    assert sum(m.is_prior for m in g.members) == 1
    assert g.members[-1].is_prior and g.members[-1].trajectory.response_tokens == prior.annotated_tokens
    assert g.members[-1].reward.r_fmt == 1.0


def test_rollout_rejects_small_groups(small_policy, queries):
    with pytest.raises(ConfigError):
        rollout_group(small_policy, queries[0], 1, 1.0, np.random.default_rng(0))


def test_batched_rollout_matches_single(small_policy, queries):
    rngs = lambda: [np.random.default_rng(i) for i in range(3)]
    batch = rollout_groups(small_policy, queries[:3], 4, 1.0, rngs())
    for q, r, g in zip(queries[:3], rngs(), batch):
        single = rollout_group(small_policy, q, 4, 1.0, r)
        assert [m.trajectory for m in single.members] == [m.trajectory for m in g.members]


def test_malformed_prior_rejected(queries):
    with pytest.raises(InputError):
        make_prior(queries[0], ["<answer>"])


# objective and update

def random_groups(params, queries, rng, n=2, G=3):
    groups = []
    for q in queries[:n]:
        resps = [random_response(rng, params.vocab, int(rng.integers(1, 5))) for _ in range(G)]
        groups.append(hand_group(params, q, resps, rng.uniform(0, 3, G)))
    return groups


def test_objective_gradient_matches_finite_differences(small_policy, queries):
    rng = np.random.default_rng(1)
    p = small_policy
    ref = p.with_theta(p.theta + rng.normal(0, 0.05, p.theta.shape))
    for kl in (0.0, 0.3):
        groups = random_groups(p, queries, rng)
        g, _ = grpo_gradient(p, groups, ref, kl)
        fd = fd_grad(lambda t: grpo_objective(p.with_theta(t), groups, ref, kl), p.theta)
        assert rel_error(g, fd) < 1e-4


def test_all_skipped_leaves_params_unchanged(small_policy, queries):
    g = hand_group(small_policy, queries[0], [["cup"], ["pan"]], [1.0, 1.0])
    new, diag = grpo_update(small_policy, [g], 0.5)
    assert new.theta.tobytes() == small_policy.theta.tobytes()
    assert diag["frac_skipped"] == 1.0 and diag["grad_norm"] == 0.0


def test_tiny_step_moves_logprobs_in_advantage_direction(small_policy, queries):
    q = queries[0]
    good, bad = ["cup", "<eos>"], ["pan", "<eos>"]
    g = hand_group(small_policy, q, [bad, good], [0.0, 2.0])
    new, _ = grpo_update(small_policy, [g], 1e-4)
    assert logprob(new, q, good)[0] > logprob(small_policy, q, good)[0]
    assert logprob(new, q, bad)[0] < logprob(small_policy, q, bad)[0]


def test_update_is_reference_independent_without_kl(small_policy, queries):
    groups = random_groups(small_policy, queries, np.random.default_rng(2))
    a, _ = grpo_update(small_policy, groups, 0.1, snapshot_reference(small_policy), 0.0)
    other = small_policy.with_theta(small_policy.theta * 0.5)
    b, _ = grpo_update(small_policy, groups, 0.1, other, 0.0)
    c, _ = grpo_update(small_policy, groups, 0.1, None, 0.0)
    assert a.theta.tobytes() == b.theta.tobytes() == c.theta.tobytes()


def test_prior_only_positive_advantage_is_reinforced(small_policy, queries, world):
    q = queries[2]
    prior = make_prior(q, synthesize_think_trace(world, q).tokens)
    trajs = [traj(small_policy, q, ["pan"]), traj(small_policy, q, ["cup"]),
             traj(small_policy, q, list(prior.annotated_tokens))]
    g = assemble_group(q, trajs, [rb(0), rb(0), rb(3)], prior_index=2)
    assert [a > 0 for a in g.advantages] == [False, False, True]
    new, _ = grpo_update(small_policy, [g], 1e-3)
    assert logprob(new, q, prior.annotated_tokens)[0] > logprob(small_policy, q, prior.annotated_tokens)[0]


def test_update_errors(small_policy, queries):
    with pytest.raises(InputError):
        grpo_update(small_policy, [], 0.1)
    g = hand_group(small_policy, queries[0], [["cup"], ["pan"]], [0.0, 1.0])
    with pytest.raises(ConfigError):
        grpo_update(small_policy, [g], 0.1, kl_coeff=-1.0)
    broken = small_policy.with_theta(np.full_like(small_policy.theta, np.nan))
    with pytest.raises(NumericalError, match=queries[0].query_id):
        grpo_update(broken, [g], 0.1)


def test_kl_estimate_zero_at_reference(small_policy, queries):
    groups = random_groups(small_policy, queries, np.random.default_rng(3))
    _, kl = grpo_gradient(small_policy, groups, snapshot_reference(small_policy), 0.0)
    assert kl == 0.0


# training loop

def test_routing_without_annotations_equals_plain(small_policy, queries):
    cfg = RftConfig(steps=5, batch_queries=4, group_size=4, seed=3)
    data = [(q, None) for q in queries]
    plain = train_rft(small_policy, data, cfg)
    routed = train_rft(small_policy, data, RftConfig(steps=5, batch_queries=4, group_size=4, seed=3,
                                                     prior_sampling=True))
    assert plain.metrics == routed.metrics
    assert plain.params.theta.tobytes() == routed.params.theta.tobytes()


def test_every_annotated_group_has_one_prior(small_policy, queries, world, monkeypatch):
    import mpcc.grpo as grpo
    seen = []
    real = grpo.rollout_groups

    def spy(*args, **kw):
        groups = real(*args, **kw)
        seen.extend(groups)
        return groups

    monkeypatch.setattr(grpo, "rollout_groups", spy)
    data = [(q, synthesize_think_trace(world, q).tokens) for q in queries]
    train_rft(small_policy, data, RftConfig(steps=3, batch_queries=4, group_size=4, prior_sampling=True))
    assert seen and all(sum(m.is_prior for m in g.members) == 1 for g in seen)


def test_training_is_deterministic_and_logs(small_policy, queries, tmp_path):
    cfg = RftConfig(steps=4, batch_queries=3, group_size=3, seed=9)
    a = train_rft(small_policy, [(q, None) for q in queries], cfg)
    b = train_rft(small_policy, [(q, None) for q in queries], cfg)
    assert a.metrics == b.metrics and a.params.theta.tobytes() == b.params.theta.tobytes()
    assert [m["step"] for m in a.metrics] == [0, 1, 2, 3]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, a.metrics)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS) and len(lines) == 5


def test_callback_stops_early(small_policy, queries):
    r = train_rft(small_policy, [(q, None) for q in queries], RftConfig(steps=50, group_size=2),
                  callback=lambda step, row: step == 2)
    assert len(r.metrics) == 3


def test_empty_dataset(small_policy):
    with pytest.raises(InputError):
        train_rft(small_policy, [])
