import numpy as np
import pytest

from capita import datagen
from capita.expert import Exploration, Manipulation, ProgressTracker
from capita.policy import CATALOG, FEATURE_DIM, ParametricPolicy
from capita.trainer import (METRIC_COLUMNS, TrainConfig, action_match, center_group, clipped_terms, eipo_objective,
                            expert_advantage, normalize_group, state_table, train)

TWO_MANIPS = ProgressTracker((Manipulation("grasp", ("Mug",)), Manipulation("put", ("Mug", "Desk"))))
GRASP = ("manip", "grasp", "Mug")
WRONG = ("explore", "Apple")


@pytest.fixture(scope="module")
def table(tasks):
    ds = datagen.build_stage1(tasks[:14], seed=0)
    return state_table(ds.of("scheduler"), 0.95, "manip-only")


def test_center_group_example():
    out = center_group([0, -0.75, -0.75, 0])
    assert np.allclose(out, [0.375, -0.375, -0.375, 0.375])


def test_center_group_equal_and_single_nonzero():
    assert np.all(center_group([2.0] * 5) == 0)
    assert np.allclose(center_group([0, 0, 0, -1]), [0.25, 0.25, 0.25, -0.75])
    with pytest.raises(ValueError):
        center_group([1.0])


def test_normalize_group_has_unit_spread():
    z = normalize_group([0.0, 1.0, 1.0, 0.0])
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("gamma", [0.5, 0.95, 1.0])
def test_expert_action_has_zero_advantage(gamma):
    assert expert_advantage(TWO_MANIPS, GRASP, gamma) == 0.0


def test_expert_exploration_has_zero_advantage():
    tr = ProgressTracker((Exploration("mug", "Mug"), Manipulation("grasp", ("Mug",))))
    assert abs(expert_advantage(tr, ("explore", "Mug"), 0.95)) < 1e-12


def test_wrong_action_advantage():
    assert expert_advantage(TWO_MANIPS, WRONG, 0.5) == pytest.approx(-0.75)
    assert expert_advantage(TWO_MANIPS, WRONG, 1.0) == 0.0


def test_advantage_needs_tracker():
    with pytest.raises(TypeError):
        expert_advantage(None, GRASP, 0.5)


@pytest.mark.parametrize("ratio,expected", [(1.3, -1.3), (0.7, -0.8)])
def test_clip_cases(ratio, expected):
    value, _ = clipped_terms([ratio], [-1.0], 0.2)
    assert value[0] == pytest.approx(expected, abs=0)


def test_on_policy_limit():
    pol = ParametricPolicy(init_scale=0.5, seed=1)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, FEATURE_DIM))
    acts = rng.integers(len(CATALOG), size=4)
    old = pol.logprobs(X)[np.arange(4), acts]
    adv = np.array([0.5, -1.0, 2.0, 0.0])
    obj, grads, _ = eipo_objective(pol, X, acts, old, adv, 0.2)
    assert obj == pytest.approx(adv.mean())
    assert np.allclose(grads[0], pol.grad_weighted(X, acts, adv / 4)[0])


def test_eipo_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-6
    checked = 0
    for draw in range(100):
        pol = ParametricPolicy(init_scale=0.3, seed=draw)
        old_pol = ParametricPolicy(init_scale=0.3, seed=draw + 1000)
        X = rng.normal(size=(8, FEATURE_DIM))
        acts = rng.integers(len(CATALOG), size=8)
        old = old_pol.logprobs(X)[np.arange(8), acts]
        adv = center_group(rng.normal(size=8))
        ratio = np.exp(pol.logprobs(X)[np.arange(8), acts] - old)
        if np.any(np.abs(np.abs(ratio - 1) - 0.2) < 1e-3):
            continue  # too close to a clip boundary for a two-sided difference
        _, grads, _ = eipo_objective(pol, X, acts, old, adv, 0.2)
        D = rng.normal(size=pol.params[0].shape)
        base = pol.params[0].copy()
        pol.params[0] = base + h * D
        up = eipo_objective(pol, X, acts, old, adv, 0.2)[0]
        pol.params[0] = base - h * D
        down = eipo_objective(pol, X, acts, old, adv, 0.2)[0]
        pol.params[0] = base
        fd = (up - down) / (2 * h)
        analytic = float((grads[0] * D).sum())
        assert abs(fd - analytic) <= 1e-4 * max(abs(fd), abs(analytic), 1e-8)
        checked += 1
    assert checked >= 50


def test_expert_fixed_point_has_zero_gradient():
    pol = ParametricPolicy(init_scale=0.3, seed=2)
    X = np.random.default_rng(0).normal(size=(16, FEATURE_DIM))
    acts = np.zeros(16, dtype=int)
    old = pol.logprobs(X)[np.arange(16), acts]
    _, grads, _ = eipo_objective(pol, X, acts, old, center_group(np.zeros(16)), 0.2)
    assert np.abs(grads[0]).max() == 0


def test_non_finite_ratio_is_skipped():
    pol = ParametricPolicy()
    X = np.zeros((2, FEATURE_DIM))
    _, _, stats = eipo_objective(pol, X, np.array([0, 1]), np.array([-np.inf, 0.0]), np.array([1.0, -1.0]), 0.2)
    assert stats["skipped"] == 1


def test_gamma_one_leaves_policy_unchanged(tasks):
    ds = datagen.build_stage1(tasks[:14], seed=0)
    flat = state_table(ds.of("scheduler"), 1.0, "manip-only")
    assert np.all(flat.advantages == 0)
    init = ParametricPolicy(init_scale=0.2, seed=4)
    res = train(TrainConfig(gamma=1.0, iterations=3, batch_size=64), table=flat, init=init)
    assert np.allclose(res.policy.params[0], init.params[0], atol=1e-12)


def test_table_advantages_are_non_positive(table):
    assert (table.advantages <= 1e-12).all()
    assert np.all(np.abs(table.advantages[table.optimal]) < 1e-12)


def test_bc_fits_expert(table):
    res = train(TrainConfig(algo="bc", iterations=60, batch_size=128), table=table)
    assert action_match(res.policy, table) > 0.9


def test_eipo_improves_match(table):
    res = train(TrainConfig(iterations=15, batch_size=128), table=table, seed=1)
    assert action_match(res.policy, table) > action_match(ParametricPolicy(), table)


def test_metrics_csv(table, tasks):
    res = train(TrainConfig(iterations=2, batch_size=32, probe_every=1), table=table, probe_tasks=tasks[:2])
    lines = res.metrics_csv().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS) and len(lines) == 3


def test_digest_mismatch_refused(table):
    with pytest.raises(ValueError, match="digest"):
        train(TrainConfig(iterations=1), table=table, dataset_digest="feedfacefeedface")


@pytest.mark.parametrize("kw", [{"gamma": 0}, {"epsilon": 1.0}, {"group_size": 1}, {"algo": "ppo"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_grpo_return_runs(tasks):
    res = train(TrainConfig(algo="grpo-return", iterations=1, batch_size=16, group_size=2), tasks=tasks[:3])
    assert len(res.metrics) == 1
