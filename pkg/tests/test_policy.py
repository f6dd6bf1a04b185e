import dataclasses

import numpy as np
import pytest

from capita.capabilities import ESSummary, NotFound
from capita.grammar import Invocation, canonical
from capita.policy import (CATALOG, FEATURE_DIM, ParametricPolicy, TaskContext, bind, catalog_canonical,
                           catalog_index, featurize, policy_from_snapshot)
from capita.scheduler import SchedulerState

CTX = TaskContext("pick&place", ("pick&place",), ("Mug", "Desk"))


def feat(state, name):
    from capita.policy import _POS
    return featurize(state, CTX)[_POS[name]]


def test_fresh_state_features():
    s = SchedulerState("put some mug on desk")
    x = featurize(s, CTX)
    assert feat(s, "bias") == 1 and feat(s, "turn") == 0 and feat(s, "og:not-found-streak") == 0
    assert feat(s, "es-success:grasp") == 0
    assert x.shape == (FEATURE_DIM,) and np.isfinite(x).all()


def test_grasp_success_is_counted():
    s = SchedulerState("x", memory=((Invocation("ES", "grasp mug"), ESSummary(True, "ok", "")),))
    assert feat(s, "es-success:grasp") == 1


def test_not_found_streak():
    nf = (Invocation("OG", "mug"), NotFound())
    assert feat(SchedulerState("x", memory=(nf, nf)), "og:not-found-streak") == 2
    other = (Invocation("OG", "desk"), NotFound())
    assert feat(SchedulerState("x", memory=(nf, nf, other)), "og:not-found-streak") == 1


def test_zero_weights_are_uniform():
    pol = ParametricPolicy()
    x = np.random.default_rng(0).normal(size=FEATURE_DIM)
    assert pol.logprob(x, 3) == pytest.approx(-np.log(len(CATALOG)))


def directional_error(pol, x, a, rng, h=1e-5):
    """Relative error of the analytic gradient against a central difference along a random direction."""
    g = pol.grad_logprob(x, a)
    D = [rng.normal(size=P.shape) for P in pol.params]
    base = [P.copy() for P in pol.params]
    pol.params = [P + h * d for P, d in zip(base, D)]
    up = pol.logprob(x, a)
    pol.params = [P - h * d for P, d in zip(base, D)]
    down = pol.logprob(x, a)
    pol.params = base
    fd = (up - down) / (2 * h)
    analytic = sum(float((gi * d).sum()) for gi, d in zip(g, D))
    return abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12)


def test_normalization_and_gradients():
    rng = np.random.default_rng(1)
    worst = 0.0
    for draw in range(100):
        pol = ParametricPolicy(init_scale=0.3, seed=draw)
        x = rng.normal(size=FEATURE_DIM)
        assert abs(np.exp(pol.logprobs(x)).sum() - 1) < 1e-9
        worst = max(worst, directional_error(pol, x, int(rng.integers(len(CATALOG))), rng))
    assert worst < 1e-6


def test_hidden_layer_gradient():
    rng = np.random.default_rng(2)
    pol = ParametricPolicy(hidden=8, init_scale=0.5, seed=3)
    x = rng.normal(size=FEATURE_DIM)
    assert directional_error(pol, x, 5, rng) < 1e-6


def test_zero_temperature_is_argmax():
    pol = ParametricPolicy(init_scale=1.0, seed=4, temperature=0.0)
    x = np.random.default_rng(0).normal(size=FEATURE_DIM)
    picks = {pol.sample(x, np.random.default_rng(s)) for s in range(20)}
    assert picks == {int(np.argmax(pol.logits(x)))}


def test_bias_shift_keeps_argmax():
    from capita.policy import _POS
    pol = ParametricPolicy(init_scale=1.0, seed=5)
    x = featurize(SchedulerState("x"), CTX)
    before = int(np.argmax(pol.logits(x)))
    pol.params[0][:, _POS["bias"]] += 3.7
    assert int(np.argmax(pol.logits(x))) == before


def test_out_of_catalog_action_rejected():
    with pytest.raises(IndexError):
        ParametricPolicy().logprob(np.zeros(FEATURE_DIM), len(CATALOG))


def test_catalog_binding_is_bijective_on_bound_slots():
    s = SchedulerState("x")
    seen = {}
    for i in range(len(CATALOG)):
        key = catalog_canonical(i, CTX)
        if key == ("illegal",):
            continue
        action = bind(i, s, CTX)
        assert canonical(action) == key
        assert catalog_index(action, CTX) == i
        assert key not in seen
        seen[key] = i


def test_snapshot_roundtrip_and_digest_guard():
    pol = ParametricPolicy(init_scale=0.3, seed=9)
    snap = pol.snapshot()
    again = policy_from_snapshot(snap)
    assert np.array_equal(again.params[0], pol.params[0])
    with pytest.raises(ValueError, match="digest"):
        ParametricPolicy.from_snapshot(dict(snap, feature_digest="0000"))


def test_featurize_is_pure():
    s = SchedulerState("x", memory=((Invocation("OG", "mug"), NotFound()),), turn=3)
    copy = dataclasses.replace(s)
    assert np.array_equal(featurize(s, CTX), featurize(copy, CTX))
