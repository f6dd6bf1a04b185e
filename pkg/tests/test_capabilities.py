import dataclasses

import numpy as np
import pytest

from capita import capabilities as caps
from capita import env
from capita.capabilities import (Backend, Direction, EGMemory, ESSummary, ExplorationExhausted, Knowledge, ad_explore,
                                 ad_manip, eg, es, og, sd)
from capita.env import Close, Cool, GoTo, Open, Pick, Put


def put(scene, oid, where, **state):
    return scene.replace(dataclasses.replace(scene[oid], location=where, **state))


def seen(scene, location, holding=None):
    return env.observe(scene, env.AgentState(location))


def test_eg_oracle_points_at_container(scene):
    s = put(scene, "Mug 1", "Cabinet 2")
    s = put(s, "Mug 2", "Cabinet 2")
    d = eg("mug", list(s.receptacles), EGMemory(), scene=s)
    assert d == Direction("in", "Cabinet 2")


def test_eg_repeat_excludes_tried(scene):
    s = put(put(scene, "Mug 1", "Cabinet 2"), "Mug 2", "Cabinet 2")
    mem = EGMemory()
    first = eg("mug", list(s.receptacles), mem, scene=s)
    second = eg("mug", list(s.receptacles), mem, scene=s)
    assert second.object != first.object


def test_eg_exhausts_after_one_sweep(scene):
    cands = list(scene.receptacles)[:3]
    mem = EGMemory()
    for _ in cands:
        eg("apple", cands, mem, scene=scene)
    with pytest.raises(ExplorationExhausted):
        eg("apple", cands, mem, scene=scene)


def test_eg_unbounded_sweeps_restart(scene):
    cands = list(scene.receptacles)[:3]
    mem = EGMemory(max_sweeps=None)
    picks = [eg("apple", cands, mem, scene=scene).object for _ in range(7)]
    assert sorted(picks[:3]) == sorted(cands) and sorted(picks[3:6]) == sorted(cands)


def test_eg_random_direction_is_uniform(scene):
    cands = list(scene.receptacles)
    rng = np.random.default_rng(0)
    backend = Backend(p_eg=1.0)
    counts = dict.fromkeys(cands, 0)
    n = 10_000
    for _ in range(n):
        counts[eg("mug", cands, EGMemory(), backend, scene, rng).object] += 1
    expected = n / len(cands)
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 31.26  # 0.999 quantile, 11 degrees of freedom


def test_og_found_and_not_found(scene):
    s = put(scene, "Mug 1", "CounterTop 1")
    obs = seen(s, "CounterTop 1")
    assert og("mug", obs).label == "Mug"
    assert not og("knife", obs).found


def test_og_description(scene):
    s = put(scene, "Bowl 1", "CounterTop 1")
    assert og("something for serving soup", seen(s, "CounterTop 1")).label == "Bowl"


def test_og_flip_is_marked_injected(scene):
    s = put(scene, "Mug 1", "CounterTop 1")
    g = og("mug", seen(s, "CounterTop 1"), Backend(p_og=1.0), np.random.default_rng(0))
    assert not g.found and g.injected


def test_og_box_is_deterministic(scene):
    s = put(scene, "Mug 1", "CounterTop 1")
    obs = seen(s, "CounterTop 1")
    assert og("mug", obs, scene_seed=4).box == og("mug", obs, scene_seed=4).box


def test_sd_open_laptop_on_desk():
    scene = env.build_scene(4)
    s = put(scene, "Laptop 1", "Desk 1", open=True)
    facts = sd("Laptop", seen(s, "Desk 1"))
    assert set(facts) == {("on", "Laptop 1", "Desk 1"), ("open", "Laptop 1", True)}


def test_sd_nothing_when_hidden(scene):
    s = put(scene, "Apple 1", "Fridge 1")
    assert sd("Apple", seen(s, "Desk 1")) == ()


def test_sd_cold_apple_in_open_fridge(scene):
    s = put(scene, "Apple 1", "Fridge 1", temperature="cold")
    s = s.replace(dataclasses.replace(s["Fridge 1"], open=True))
    facts = set(sd("Apple", seen(s, "Fridge 1")))
    assert {("in", "Apple 1", "Fridge 1"), ("temperature", "Apple 1", "cold")} <= facts


def test_ad_explore_opens_closed_containers(scene):
    k = Knowledge()
    known = set(scene.receptacles)
    assert ad_explore(Direction("in", "Cabinet 2"), known, k) == [GoTo("Cabinet 2"), Open("Cabinet 2")]
    assert ad_explore(Direction("on", "CounterTop 1"), known, k) == [GoTo("CounterTop 1")]
    assert ad_explore(Direction("target", "DeskLamp 1"), known | {"DeskLamp 1"}, k) == [GoTo("DeskLamp 1")]


def test_ad_explore_unknown_id_is_invalid():
    out = ad_explore(Direction("in", "Cabinet 9"), set(), Knowledge())
    assert isinstance(out[0], env.Invalid)


def test_ad_cool_atomic_and_composite():
    k = Knowledge(location="Fridge 1", holding="Apple 1")
    facts = (("holding", "Apple 1", ""),)
    assert ad_manip("cool apple with fridge", facts, k, "atomic") == [Cool("Apple 1", "Fridge 1")]
    seq = ad_manip("cool apple with fridge", facts, k, "composite")
    assert seq == [Open("Fridge 1"), Put("Apple 1", "Fridge 1"), Close("Fridge 1"), Open("Fridge 1"),
                   Pick("Apple 1", "Fridge 1"), Close("Fridge 1")]


def test_ad_grasp_from_closed_fridge_while_holding():
    k = Knowledge(location="CounterTop 1", holding="Mug 1")
    facts = (("in", "Apple 1", "Fridge 1"), ("open", "Fridge 1", False))
    seq = ad_manip("grasp apple", facts, k, "atomic")
    assert seq == [GoTo("Fridge 1"), Open("Fridge 1"), Put("Mug 1", "Fridge 1"), Pick("Apple 1", "Fridge 1")]


def test_ad_unparseable_command_is_invalid():
    assert isinstance(ad_manip("juggle apple", (), Knowledge(), "atomic")[0], env.Invalid)


def test_ad_absent_class_stays_optimistic():
    seq = ad_manip("grasp apple", (), Knowledge(location="Desk 1"), "atomic")
    assert seq[-1] == Pick("Apple 1", "Desk 1")


def test_es_summaries():
    ok = es("grasp soapbar", [(Pick("SoapBar 1", "Shelf 1"), env.OK)])
    assert ok.success and "successfully grasp soapbar" in ok.text
    bad = es("grasp apple", [(Pick("Apple 1", "Fridge 1"), env.ActionFeedback(False, "inventory-full"))])
    assert (bad.success, bad.reason) == (False, "inventory-full")
    assert es("grasp apple", []).success
    flipped = es("grasp apple", [(Pick("Apple 1", "Fridge 1"), env.OK)], Backend(p_es=1.0), np.random.default_rng(0))
    assert not flipped.success and flipped.injected and flipped.reason in caps.FAILURE_REASONS


def test_backend_validates_probabilities():
    with pytest.raises(ValueError):
        Backend(p_og=1.5)


def test_backend_roundtrip():
    b = Backend(p_eg=0.1, p_og=0.2, p_es=0.3)
    assert Backend.from_dict(b.to_dict()) == b


def test_feedback_roundtrip():
    for fb in (caps.Found("Mug", (1, 2, 3, 4)), caps.NotFound(), ESSummary(False, "inventory-full", "x")):
        assert caps.feedback_from_dict(fb.to_dict()) == fb


def test_learned_og_resolves_fitted_phrases():
    model = caps.LearnedOG().fit([("coffee cup thing", "Mug"), ("mug", "Mug")])
    assert "Mug" in model.resolve("coffee cup thing")
