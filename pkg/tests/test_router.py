import math

import pytest
from hypothesis import given, strategies as st

from gbtree.router import (
    FamilyPrototypes,
    RoutingError,
    decide,
    maybe_reroot,
    probabilities_from_scores,
    reroot_from_probs,
    route,
)


def test_two_family_softmax_arithmetic():
    probs = probabilities_from_scores({"a": 0.8, "b": 0.6}, 0.05)
    expected = 1 / (1 + math.exp(-4))
    assert probs["a"] == pytest.approx(expected, abs=1e-12)
    d = decide(probs, 0.55)
    assert d.family == "a" and not d.abstained and round(d.p_max, 3) == 0.982


def test_equal_scores_abstain():
    probs = probabilities_from_scores({f: 0.7 for f in "abcd"}, 0.05)
    d = decide(probs, 0.55)
    assert d.abstained and d.family is None and d.p_max == pytest.approx(0.25)


def test_single_family_routes():
    d = route("anything", [FamilyPrototypes("only", ("x", "y"))])
    assert d.family == "only" and d.p_max == 1.0


def test_tie_break_by_family_id():
    probs = probabilities_from_scores({"b": 0.7, "a": 0.7}, 0.05)
    assert decide(probs, 0.4).family == "a"


def test_prototype_count_bounds():
    with pytest.raises(RoutingError):
        FamilyPrototypes("f", ("one",))
    with pytest.raises(RoutingError):
        FamilyPrototypes("f", tuple(str(i) for i in range(9)))


def test_no_families():
    with pytest.raises(RoutingError):
        route("x", [])


def test_routes_by_prototype_text():
    fams = [FamilyPrototypes("web", ("submit the contact form", "fill in the signup form")),
            FamilyPrototypes("swe", ("fix the failing unit test", "patch the parser bug"))]
    assert route("fix the failing unit test", fams).family == "swe"


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=6), st.floats(-3, 3), st.floats(0.01, 1))
def test_shift_invariance(scores, shift, T):
    names = [f"f{i}" for i in range(len(scores))]
    p1 = probabilities_from_scores(dict(zip(names, scores)), T)
    p2 = probabilities_from_scores({n: s + shift for n, s in zip(names, scores)}, T)
    for n in names:
        assert p1[n] == pytest.approx(p2[n], abs=1e-9)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=6), st.floats(0.01, 1), st.floats(0, 1))
def test_abstain_iff_below_threshold(scores, T, delta):
    probs = probabilities_from_scores({f"f{i}": s for i, s in enumerate(scores)}, T)
    d = decide(probs, delta)
    assert d.abstained == (d.p_max < delta) == (d.family is None)


def test_reroot_margin_too_small():
    assert not reroot_from_probs("cur", {"cur": 0.62, "new": 0.70}, 0.10, 0.55).reroot


def test_reroot_when_both_conditions_met():
    d = reroot_from_probs("cur", {"cur": 0.60, "new": 0.80}, 0.10, 0.55)
    assert d.reroot and d.new_family == "new"


def test_reroot_needs_confident_new_family():
    assert not reroot_from_probs("cur", {"cur": 0.10, "new": 0.54, "z": 0.36}, 0.10, 0.55).reroot


def test_reroot_exact_margin_counts():
    assert reroot_from_probs("cur", {"cur": 0.70, "new": 0.80}, 0.10, 0.55).reroot


def test_maybe_reroot_end_to_end():
    fams = [FamilyPrototypes("web", ("submit the contact form", "fill in the signup form")),
            FamilyPrototypes("swe", ("fix the failing unit test", "patch the parser bug"))]
    assert maybe_reroot("web", "fix the failing unit test", fams).new_family == "swe"
    assert not maybe_reroot("swe", "fix the failing unit test", fams).reroot
