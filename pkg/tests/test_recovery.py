import math
import random

import pytest
from hypothesis import given, strategies as st

from gbtree.gates.dsl import parse_precondition
from gbtree.recovery import edge_cost, env_record, env_signature, plan_recovery, precondition_holds, retrieve_leaves
from gbtree.tree import GBTree, MacroNode
from helpers import random_tree
from oracles import exhaustive_recovery


def build(edges, risks, pre=None):
    """edges: list of (parent_label, child_label) in insertion order under family 'f'."""
    t = GBTree()
    ids = {"f": t.ensure_family("f")}
    for parent, child in edges:
        node = MacroNode(0, None, child, risk_level=risks.get(child, 0),
                         precondition=(pre or {}).get(child))
        ids[child] = t.add_child(ids[parent], node)["node"]
    return t, ids


def test_prefers_cheaper_longer_path():
    t, ids = build([("f", "X"), ("X", "B"), ("X", "M"), ("M", "A")], {"B": 3})
    plan = plan_recovery(t, ids["X"], [ids["A"], ids["B"]], {})
    assert plan.path == (ids["X"], ids["M"], ids["A"]) and plan.total_cost == 2.0
    assert edge_cost(3) == 2.5


def test_depth_limit():
    edges = [("f", "n0")] + [(f"n{i}", f"n{i + 1}") for i in range(9)]
    t, ids = build(edges, {})
    assert plan_recovery(t, ids["n0"], [ids["n9"]], {}, D_max=8) is None
    assert plan_recovery(t, ids["n1"], [ids["n9"]], {}, D_max=8).length == 8


def test_adjacent_leaf():
    t, ids = build([("f", "X"), ("X", "L")], {})
    plan = plan_recovery(t, ids["X"], [ids["L"]], {})
    assert plan.total_cost == 1.0 and plan.path == (ids["X"], ids["L"])


def test_moves_up_through_parent():
    t, ids = build([("f", "a"), ("a", "b"), ("a", "c")], {})
    plan = plan_recovery(t, ids["b"], [ids["c"]], {})
    assert plan.path == (ids["b"], ids["a"], ids["c"]) and plan.total_cost == 2.0


def test_precondition_blocks_path():
    pre = {"M": parse_precondition('(path-matches env.files "/work/needed")')}
    t, ids = build([("f", "X"), ("X", "M"), ("M", "A")], {}, pre)
    assert plan_recovery(t, ids["X"], [ids["A"]], env_record({"env.files": []})) is None
    env = env_record({"env.files": ["/work/needed"]})
    assert plan_recovery(t, ids["X"], [ids["A"]], env).leaf == ids["A"]


def test_precondition_missing_field_is_conservative():
    assert not precondition_holds(parse_precondition('(field= env.flags.browser "true")'), {})


def test_equal_costs_lexicographic():
    t, ids = build([("f", "X"), ("X", "A"), ("X", "B")], {})
    plan = plan_recovery(t, ids["X"], [ids["B"], ids["A"]], {})
    assert plan.leaf == min(ids["A"], ids["B"])




@given(st.integers(0, 10 ** 9), st.floats(0, 2), st.integers(1, 8))
def test_matches_exhaustive(seed, lam, d_max):
    rng = random.Random(seed)
    t, nodes = random_tree(rng)
    env = env_record({"env.files": [f"/work/f{i}" for i in range(4) if rng.random() < 0.5]})
    start = rng.choice(nodes)
    targets = rng.sample(nodes, rng.randint(1, min(4, len(nodes))))
    plan = plan_recovery(t, start, targets, env, lam, d_max)
    ref = exhaustive_recovery(t, start, targets, env, lam, d_max)
    if ref is None:
        assert plan is None
    else:
        assert plan is not None and plan.total_cost == pytest.approx(ref[0], abs=1e-12) and plan.path == ref[1]


def test_env_signature_identical_inputs():
    s = {"env.domain": "a.com", "env.files": ["/work/a", "/work/b"], "env.tools": ["file_ops"]}
    assert env_signature(s) == env_signature(dict(s))


def test_env_signature_empty_env_flags_only():
    v = env_signature({"env.tools": ["file_ops", "process"]})
    assert any(v) and all(x == 0.0 for x in v[:40])
    assert math.isclose(sum(x * x for x in v), 1.0)


def _leaves_with_env(cosines):
    t = GBTree()
    fam = t.ensure_family("f")
    ids = []
    for i, c in enumerate(cosines):
        node = MacroNode(0, None, f"leaf {i}", is_success_leaf=True, task_descs=["the task"],
                         env_sum=(c, math.sqrt(1 - c * c)), env_count=1)
        ids.append(t.add_child(fam, node)["node"])
    return t, ids


def test_env_filter_threshold():
    t, ids = _leaves_with_env([0.79, 0.85])
    got = retrieve_leaves("the task", t, None, 0.80, (1.0, 0.0))
    assert [c.leaf_id for c in got] == [ids[1]]


def test_no_leaf_passes_filter():
    t, _ = _leaves_with_env([0.5])
    assert retrieve_leaves("the task", t, None, 0.80, (1.0, 0.0)) == []


def test_retrieval_ties_lower_id_first():
    t, ids = _leaves_with_env([0.9, 0.9])
    assert [c.leaf_id for c in retrieve_leaves("the task", t, None, 0.8, (1.0, 0.0))] == ids


def test_leaves_without_signature_skipped():
    t, ids = _leaves_with_env([0.9])
    t.node(ids[0]).env_sum = None
    assert retrieve_leaves("the task", t, None, 0.0, (1.0, 0.0)) == []


def test_risk_monotonic_in_lambda():
    # equal hop count, different total risk: a higher lambda never picks the riskier one
    t, ids = build([("f", "X"), ("X", "a"), ("a", "A"), ("X", "b"), ("b", "B")], {"a": 3, "A": 0, "b": 1, "B": 1})
    for lam in (0.0, 0.5, 1.0, 2.0):
        plan = plan_recovery(t, ids["X"], [ids["A"], ids["B"]], {}, lam)
        risk = sum(t.node(n).risk_level for n in plan.path[1:])
        assert lam == 0.0 or risk == 2
