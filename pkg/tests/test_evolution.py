import copy

import pytest
from hypothesis import given, strategies as st

import gbtree.evolution as evo
from gbtree import Config
from gbtree.evolution import (
    EvolutionError,
    RegressionInputs,
    RepairProposal,
    append_episode_stats,
    apply_repair,
    diagnose,
    retrieve_analogs,
)
from gbtree.gates.dsl import parse_gate
from gbtree.gates.library import Gate
from gbtree.pipeline import distill, evolve, run
from gbtree.router import prototypes_from_mapping
from gbtree.selection import selection_score, success_rate
from gbtree.tree import GBTree, MacroNode
from lab import lab_world


def test_score_arithmetic():
    assert abs(selection_score(0.8, 0.4, 1.0, 0.5) - 1.0) <= 1e-12
    assert abs(selection_score(0.0, 1.0, 1.0, 0.5) - 0.5) <= 1e-12


def test_unseen_cluster_prior():
    rate = success_rate({}, 3, "cluster")
    assert rate == 0.5
    assert abs(selection_score(0.6, rate) - (0.6 + 0.25)) <= 1e-12


def test_smoothed_rate():
    assert success_rate({3: {"c": [3, 4]}}, 3, "c") == 4 / 6
    assert success_rate({3: {"c": [3, 4]}}, 3, "other") == 0.5


# -- diagnosis


def _episode(progress, fragile_at=None, covered=True, success=False):
    steps = []
    for i, p in enumerate(progress):
        regime = "fragile" if i == fragile_at else "advance"
        steps.append({"regime": regime, "progress": p, "node_before": i, "node_after": i + 1, "child_id": i + 1})
    spine = list(range(len(progress) + 1))
    return {"episode_id": "e", "covered": covered, "success": success,
            "record": {"steps": steps, "traversal": {"spine": spine}}}


def test_progress_stops_after_node_two():
    assert diagnose(_episode([True, True, False, False, False])) == 2


def test_progress_throughout_gives_last_node():
    assert diagnose(_episode([True] * 5)) == 5


def test_fragile_transition_parent():
    assert diagnose(_episode([True, True, True], fragile_at=1)) == 1


def test_uncovered_out_of_scope():
    with pytest.raises(EvolutionError, match="out of scope"):
        diagnose(_episode([True], covered=False))


def test_empty_spine_no_repair():
    assert diagnose({"covered": True, "success": False, "record": {"steps": [], "traversal": {"spine": []}}}) is None


# -- analogs


def _leaf_tree():
    t = GBTree()
    fam = t.ensure_family("f")
    ids = []
    for desc in ("fix the parser bug in the lexer", "fix the parser bug", "bake a cake"):
        ids.append(t.add_child(fam, MacroNode(0, None, desc, is_success_leaf=True, task_descs=[desc]))["node"])
    return t, ids


def test_analogs_ranked_by_cosine():
    t, ids = _leaf_tree()
    got = retrieve_analogs("fix the parser bug", t, R=50)
    assert [lid for lid, _ in got][0] == ids[1]
    assert sorted(lid for lid, _ in got) == sorted(ids)
    cos = [c for _, c in got]
    assert cos == sorted(cos, reverse=True)


def test_analogs_top_r():
    t, ids = _leaf_tree()
    assert len(retrieve_analogs("fix the parser bug", t, R=2)) == 2


# -- apply_repair


def _gate(gid="g-node"):
    return Gate(gid, parse_gate('(path-matches resource "/etc/**")'), "blocked", scope="node:1")


def _gated_tree():
    t = GBTree()
    fam = t.ensure_family("f")
    v = t.add_child(fam, MacroNode(0, None, "edit config"))["node"]
    t.attach_gates(v, [_gate()])
    a = t.add_child(v, MacroNode(0, None, "run tests"))["node"]
    b = t.add_child(v, MacroNode(0, None, "run linters"))["node"]
    return t, v, a, b


def _fake_suite(monkeypatch, old, before, after, n=100):
    def fake(tree, record, target, config, gates, env=None):
        k = record["k"]
        return k < (before if tree is old else after)
    monkeypatch.setattr(evo, "replay_success", fake)
    return [{"id": f"s{k}", "k": k, "path": [1, 2, 3]} for k in range(n)]


def test_success_drop_over_budget_rejected(monkeypatch):
    t, v, a, b = _gated_tree()
    succ = _fake_suite(monkeypatch, t, 90, 87)
    for r in succ:
        r["path"] = [v, a]
    prop = RepairProposal(v, "reuse_child", b)
    out = apply_repair(t, prop, RegressionInputs(succ, [], {}, []), Config())
    assert not out.accepted and "success regression" in out.reason
    assert out.suites["success"]["drop"] == pytest.approx(0.03)


def test_small_drop_accepted(monkeypatch):
    t, v, a, b = _gated_tree()
    succ = _fake_suite(monkeypatch, t, 90, 89)
    for r in succ:
        r["path"] = [v, a]
    before = t.dumps()
    out = apply_repair(t, RepairProposal(v, "reuse_child", b, cluster="c"), RegressionInputs(succ, [], {}, []),
                       Config())
    assert out.accepted and out.version == t.version + 1
    assert t.dumps() == before  # input untouched
    assert out.tree.node(v).selection_stats[b]["c"] == [1, 1]


def test_gate_removal_rejected_before_replay(monkeypatch):
    t, v, a, b = _gated_tree()
    calls = []
    monkeypatch.setattr(evo, "replay_success", lambda *a, **k: calls.append(1) or True)
    inputs = RegressionInputs([{"id": "s", "path": [v, a]}], [], {}, [])
    bare = MacroNode(0, None, "edit config without gate")
    out = apply_repair(t, RepairProposal(v, "add_child", payload=(bare,)), inputs, Config())
    assert not out.accepted and "gate relaxation" in out.reason
    out = apply_repair(t, RepairProposal(v, "remove_gate"), inputs, Config())
    assert not out.accepted and "gate relaxation" in out.reason
    assert calls == []


def test_weakened_inherited_gate_rejected():
    t, v, _, _ = _gated_tree()
    weak = Gate("g-node", parse_gate('(path-matches resource "/etc/shadow")'), "blocked", scope="node:1")
    node = MacroNode(0, None, "edit config", local_gates=[weak])
    out = apply_repair(t, RepairProposal(v, "add_child", payload=(node,)), RegressionInputs([], [], {}, []), Config())
    assert not out.accepted and "alters gate g-node" in out.reason


@given(st.lists(st.tuples(st.integers(0, 2), st.booleans(), st.sampled_from(["c1", "c2"])), max_size=30))
def test_stats_only_grow(appends):
    t, v, a, b = _gated_tree()
    kids = [a, b, a]
    prev = {}
    for child_i, ok, cluster in appends:
        ep = {"covered": True, "success": ok, "record": {"selections": [[v, kids[child_i], cluster]]}}
        append_episode_stats(t, [ep])
        now = {(c, k): tuple(n) for c, s in t.node(v).selection_stats.items() for k, n in s.items()}
        for key, (s_old, n_old) in prev.items():
            s_new, n_new = now[key]
            assert s_new >= s_old and n_new >= n_old and n_new - n_old >= s_new - s_old
        prev = now
    total = sum(n for s in t.node(v).selection_stats.values() for _, n in s.values())
    assert total == len(appends)


def test_uncovered_episode_adds_no_stats():
    t, v, a, _ = _gated_tree()
    assert append_episode_stats(t, [{"covered": False, "record": {"selections": [[v, a, "c"]]}}]) == 0


# -- end to end on the lab families


@pytest.fixture(scope="module")
def lab():
    logs, failing, protos, _ = lab_world(n_clusters=2, failures_per_cluster=2)
    cfg = Config()
    art = distill(logs, cfg, prototypes=prototypes_from_mapping(protos))
    scen = [s for v in failing.values() for s in v]
    eps = run(art, scen, cfg, "gbt-basic").to_dict()["episodes"]
    return cfg, art, scen, [e for e in eps if e["covered"] and not e["success"]]


def test_repair_is_local(lab):
    cfg, art, _, fails = lab
    new, entries = evolve(art, fails[:1], cfg)
    out = entries[0]["outcome"]
    assert out["accepted"]
    v = entries[0]["proposal"]["target_node"]
    base = art.tree.clone()
    append_episode_stats(base, fails[:1])  # counters appended for the episode, outside the repair itself
    old_nodes = {n["node_id"]: n for n in base.to_json()["nodes"]}
    new_nodes = {n["node_id"]: n for n in new.tree.to_json()["nodes"]}
    assert set(new_nodes) - set(old_nodes) == set(out["new_nodes"])
    for nid, n in old_nodes.items():
        m = new_nodes[nid]
        if nid == v:
            assert set(m["children"]) - set(n["children"]) == set(out["new_nodes"][:1])
            n, m = dict(n), dict(m)
            n.pop("selection_stats"), m.pop("selection_stats"), n.pop("children"), m.pop("children")
        assert m == n


def test_zero_failures_bumps_version_only(lab):
    cfg, art, _, _ = lab
    new, entries = evolve(art, [], cfg)
    assert entries == [] and new.tree.version == art.tree.version + 1
    assert [n for n in new.tree.to_json()["nodes"]] == [n for n in art.tree.to_json()["nodes"]]


def test_gate_weakening_proposal_keeps_safety_hash(lab):
    cfg, art, _, fails = lab
    gated = next(n for n in art.tree.nodes.values() if n.local_gates and n.children)
    weak = copy.deepcopy(gated)
    weak.children, weak.local_gates = [], []
    prop = RepairProposal(gated.node_id, "add_child", payload=(weak,), episode_id="weaken")
    new, entries = evolve(art, [], cfg, proposals=[prop])
    assert not entries[0]["outcome"]["accepted"]
    assert new.history[-1]["safety_hash"] == art.history[-1]["safety_hash"]


def test_repair_improves_cluster(lab):
    cfg, art, scen, fails = lab
    assert fails
    new, entries = evolve(art, fails, cfg)
    assert all(e["outcome"]["accepted"] for e in entries)
    before = run(art, scen, cfg, "gbt-basic").aggregates["SR"]
    after = run(new, scen, cfg, "gbt-basic").aggregates["SR"]
    assert after > before
    assert set(art.rejected_ids()) <= set(new.rejected_ids())
