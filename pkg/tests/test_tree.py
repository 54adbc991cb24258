import json
import math

import pytest
from hypothesis import given, strategies as st

from gbtree.embedding import cosine
from gbtree.events import RiskClass
from gbtree.gates.dsl import FieldEquals
from gbtree.gates.library import Gate
from gbtree.macros import MacroSpan
from gbtree.tree import GBTree, MacroNode, TreeError, _proportional, loads, signature_clusters

DISC = ((("file_ops", 1),), ("path",), False, ("fs_modify",))
OTHER_DISC = ((("network", 1),), ("url",), True, ())


class TableEmbedder:
    """Fixed description vectors so similarity values are exact."""

    dim = 2

    def __init__(self, table):
        self.table = table

    def embed(self, text):
        return self.table[text]


def unit(c):
    return (c, math.sqrt(1 - c * c))


def span(desc, disc=DISC, cont=(1.0, 0.0), risk=0):
    return MacroSpan("t", 0, 0, desc, (), RiskClass(risk > 0, "none" if not risk else "write_delete", risk),
                     disc, cont)


def tree_with_child(child_desc="base", **table):
    t = GBTree(TableEmbedder({"base": (1.0, 0.0), "fam": (0.0, 1.0), **table}))
    t.insert_path("fam", [span(child_desc)], True)
    fam = t.family_roots["fam"]
    return t, fam, t.node(fam).children[0]


def test_disc_mismatch_new_child():
    t, fam, _ = tree_with_child(cand=unit(0.99))
    assert not t.try_merge(fam, span("cand", disc=OTHER_DISC), 0.92, 0.85).merge


def test_merge_when_all_thresholds_met():
    t, fam, child = tree_with_child(cand=unit(0.90))
    dec = t.try_merge(fam, span("cand", cont=unit(0.95)), 0.92, 0.85)
    assert dec.merge and dec.child_id == child


def test_below_sig_threshold_new_child():
    t, fam, _ = tree_with_child(cand=unit(0.90))
    assert not t.try_merge(fam, span("cand", cont=unit(0.91)), 0.92, 0.85).merge


def test_gated_target_never_merged():
    t, fam, child = tree_with_child(cand=unit(0.90))
    t.attach_gates(child, [Gate("n1", FieldEquals("category", "write_delete"), "m", scope=f"node:{child}")])
    assert not t.try_merge(fam, span("cand", cont=unit(0.95)), 0.92, 0.85).merge


def test_merge_tie_break_prefers_similarity_then_low_id():
    emb = TableEmbedder({"a": unit(0.9), "b": unit(0.95), "c": unit(0.95), "q": (1.0, 0.0), "fam": (0.0, 1.0)})
    t = GBTree(emb)
    fam = t.ensure_family("fam")
    ids = []
    for d in ("a", "b", "c"):
        ids.append(t.add_child(fam, MacroNode(0, None, d, sigma_disc=DISC, sigma_cont=(1.0, 0.0)))["node"])
    dec = t.try_merge(fam, span("q"), 0.92, 0.85)
    assert dec.child_id == ids[1]


def test_insert_novel_path():
    t = GBTree()
    rec = t.insert_path("swe", [span("edit a"), span("run tests"), span("commit")], True, env_signature=(1.0, 0.0))
    assert len(rec["created"]) == 3 and rec["merged"] == []
    leaf = t.node(rec["path"][-1])
    assert leaf.is_success_leaf and leaf.env_signature == (1.0, 0.0)
    assert t.path_to(leaf.node_id)[:2] == [0, t.family_roots["swe"]]


def test_reinsert_identical_path_merges_everything():
    t = GBTree()
    macros = [span("edit a"), span("run tests"), span("commit")]
    first = t.insert_path("swe", macros, True)
    n = len(t.nodes)
    again = t.insert_path("swe", macros, True)
    assert again["created"] == [] and again["path"] == first["path"] and len(t.nodes) == n


def test_edge_to_ancestor_rejected_and_tree_unchanged():
    t = GBTree()
    rec = t.insert_path("swe", [span("a"), span("b")], True)
    before = t.dumps()
    with pytest.raises(TreeError, match="acyclicity"):
        t.add_edge(rec["path"][1], t.node(rec["path"][0]))
    assert t.dumps() == before


def test_env_signature_mean_renormalized():
    t = GBTree()
    t.insert_path("f", [span("a")], True, env_signature=(1.0, 0.0))
    t.insert_path("f", [span("a")], True, env_signature=(0.0, 1.0))
    leaf = t.node(t.success_leaves()[0])
    assert leaf.env_signature == pytest.approx((1 / math.sqrt(2), 1 / math.sqrt(2)))


def _busy_node(vectors):
    t = GBTree(TableEmbedder({"x": (1.0, 0.0), "f": (0.0, 1.0)}))
    for v in vectors:
        t.insert_path("f", [span("x", cont=v)], True, theta_sig=-1.0)
    return t, t.node(t.family_roots["f"]).children[0]


def test_split_single_cluster_noop():
    t, node = _busy_node([(1.0, 0.0)] * 30)
    assert t.audit_split(node) is None


def test_split_two_clusters():
    t, node = _busy_node([(1.0, 0.0)] * 15 + [unit(0.5)] * 15)
    fam = t.family_roots["f"]
    t.node(fam).selection_stats[node] = {"k": [10, 20]}
    rec = t.audit_split(node)
    assert rec["clusters"] == [15, 15] and len(rec["siblings"]) == 1
    sib = rec["siblings"][0]
    assert t.node(sib).parent_id == fam
    s = t.node(fam).selection_stats
    assert [a + b for a, b in zip(s[node]["k"], s[sib]["k"])] == [10, 20]
    t.verify()


def test_split_gated_ineligible():
    t, node = _busy_node([(1.0, 0.0)] * 15 + [unit(0.5)] * 15)
    t.attach_gates(node, [Gate("n", FieldEquals("category", "x"), "m", scope=f"node:{node}")])
    assert t.audit_split(node) is None


def test_split_below_traffic_threshold():
    t, node = _busy_node([(1.0, 0.0)] * 5 + [unit(0.5)] * 5)
    assert t.audit_split(node) is None


def _components(vectors, theta):
    # BFS over the threshold graph
    n, seen, out = len(vectors), set(), []
    for s in range(n):
        if s in seen:
            continue
        comp, frontier = {s}, [s]
        while frontier:
            i = frontier.pop()
            for j in range(n):
                if j not in comp and cosine(vectors[i], vectors[j]) >= theta:
                    comp.add(j)
                    frontier.append(j)
        seen |= comp
        out.append(sorted(comp))
    return out


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.floats(0.0, 0.99))
def test_signature_clusters_match_bfs(cs, theta):
    vecs = [unit(c) for c in cs]
    assert signature_clusters(vecs, theta) == _components(vecs, theta)


@given(st.lists(st.integers(0, 50), min_size=2, max_size=2).map(sorted),
       st.lists(st.integers(1, 30), min_size=1, max_size=5))
def test_proportional_split_preserves_totals(counter, weights):
    parts = _proportional(counter, weights)
    assert [sum(p[i] for p in parts) for i in range(2)] == counter


def test_save_load_roundtrip(tmp_path):
    t = GBTree()
    t.insert_path("swe", [span("edit a"), span("run tests")], True, env_signature=(0.6, 0.8), task_desc="fix a")
    node = t.node(t.family_roots["swe"]).children[0]
    t.attach_gates(node, [Gate("n", FieldEquals("category", "x"), "m", scope=f"node:{node}")])
    p = tmp_path / "t.json"
    t.save(p)
    back = loads(p.read_text())
    assert back.dumps() == t.dumps()


def test_corrupted_parent_pointer():
    t = GBTree()
    t.insert_path("swe", [span("a"), span("b")], True)
    data = json.loads(t.dumps())
    data["nodes"][-1]["parent_id"] = 0
    with pytest.raises(TreeError, match="acyclicity/connectivity"):
        loads(json.dumps(data))


def test_empty_tree_valid():
    back = loads(GBTree().dumps())
    assert list(back.nodes) == [0]


def test_version_bumps_every_edit():
    t = GBTree()
    v = [t.version]
    t.insert_path("f", [span("a")], True)
    v.append(t.version)
    t.add_child(t.family_roots["f"], MacroNode(0, None, "b"))
    v.append(t.version)
    assert v == sorted(set(v)) and len(t.audit_log) == t.version
