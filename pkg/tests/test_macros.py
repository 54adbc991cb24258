import math

from hypothesis import given, strategies as st

from gbtree.embedding import l2_normalize
from gbtree.macros import (
    SummarizerError,
    TemplateSummarizer,
    describe,
    extract_macros,
    jaccard,
    segment,
    signature,
    span_events,
    stability_test,
)
from helpers import act, traj


def test_family_switch_opens_boundary():
    t = traj([act(0, "file_edit", path="/work/a"), act(0, "file_edit", path="/work/b"),
              act(0, "browse_nav", url="https://a.com/")])
    assert segment(t) == [(0, 1), (2, 2)]


def test_same_family_no_deltas_one_span():
    t = traj([act(0, "file_read", path=f"/work/{i}") for i in range(5)])
    assert segment(t) == [(0, 4)]


def test_test_invocation_isolated_within_one_family():
    t = traj([act(0, "proc_spawn", cmd="make"),
              act(0, "proc_spawn", [("test_invocation", "pytest", 0)], cmd="pytest"),
              act(0, "proc_spawn", cmd="make")])
    assert segment(t) == [(0, 0), (1, 1), (2, 2)]


def test_edit_test_edit_three_spans():
    t = traj([act(0, "file_edit", path="/work/a"),
              act(0, "proc_spawn", [("test_invocation", "pytest", 0)], cmd="pytest"),
              act(0, "file_edit", path="/work/a")])
    assert len(segment(t)) == 3


def test_domain_change_opens_boundary():
    t = traj([act(0, "browse_nav", url="https://a.com/"),
              act(0, "browse_nav", [("domain_change", "https://b.com:443/", 0)], url="https://b.com/")])
    assert segment(t) == [(0, 0), (1, 1)]


def test_fs_magnitude_threshold():
    t = traj([act(0, "file_write", [("fs_modify", f"/work/{i}", 80)], path=f"/work/{i}") for i in range(4)])
    assert segment(t, fs_threshold=200) == [(0, 1), (2, 3)]


def test_proc_start_after_non_process_span():
    t = traj([act(0, "code_exec", code="x=1"), act(0, "code_exec", [("proc_start", "python", 0)], code="run()")])
    assert segment(t) == [(0, 0), (1, 1)]


ptypes = st.sampled_from(["file_read", "file_write", "proc_spawn", "browse_nav", "net_send"])


def _random_traj(kinds, mags):
    acts = []
    for k, m in zip(kinds, mags):
        if k == "proc_spawn":
            acts.append(act(0, k, [("test_invocation", "pytest", 0)] if m % 3 == 0 else [], cmd="pytest"))
        elif k in ("browse_nav", "net_send"):
            acts.append(act(0, k, url="https://a.com/"))
        else:
            acts.append(act(0, k, [("fs_modify", "/work/x", m)] if k == "file_write" else [], path="/work/x"))
    return traj(acts)


@given(st.lists(ptypes, min_size=1, max_size=25), st.lists(st.integers(0, 150), min_size=25, max_size=25))
def test_spans_partition_actions(kinds, mags):
    t = _random_traj(kinds, mags)
    spans = segment(t)
    covered = [i for s, e in spans for i in range(s, e + 1)]
    assert covered == [a.index for a in t.actions()]
    assert segment(t) == spans


def test_identical_spans_identical_signatures():
    a = traj([act(0, "file_write", path="/work/a"), act(0, "file_read", path="/work/b")], tid="a")
    b = traj([act(0, "file_write", path="/work/a"), act(0, "file_read", path="/work/b")], tid="b")
    assert signature((0, 1), a) == signature((0, 1), b)


def test_delete_sets_hard_touch():
    t = traj([act(0, "file_read", path="/work/a"), act(0, "file_delete", path="/work/a")])
    assert signature((0, 1), t)[0][2] is True
    assert signature((0, 0), t)[0][2] is False


def test_normalization_arithmetic():
    v = l2_normalize([2.0, 0.0, 1.0])
    r5 = math.sqrt(5)
    assert v == (2 / r5, 0.0, 1 / r5)
    assert l2_normalize([0.0, 0.0]) == (0.0, 0.0)


@given(st.lists(ptypes, min_size=1, max_size=10), st.lists(st.integers(0, 150), min_size=10, max_size=10))
def test_sigma_cont_unit_norm(kinds, mags):
    t = _random_traj(kinds, mags)
    for s in segment(t):
        v = signature(s, t)[1]
        assert abs(math.sqrt(sum(x * x for x in v)) - 1.0) < 1e-12


def test_signatures_ignore_descriptions():
    class Other:
        def summarize(self, events, deltas):
            return {"macro_desc": "something else entirely"}

    t = traj([act(0, "file_write", path="/work/a"), act(0, "browse_nav", url="https://a.com/")])
    a, b = extract_macros(t), extract_macros(t, Other())
    assert [m.description for m in a] != [m.description for m in b]
    assert [(m.sigma_disc, m.sigma_cont) for m in a] == [(m.sigma_disc, m.sigma_cont) for m in b]


def test_template_description_with_tests():
    t = traj([act(0, "file_write", path="/work/a.py"),
              act(0, "proc_spawn", [("test_invocation", "pytest", 0)], cmd="pytest")])
    desc, tags, _, degraded = describe(span_events(t, (0, 1)), [], TemplateSummarizer(), True)
    assert desc == "modify a.py; run tests" and "test" in tags and not degraded


def test_empty_tags_allowed():
    class Opaque:
        def summarize(self, events, deltas):
            return {"macro_desc": "opaque step", "macro_tags": []}

    t = traj([act(0, "code_exec", code="x")])
    assert describe(span_events(t, (0, 0)), [], Opaque(), False)[1] == ()


def test_summarizer_failure_twice_gives_placeholder():
    calls = []

    class Broken:
        def summarize(self, events, deltas):
            calls.append(1)
            raise SummarizerError("down")

    t = traj([act(0, "file_write", path="/work/a")])
    desc, _, _, degraded = describe(span_events(t, (0, 0)), [], Broken(), True)
    assert desc.startswith("macro@") and degraded and len(calls) == 2


def test_summarizer_retry_once_recovers():
    calls = []

    class Flaky:
        def summarize(self, events, deltas):
            calls.append(1)
            if len(calls) == 1:
                raise SummarizerError("blip")
            return {"macro_desc": "ok"}

    t = traj([act(0, "file_write", path="/work/a")])
    assert describe(span_events(t, (0, 0)), [], Flaky(), True)[:1] == ("ok",)


def test_deterministic_stability():
    t = traj([act(0, "file_write", path="/work/a"), act(0, "browse_nav", url="https://a.com/"),
              act(0, "file_write", path="/work/b")])
    r = stability_test(t, P=5, delta_stab=0.9)
    assert r.stable and r.pairwise_jaccard_min == 1.0 and len(r.boundary_sets) == 6


def test_jaccard_arithmetic():
    assert jaccard(frozenset({1, 4, 7}), frozenset({1, 4})) == 2 / 3


def test_perturbed_segmenter_unstable():
    t = traj([act(0, "file_write", path="/work/a")])
    seg = lambda _t, p: [(1, 1), (4, 4), (7, 7)] if p % 2 == 0 else [(1, 1), (4, 4)]
    r = stability_test(t, P=5, delta_stab=0.9, segmenter=seg)
    assert not r.stable and r.pairwise_jaccard_min == 2 / 3


def test_single_span_stable():
    assert stability_test(traj([act(0, "file_read", path="/work/a")])).stable
