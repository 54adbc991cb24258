import pytest
from hypothesis import given, strategies as st

from gbtree.events import (
    CanonicalizationError,
    ClassificationError,
    Event,
    Trajectory,
    TrajectoryError,
    build_ctx,
    canonicalize_resource,
    classify_hard,
    make_ctx,
)
from helpers import act, traj


def test_classify_delete_is_hard():
    r = classify_hard("file_delete", {"path": "/work/a.txt"})
    assert (r.is_hard, r.category, r.risk_level) == (True, "write_delete", 2)


def test_classify_plain_read_is_not_hard():
    r = classify_hard("file_read", {"path": "/work/readme"})
    assert (r.is_hard, r.category, r.risk_level) == (False, "none", 0)


def test_classify_sensitive_read():
    r = classify_hard("file_read", {"path": "/secrets/key.pem"}, ["/secrets/*"])
    assert (r.is_hard, r.category, r.risk_level) == (True, "sensitive_read", 2)


@pytest.mark.parametrize("ptype,level", [("proc_spawn", 3), ("net_send", 3), ("code_exec", 3), ("file_write", 2)])
def test_risk_levels_by_category(ptype, level):
    assert classify_hard(ptype, {}).risk_level == level


def test_classify_unknown_primitive():
    with pytest.raises(ClassificationError):
        classify_hard("teleport", {})


def test_canonicalize_dotdot_escapes_root():
    assert canonicalize_resource("/work/../etc/passwd", "path", ["/work"]) == ("/etc/passwd", True)


def test_canonicalize_dot_segment():
    assert canonicalize_resource("/work/src/./m.py", "path", ["/work"]) == ("/work/src/m.py", False)


def test_canonicalize_url_components():
    ctx = make_ctx(act(0, "net_send", url="https://A.example.com:443/x"), ["/work"], "/work")
    assert ctx.net_dest == ("a.example.com", 443, "https")
    assert canonicalize_resource("https://A.example.com:443/x", "url")[0] == "https://a.example.com:443/x"


def test_canonicalize_malformed_url():
    with pytest.raises(CanonicalizationError):
        canonicalize_resource("not a url", "url")


def test_root_prefix_is_segment_aware():
    assert canonicalize_resource("/workspace/a", "path", ["/work"])[1] is True


segment = st.sampled_from(["a", "b", "..", ".", "", "work", "etc"])


@given(st.lists(segment, max_size=8), st.booleans())
def test_path_canonicalization_idempotent(segs, absolute):
    raw = ("/" if absolute else "") + "/".join(segs) or "."
    once, _ = canonicalize_resource(raw, "path", ["/work"])
    assert canonicalize_resource(once, "path", ["/work"])[0] == once
    assert ".." not in once.split("/") and "." not in once.split("/")


@given(st.sampled_from(["http", "https", "HTTPS"]), st.sampled_from(["A.b.com", "x.Example.org"]),
       st.sampled_from(["", "/", "/p/../q", "/a/./b"]))
def test_url_canonicalization_idempotent(scheme, host, path):
    once, _ = canonicalize_resource(f"{scheme}://{host}{path}", "url")
    assert canonicalize_resource(once, "url")[0] == once


def _hard_chain(n_hard, tail=True):
    acts = [act(2 * i, "file_write", path=f"/work/f{i}") for i in range(n_hard)]
    acts = [a for pair in zip(acts, [act(0, "file_read", path="/work/r")] * n_hard) for a in pair]
    if tail:
        acts.append(act(0, "net_send", url="https://x.example.com/u"))
    return traj(acts)


def test_history_in_order_most_recent_last():
    t = traj([act(0, "file_read", path="/work/r"), act(0, "file_read", path="/work/r"),
              act(0, "file_write", path="/work/a"), act(0, "file_read", path="/work/r"),
              act(0, "file_read", path="/work/r"), act(0, "file_delete", path="/work/b"),
              act(0, "file_read", path="/work/r"), act(0, "proc_spawn", cmd="ls"),
              act(0, "file_read", path="/work/r"), act(0, "net_send", url="https://x.example.com/")])
    ctx = build_ctx(t, 9, H=4)
    assert [r.primitive_type for r in ctx.recent_hard_history] == ["file_write", "file_delete", "proc_spawn"]
    assert [r.resource for r in ctx.recent_hard_history] == ["/work/a", "/work/b", "ls"]


def test_history_bounded_by_H():
    t = _hard_chain(6)
    ctx = build_ctx(t, len(t.events) - 1, H=4)
    assert [r.resource for r in ctx.recent_hard_history] == [f"/work/f{i}" for i in range(2, 6)]


def test_history_empty_at_first_event():
    assert build_ctx(_hard_chain(2), 0).recent_hard_history == ()


def test_history_scoped_to_span():
    t = _hard_chain(3)
    last = len(t.events) - 1
    assert len(build_ctx(t, last, spans=[(0, 3), (4, last)]).recent_hard_history) == 1


def test_build_ctx_out_of_range():
    with pytest.raises(IndexError):
        build_ctx(_hard_chain(1), 99)


def test_payload_never_verbatim():
    sentinel = "SENTINEL-summary-text-0193"
    ctx = make_ctx(act(0, "net_send", url="https://x.example.com/", payload=sentinel), ["/work"], "/work")
    assert sentinel not in repr(ctx.to_dict())
    assert ctx.payload_meta[0] == len(sentinel)


@given(st.integers(0, 8), st.integers(0, 6))
def test_history_bound_property(n_hard, H):
    t = _hard_chain(n_hard)
    for ev in t.events:
        ctx = build_ctx(t, ev.index, H=H)
        assert len(ctx.recent_hard_history) <= H


def test_build_ctx_deterministic():
    t = _hard_chain(5)
    assert build_ctx(t, 10).to_dict() == build_ctx(t, 10).to_dict()


def test_label_must_match_verdicts():
    with pytest.raises(TrajectoryError):
        Trajectory("x", "", (act(0, "file_write", verdicts=["v"], path="/etc/a"),), "safe")


def test_indices_strictly_increase():
    with pytest.raises(TrajectoryError):
        Trajectory("x", "", (act(1, "file_read", path="/a"), act(1, "file_read", path="/b")))


def test_verdicts_only_on_actions():
    obs = Event(1, "observation", "file_read", "file_ops", {}, (), ("v",))
    with pytest.raises(TrajectoryError):
        Trajectory("x", "", (act(0, "file_read", path="/a"), obs), "unsafe")


def test_trajectory_json_roundtrip():
    t = _hard_chain(2)
    assert Trajectory.from_dict(t.to_dict()) == t
