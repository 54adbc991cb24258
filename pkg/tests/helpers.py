"""Small builders shared by the unit tests."""

from gbtree.events import Event, ObservableDelta, Trajectory, primitive_spec
from gbtree.gates.dsl import parse_precondition
from gbtree.tree import GBTree, MacroNode


def act(index, primitive_type, deltas=(), verdicts=(), **args):
    return Event(index, "action", primitive_type, primitive_spec(primitive_type).family, dict(args),
                 tuple(ObservableDelta(*d) for d in deltas), tuple(verdicts))


def traj(actions, tid="t", task="task", success=True):
    events = []
    for i, a in enumerate(actions):
        events.append(Event(i, a.kind, a.primitive_type, a.tool_family, a.args, a.deltas, a.verdicts))
    label = "unsafe" if any(e.verdicts for e in events) else "safe"
    return Trajectory(tid, task, tuple(events), label, success)


def random_tree(rng):
    """Random family subtree of up to 30 nodes with risks and file preconditions."""
    n = rng.randint(2, 29)
    t = GBTree()
    fam = t.ensure_family("f")
    nodes = [fam]
    for i in range(n):
        pre = None
        if rng.random() < 0.2:
            pre = parse_precondition(f'(path-matches env.files "/work/f{rng.randint(0, 3)}")')
        node = MacroNode(0, None, f"n{i}", risk_level=rng.randint(0, 3), precondition=pre)
        nodes.append(t.add_child(rng.choice(nodes), node)["node"])
    return t, nodes
