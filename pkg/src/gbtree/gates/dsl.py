"""A small s-expression predicate language over structured records.

Grammar::

    expr    := "(" op arg* ")"
    arg     := expr | atom | string
    string  := JSON-style double-quoted literal
    atom    := run of characters other than whitespace, quotes and parens

Operators::

    (field= <field> "<literal>")
    (path-under-roots <field>)
    (path-matches <field> "<glob>")
    (domain-in <list-name>... "<domain>"...)
    (port-in 80 443)
    (history-motif (<category> <relation>)...)   relation: any | same | prev
    (payload-flag "<label>")
    (and e...) (or e...) (not e)

A gate expression describes the *violation*: when it evaluates true the
gate rejects the context. The printer emits one canonical text per tree,
with literals always quoted.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass
from typing import Any, Mapping, Protocol, Sequence, Union

from ..events import CATEGORIES, HistoryRecord, path_under

MAX_DEPTH = 16

CTX_FIELDS = frozenset(
    {
        "primitive_type",
        "tool_family",
        "category",
        "risk_level",
        "cwd",
        "resource",
        "workspace_roots",
        "net_dest.domain",
        "net_dest.port",
        "net_dest.scheme",
        "proc_meta.executable",
        "proc_meta.argv_digest",
        "payload_meta.length",
        "payload_meta.content_hash",
    }
)
CTX_PREFIXES = ("args.",)

ENV_FIELDS = frozenset({"env.domain", "env.repo_root", "env.files", "env.tools"})
ENV_PREFIXES = ("env.flags.",)

MOTIF_CATEGORIES = frozenset(CATEGORIES) | {"hard", "*"}
MOTIF_RELATIONS = frozenset({"any", "same", "prev"})


class GateSyntaxError(ValueError):
    def __init__(self, message: str, column: int) -> None:
        super().__init__(f"{message} at column {column}")
        self.column = column


class GateEvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FieldSchema:
    exact: frozenset[str]
    prefixes: tuple[str, ...]
    allow_payload: bool = True
    allow_history: bool = True

    def knows(self, path: str) -> bool:
        return path in self.exact or any(path.startswith(p) and len(path) > len(p) for p in self.prefixes)


CTX_SCHEMA = FieldSchema(CTX_FIELDS, CTX_PREFIXES)
ENV_SCHEMA = FieldSchema(ENV_FIELDS, ENV_PREFIXES, allow_payload=False, allow_history=False)


# --------------------------------------------------------------------------
# expression nodes


@dataclass(frozen=True)
class FieldEquals:
    field: str
    literal: str


@dataclass(frozen=True)
class PathUnderRoots:
    field: str


@dataclass(frozen=True)
class PathMatches:
    field: str
    glob: str


@dataclass(frozen=True)
class DomainInAllowlist:
    lists: tuple[str, ...] = ()
    domains: tuple[str, ...] = ()


@dataclass(frozen=True)
class PortIn:
    ports: tuple[int, ...]


@dataclass(frozen=True)
class HistoryMotif:
    patterns: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class PayloadFlag:
    label: str


@dataclass(frozen=True)
class And:
    children: tuple[GateExpr, ...]


@dataclass(frozen=True)
class Or:
    children: tuple[GateExpr, ...]


@dataclass(frozen=True)
class Not:
    child: GateExpr


GateExpr = Union[
    FieldEquals, PathUnderRoots, PathMatches, DomainInAllowlist, PortIn, HistoryMotif, PayloadFlag, And, Or, Not
]


def depth(expr: GateExpr) -> int:
    if isinstance(expr, (And, Or)):
        return 1 + max((depth(c) for c in expr.children), default=0)
    if isinstance(expr, Not):
        return 1 + depth(expr.child)
    return 1


def walk(expr: GateExpr):
    yield expr
    if isinstance(expr, (And, Or)):
        for c in expr.children:
            yield from walk(c)
    elif isinstance(expr, Not):
        yield from walk(expr.child)


# --------------------------------------------------------------------------
# printing


def _q(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def to_text(expr: GateExpr) -> str:
    if isinstance(expr, FieldEquals):
        return f"(field= {expr.field} {_q(expr.literal)})"
    if isinstance(expr, PathUnderRoots):
        return f"(path-under-roots {expr.field})"
    if isinstance(expr, PathMatches):
        return f"(path-matches {expr.field} {_q(expr.glob)})"
    if isinstance(expr, DomainInAllowlist):
        parts = list(expr.lists) + [_q(d) for d in expr.domains]
        return "(domain-in " + " ".join(parts) + ")"
    if isinstance(expr, PortIn):
        return "(port-in " + " ".join(str(p) for p in expr.ports) + ")"
    if isinstance(expr, HistoryMotif):
        return "(history-motif " + " ".join(f"({c} {r})" for c, r in expr.patterns) + ")"
    if isinstance(expr, PayloadFlag):
        return f"(payload-flag {_q(expr.label)})"
    if isinstance(expr, And):
        return "(and " + " ".join(to_text(c) for c in expr.children) + ")"
    if isinstance(expr, Or):
        return "(or " + " ".join(to_text(c) for c in expr.children) + ")"
    if isinstance(expr, Not):
        return f"(not {to_text(expr.child)})"
    raise TypeError(f"not a gate expression: {expr!r}")


# --------------------------------------------------------------------------
# parsing


@dataclass(frozen=True)
class _Tok:
    kind: str  # "(" ")" "atom" "str"
    value: str
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            toks.append(_Tok(ch, ch, i + 1))
            i += 1
        elif ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 2 if text[j] == "\\" else 1
            if j >= n:
                raise GateSyntaxError("unterminated string", i + 1)
            try:
                value = json.loads(text[i : j + 1])
            except json.JSONDecodeError:
                raise GateSyntaxError("bad string escape", i + 1) from None
            toks.append(_Tok("str", value, i + 1))
            i = j + 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in '()"':
                j += 1
            toks.append(_Tok("atom", text[i:j], i + 1))
            i = j
    return toks


class _Parser:
    def __init__(self, text: str, schema: FieldSchema) -> None:
        self.text = text
        self.toks = _tokenize(text)
        self.pos = 0
        self.schema = schema

    @property
    def end_col(self) -> int:
        return len(self.text) + 1

    def peek(self) -> _Tok | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, what: str = "token") -> _Tok:
        tok = self.peek()
        if tok is None:
            raise GateSyntaxError(f"unexpected end of input, expected {what}", self.end_col)
        self.pos += 1
        return tok

    def expect(self, kind: str) -> _Tok:
        tok = self.take(repr(kind))
        if tok.kind != kind:
            raise GateSyntaxError(f"expected {kind!r}, got {tok.value!r}", tok.col)
        return tok

    def field(self) -> str:
        tok = self.take("field path")
        if tok.kind != "atom":
            raise GateSyntaxError("field path must be a bare atom", tok.col)
        if not self.schema.knows(tok.value):
            raise GateSyntaxError(f"unknown field path {tok.value!r}", tok.col)
        return tok.value

    def literal(self) -> str:
        tok = self.take("literal")
        if tok.kind not in ("str", "atom"):
            raise GateSyntaxError(f"expected literal, got {tok.value!r}", tok.col)
        return tok.value

    def close(self) -> None:
        tok = self.take("')'")
        if tok.kind != ")":
            raise GateSyntaxError(f"unexpected {tok.value!r}, expected ')'", tok.col)

    def expr(self, level: int) -> GateExpr:
        open_tok = self.expect("(")
        if level > MAX_DEPTH:
            raise GateSyntaxError(f"expression depth exceeds {MAX_DEPTH}", open_tok.col)
        op = self.take("operator")
        if op.kind != "atom":
            raise GateSyntaxError("operator expected", op.col)
        name = op.value
        if name == "field=":
            node: GateExpr = FieldEquals(self.field(), self.literal())
            self.close()
        elif name == "path-under-roots":
            node = PathUnderRoots(self.field())
            self.close()
        elif name == "path-matches":
            node = PathMatches(self.field(), self.literal())
            self.close()
        elif name == "domain-in":
            lists, domains = [], []
            while (tok := self.peek()) is not None and tok.kind != ")":
                self.pos += 1
                if tok.kind == "atom":
                    lists.append(tok.value)
                elif tok.kind == "str":
                    domains.append(tok.value.lower())
                else:
                    raise GateSyntaxError("allowlist entry expected", tok.col)
            if not lists and not domains:
                raise GateSyntaxError("domain-in needs at least one entry", op.col)
            node = DomainInAllowlist(tuple(lists), tuple(domains))
            self.close()
        elif name == "port-in":
            ports = []
            while (tok := self.peek()) is not None and tok.kind != ")":
                self.pos += 1
                if tok.kind != "atom" or not tok.value.isdigit():
                    raise GateSyntaxError(f"port number expected, got {tok.value!r}", tok.col)
                ports.append(int(tok.value))
            if not ports:
                raise GateSyntaxError("port-in needs at least one port", op.col)
            node = PortIn(tuple(ports))
            self.close()
        elif name == "history-motif":
            if not self.schema.allow_history:
                raise GateSyntaxError("history-motif not allowed here", op.col)
            pats = []
            while (tok := self.peek()) is not None and tok.kind == "(":
                self.pos += 1
                cat, rel = self.take("category"), self.take("relation")
                if cat.value not in MOTIF_CATEGORIES:
                    raise GateSyntaxError(f"unknown category {cat.value!r}", cat.col)
                if rel.value not in MOTIF_RELATIONS:
                    raise GateSyntaxError(f"unknown relation {rel.value!r}", rel.col)
                self.close()
                pats.append((cat.value, rel.value))
            if not pats:
                raise GateSyntaxError("history-motif needs at least one pattern", op.col)
            node = HistoryMotif(tuple(pats))
            self.close()
        elif name == "payload-flag":
            if not self.schema.allow_payload:
                raise GateSyntaxError("payload-flag not allowed here", op.col)
            node = PayloadFlag(self.literal())
            self.close()
        elif name in ("and", "or"):
            kids = []
            while (tok := self.peek()) is not None and tok.kind == "(":
                kids.append(self.expr(level + 1))
            if not kids:
                raise GateSyntaxError(f"{name} needs at least one operand", op.col)
            self.close()
            node = And(tuple(kids)) if name == "and" else Or(tuple(kids))
        elif name == "not":
            node = Not(self.expr(level + 1))
            self.close()
        else:
            raise GateSyntaxError(f"unknown operator {name!r}", op.col)
        return node


def parse_gate(text: str, schema: FieldSchema = CTX_SCHEMA) -> GateExpr:
    p = _Parser(text, schema)
    node = p.expr(1)
    extra = p.peek()
    if extra is not None:
        raise GateSyntaxError(f"trailing input {extra.value!r}", extra.col)
    return node


def parse_precondition(text: str) -> GateExpr:
    return parse_gate(text, ENV_SCHEMA)


# --------------------------------------------------------------------------
# evaluation


class PayloadClassifier(Protocol):
    def classify(self, text: str) -> frozenset[str]: ...


@dataclass(frozen=True)
class Subject:
    """What an expression is evaluated against."""

    record: Mapping[str, Any]
    history: tuple[HistoryRecord, ...] = ()
    related: frozenset[str] = frozenset()


@dataclass
class EvalEnv:
    classifier: PayloadClassifier | None = None
    payloads: Mapping[str, str] | None = None  # content hash -> payload text
    allowlists: Mapping[str, Sequence[str]] | None = None


def _get(subject: Subject, path: str) -> Any:
    try:
        return subject.record[path]
    except KeyError:
        raise GateEvaluationError(f"required field {path!r} absent") from None


def _motif(history: Sequence[HistoryRecord], patterns: Sequence[tuple[str, str]], related: frozenset[str]) -> bool:
    def cat_ok(rec: HistoryRecord, cat: str) -> bool:
        if cat == "*":
            return True
        if cat == "hard":
            return rec.category != "none"
        return rec.category == cat

    def search(k: int, start: int, prev: str | None) -> bool:
        if k == len(patterns):
            return True
        cat, rel = patterns[k]
        for i in range(start, len(history)):
            rec = history[i]
            if not cat_ok(rec, cat):
                continue
            if rel == "same" and rec.resource not in related:
                continue
            if rel == "prev" and (prev is None or rec.resource != prev):
                continue
            if search(k + 1, i + 1, rec.resource):
                return True
        return False

    return search(0, 0, None)


def evaluate(expr: GateExpr, subject: Subject, env: EvalEnv | None = None) -> bool:
    """True when the expression matches. Missing fields raise."""
    env = env or EvalEnv()
    if isinstance(expr, FieldEquals):
        return str(_get(subject, expr.field)) == expr.literal
    if isinstance(expr, PathUnderRoots):
        value = _get(subject, expr.field)
        roots = _get(subject, "workspace_roots")
        return any(path_under(value, r) for r in roots)
    if isinstance(expr, PathMatches):
        value = _get(subject, expr.field)
        values = value if isinstance(value, (list, tuple)) else [value]
        return any(fnmatch.fnmatchcase(v, expr.glob) for v in values)
    if isinstance(expr, DomainInAllowlist):
        domain = str(_get(subject, "net_dest.domain")).lower()
        allowed = list(expr.domains)
        for name in expr.lists:
            if env.allowlists is None or name not in env.allowlists:
                raise GateEvaluationError(f"allowlist {name!r} not configured")
            allowed.extend(d.lower() for d in env.allowlists[name])
        return any(domain == d or domain.endswith("." + d) for d in allowed)
    if isinstance(expr, PortIn):
        return int(_get(subject, "net_dest.port")) in expr.ports
    if isinstance(expr, HistoryMotif):
        return _motif(subject.history, expr.patterns, subject.related)
    if isinstance(expr, PayloadFlag):
        if "payload_meta.content_hash" not in subject.record:
            return False
        if env.classifier is None:
            raise GateEvaluationError("payload classifier port not configured")
        digest = subject.record["payload_meta.content_hash"]
        if env.payloads is None or digest not in env.payloads:
            raise GateEvaluationError(f"payload {digest} unavailable to classifier")
        return expr.label in env.classifier.classify(env.payloads[digest])
    if isinstance(expr, And):
        return all(evaluate(c, subject, env) for c in expr.children)
    if isinstance(expr, Or):
        return any(evaluate(c, subject, env) for c in expr.children)
    if isinstance(expr, Not):
        return not evaluate(expr.child, subject, env)
    raise TypeError(f"not a gate expression: {expr!r}")


class KeywordClassifier:
    """Reference payload classifier: label fires when any keyword occurs."""

    def __init__(self, labels: Mapping[str, Sequence[str]]) -> None:
        self.labels = {k: tuple(w.lower() for w in v) for k, v in sorted(labels.items())}

    def classify(self, text: str) -> frozenset[str]:
        low = text.lower()
        return frozenset(label for label, words in self.labels.items() if any(w in low for w in words))


def uses_payload(expr: GateExpr) -> bool:
    return any(isinstance(e, PayloadFlag) for e in walk(expr))

