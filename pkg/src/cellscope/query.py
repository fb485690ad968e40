"""Literal queries over loaded documents.

Expressions are nested AND/OR/NOT combinations of (scoped key, matcher)
leaves, written in a bracketed list syntax, e.g.

    ["AND", (participant_key.ID, 1), (line_key.code, ["CONTAINS", "np"])]

Scopes address the three granularities: participant_key fields live on the
document, log_key fields on one cell execution, line_key fields on one
physical line. A result is a sparse copy of the queried documents keeping
original absolute IDs, so results can be queried again.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field, replace

from .logstore import DocumentRecord, ExecutionRecord, LineRecord

DOCUMENT = "document"
LOG = "log"
LINE = "line"
GRANULARITIES = (DOCUMENT, LOG, LINE)

_SCOPE_GRANULARITY = {
    "participant_key": DOCUMENT,
    "log_key": LOG,
    "line_key": LINE,
}
_RANK = {DOCUMENT: 0, LOG: 1, LINE: 2}

_MISSING = object()


class QueryParseError(ValueError):
    """Bad query text; message carries the offending position."""


class GranularityError(ValueError):
    """Requested granularity finer than the query's finest scope."""


@dataclass(frozen=True)
class ScopedKey:
    scope: str
    path: tuple[str, ...]

    def __str__(self):
        return ".".join((self.scope,) + self.path)


@dataclass(frozen=True)
class Equals:
    value: object


@dataclass(frozen=True)
class Contains:
    substring: str


class Regex:
    """Compiled at parse time. Lookbehind is outside the supported dialect."""

    def __init__(self, pattern: str):
        if "(?<=" in pattern or "(?<!" in pattern:
            raise QueryParseError(f"lookbehind not supported in pattern {pattern!r}")
        try:
            self.compiled = re.compile(pattern)
        except re.error as exc:
            raise QueryParseError(f"bad regex {pattern!r}: {exc}") from None
        self.pattern = pattern

    def __repr__(self):
        return f"Regex({self.pattern!r})"

    def __eq__(self, other):
        return isinstance(other, Regex) and other.pattern == self.pattern

    def __hash__(self):
        return hash(("Regex", self.pattern))


@dataclass(frozen=True)
class Leaf:
    key: ScopedKey
    matcher: object


@dataclass(frozen=True)
class Node:
    op: str
    children: tuple


QueryExpr = Leaf | Node


@dataclass
class QueryResult:
    """Sparse forest of matching documents; itself queryable."""

    documents: list[DocumentRecord] = field(default_factory=list)
    granularity: str = LINE

    def line_ids(self) -> set[tuple[str, int, int]]:
        out = set()
        for doc in self.documents:
            for rec in doc.logs:
                for ln in rec.lines:
                    out.add((doc.document_id, rec.log_id, ln.line_index))
        return out

    def log_ids(self) -> set[tuple[str, int]]:
        return {(doc.document_id, rec.log_id)
                for doc in self.documents for rec in doc.logs}

    def document_ids(self) -> set[str]:
        return {doc.document_id for doc in self.documents}

    def count(self, granularity: str | None = None) -> int:
        g = granularity or self.granularity
        if g == DOCUMENT:
            return len(self.documents)
        if g == LOG:
            return len(self.log_ids())
        return len(self.line_ids())

    def to_dict(self) -> dict:
        from .logstore import document_to_dict
        return {
            "granularity": self.granularity,
            "documents": [document_to_dict(d) for d in self.documents],
        }


# ---------------------------------------------------------------------------
# Parsing


def parse_query(expr_text: str) -> QueryExpr:
    try:
        tree = ast.parse(expr_text, mode="eval")
    except SyntaxError as exc:
        raise QueryParseError(
            f"unparseable query at line {exc.lineno} col {exc.offset}") from None
    return _build_expr(tree.body)


def _pos(node: ast.AST) -> str:
    return f"line {getattr(node, 'lineno', '?')} col {getattr(node, 'col_offset', '?')}"


def _build_expr(node: ast.AST) -> QueryExpr:
    if isinstance(node, ast.List):
        if not node.elts:
            raise QueryParseError(f"empty operator list at {_pos(node)}")
        head = node.elts[0]
        if not (isinstance(head, ast.Constant) and isinstance(head.value, str)):
            raise QueryParseError(f"operator must be a string at {_pos(head)}")
        op = head.value.upper()
        if op not in ("AND", "OR", "NOT"):
            raise QueryParseError(f"unknown operator {head.value!r} at {_pos(head)}")
        children = tuple(_build_expr(e) for e in node.elts[1:])
        if op == "NOT" and len(children) != 1:
            raise QueryParseError(
                f"NOT takes exactly one operand, got {len(children)} at {_pos(node)}")
        if op in ("AND", "OR") and not children:
            raise QueryParseError(f"{op} needs at least one operand at {_pos(node)}")
        return Node(op, children)
    if isinstance(node, ast.Tuple):
        if len(node.elts) != 2:
            raise QueryParseError(
                f"leaf must be a (key, matcher) pair at {_pos(node)}")
        return Leaf(_build_key(node.elts[0]), _build_matcher(node.elts[1]))
    raise QueryParseError(f"expected [op, ...] or (key, matcher) at {_pos(node)}")


def _build_key(node: ast.AST) -> ScopedKey:
    parts: list[str] = []
    cur = node
    while isinstance(cur, ast.Attribute):
        parts.append(cur.attr)
        cur = cur.value
    if not isinstance(cur, ast.Name):
        raise QueryParseError(f"bad key expression at {_pos(node)}")
    if cur.id not in _SCOPE_GRANULARITY:
        raise QueryParseError(
            f"unknown scope prefix {cur.id!r} at {_pos(node)} "
            f"(expected participant_key, log_key or line_key)")
    parts.reverse()
    if not parts:
        raise QueryParseError(f"scope {cur.id} needs a field path at {_pos(node)}")
    return ScopedKey(cur.id, tuple(parts))


def _literal(node: ast.AST):
    if isinstance(node, ast.Constant):
        return node.value
    if (isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub)
            and isinstance(node.operand, ast.Constant)):
        return -node.operand.value
    raise QueryParseError(f"expected a literal at {_pos(node)}")


def _build_matcher(node: ast.AST):
    if isinstance(node, ast.List):
        if len(node.elts) != 2:
            raise QueryParseError(
                f"matcher list must be [name, value] at {_pos(node)}")
        head = node.elts[0]
        if not (isinstance(head, ast.Constant) and isinstance(head.value, str)):
            raise QueryParseError(f"matcher name must be a string at {_pos(head)}")
        name = head.value.upper()
        value = _literal(node.elts[1])
        if name == "CONTAINS":
            return Contains(str(value))
        if name == "REGEX":
            return Regex(str(value))
        if name == "EQUALS":
            return Equals(value)
        raise QueryParseError(f"unknown matcher {head.value!r} at {_pos(head)}")
    return Equals(_literal(node))


# ---------------------------------------------------------------------------
# Field resolution


def _as_text(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, dict)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def _resolve_document(doc: DocumentRecord, path: tuple[str, ...]):
    head = path[0]
    if len(path) == 1:
        if head in ("ID", "id", "document_id"):
            return doc.document_id
        if head == "valid":
            return doc.valid
        return doc.meta.get(head, _MISSING)
    if head == "meta" and len(path) == 2:
        return doc.meta.get(path[1], _MISSING)
    if head == "env":
        cur = doc.env.to_dict()
        for part in path[1:]:
            if isinstance(cur, dict) and part in cur:
                cur = cur[part]
            else:
                return _MISSING
        return cur
    return _MISSING


def _resolve_log(rec: ExecutionRecord, path: tuple[str, ...]):
    head = path[0]
    if len(path) == 1:
        if head in ("code", "source"):
            return rec.source
        if head == "status":
            return rec.status
        if head == "stdout":
            return rec.stdout
        if head == "stderr":
            return rec.stderr
        if head in ("ID", "id", "log_id"):
            return rec.log_id
        if head == "ts_ahead":
            return rec.ts_ahead
        if head == "ts_reply":
            return rec.ts_reply if rec.ts_reply is not None else _MISSING
        if head == "ename":
            return rec.error.ename if rec.error else _MISSING
        if head == "evalue":
            return rec.error.evalue if rec.error else _MISSING
        if head == "traceback":
            return rec.error.traceback if rec.error else _MISSING
        if head == "failing_line_index":
            if rec.error and rec.error.failing_line_index is not None:
                return rec.error.failing_line_index
            return _MISSING
        return rec.meta.get(head, _MISSING)
    if head == "meta" and len(path) == 2:
        return rec.meta.get(path[1], _MISSING)
    return _MISSING


def _resolve_line(line: LineRecord, path: tuple[str, ...]):
    head = path[0]
    if len(path) == 1:
        if head in ("code", "text"):
            return line.text
        if head in ("ID", "id", "line_index", "index"):
            return line.line_index
        return line.meta.get(head, _MISSING)
    if head == "meta" and len(path) == 2:
        return line.meta.get(path[1], _MISSING)
    return _MISSING


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _matches(matcher, value) -> bool:
    if value is _MISSING:
        return False
    if isinstance(matcher, Equals):
        want, got = matcher.value, value
        if isinstance(want, bool) or isinstance(got, bool):
            return _as_text(want) == _as_text(got)
        w, g = _as_text(want), _as_text(got)
        if w == g:
            return True
        if _is_number(w) and _is_number(g):
            return float(w) == float(g)
        return False
    text = _as_text(value)
    if isinstance(matcher, Contains):
        return matcher.substring in text
    if isinstance(matcher, Regex):
        return matcher.compiled.search(text) is not None
    raise TypeError(f"unknown matcher {matcher!r}")


# ---------------------------------------------------------------------------
# Evaluation


def query_granularity(expr: QueryExpr) -> str:
    """Finest scope referenced anywhere in the expression."""
    if isinstance(expr, Leaf):
        return _SCOPE_GRANULARITY[expr.key.scope]
    finest = DOCUMENT
    for child in expr.children:
        g = query_granularity(child)
        if _RANK[g] > _RANK[finest]:
            finest = g
    return finest


def _eval(expr: QueryExpr, doc: DocumentRecord,
          rec: ExecutionRecord | None, line: LineRecord | None) -> bool:
    if isinstance(expr, Node):
        if expr.op == "AND":
            return all(_eval(c, doc, rec, line) for c in expr.children)
        if expr.op == "OR":
            return any(_eval(c, doc, rec, line) for c in expr.children)
        return not _eval(expr.children[0], doc, rec, line)
    scope = expr.key.scope
    if scope == "participant_key":
        value = _resolve_document(doc, expr.key.path)
    elif scope == "log_key":
        assert rec is not None
        value = _resolve_log(rec, expr.key.path)
    else:
        assert line is not None
        value = _resolve_line(line, expr.key.path)
    return _matches(expr.matcher, value)


def _normalize_source(source) -> list[DocumentRecord]:
    if isinstance(source, DocumentRecord):
        return [source]
    if isinstance(source, QueryResult):
        return source.documents
    return list(source)


def find(source, q: QueryExpr, granularity: str | None = None) -> QueryResult:
    """Evaluate q over documents (or a previous result). The result keeps
    only matching elements at the result granularity, with ancestors for
    context; granularity defaults to the finest scope referenced."""
    docs = _normalize_source(source)
    natural = query_granularity(q)
    g = granularity or natural
    if g not in GRANULARITIES:
        raise GranularityError(f"unknown granularity {g!r}")
    if _RANK[g] > _RANK[natural]:
        raise GranularityError(
            f"granularity {g} is finer than the query's finest scope {natural}")

    out: list[DocumentRecord] = []
    for doc in docs:
        if natural == DOCUMENT:
            if _eval(q, doc, None, None):
                out.append(doc)
            continue
        if natural == LOG:
            logs = [rec for rec in doc.logs if _eval(q, doc, rec, None)]
        else:
            logs = []
            for rec in doc.logs:
                hit = [ln for ln in rec.lines if _eval(q, doc, rec, ln)]
                if hit:
                    logs.append(rec if g != LINE else replace(rec, lines=hit))
        if logs:
            if g == DOCUMENT:
                out.append(doc)
            else:
                out.append(replace(doc, logs=logs, truncated_tail=None))
    return QueryResult(documents=out, granularity=g)


def count_matches(source, q: QueryExpr, granularity: str | None = None) -> int:
    """Number of retained elements at the given (coarser-or-equal)
    granularity; defaults to the query's natural granularity."""
    return find(source, q, granularity).count()
