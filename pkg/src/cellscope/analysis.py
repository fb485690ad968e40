"""Workflow-metric recipes over loaded log documents.

Every recipe is a pure function of (document, ruleset) producing a small
table; reports bundle tables with the document ids and ruleset digest that
produced them, so any cell is traceable to its inputs.
"""

from __future__ import annotations

import ast
import hashlib
import io
import json
import math
import re
import tokenize
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .logstore import ERROR, OK, DocumentRecord
from .pyast import (
    BLANK,
    COMMENT_ONLY,
    CONTROL_WORDS,
    EXECUTION,
    FORMAT,
    classify_error_kind,
    extract_imports,
    line_features,
    mask_directives,
)

AUXILIARY = "auxiliary"
VISUALIZATION = "visualization"
MODIFICATION = "modification"
MODELING = "modeling"
UNTAGGED = "untagged"
CATEGORIES = (AUXILIARY, VISUALIZATION, MODIFICATION, MODELING)
# when several category rules hit one line, the most specific wins
PRECEDENCE = (MODELING, MODIFICATION, VISUALIZATION, AUXILIARY)

ERROR_OVERLAY = "error"
LLM_OVERLAY = "llm_generated"
LLM_MARK = "GENERATED"

DEFAULT_RULESET_PATH = Path(__file__).parent / "rulesets" / "default.json"


class RulesetError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryRule:
    kinds: frozenset[str]
    calls: frozenset[str]
    regexes: tuple[re.Pattern, ...]


@dataclass
class Ruleset:
    categories: dict[str, CategoryRule]
    estimator_names: frozenset[str]
    similarity_threshold: float = 0.8
    segment_count: int = 10
    top_k: int = 20
    session_gap_minutes: int = 30
    digest: str = ""

    @classmethod
    def from_dict(cls, raw: dict) -> "Ruleset":
        theta = float(raw.get("similarity_threshold", 0.8))
        if not 0.0 < theta <= 1.0:
            raise RulesetError(f"similarity_threshold {theta} outside (0, 1]")
        segments = int(raw.get("segment_count", 10))
        top_k = int(raw.get("top_k", 20))
        if segments < 1 or top_k < 1:
            raise RulesetError("segment_count and top_k must be positive")
        categories = {}
        for name, spec in raw.get("categories", {}).items():
            categories[name] = CategoryRule(
                kinds=frozenset(spec.get("kinds", [])),
                calls=frozenset(spec.get("calls", [])),
                regexes=tuple(re.compile(p) for p in spec.get("regexes", [])),
            )
        missing = set(CATEGORIES) - set(categories)
        if missing:
            raise RulesetError(f"categories missing {sorted(missing)}")
        digest = hashlib.sha256(
            json.dumps(raw, sort_keys=True).encode()).hexdigest()
        return cls(
            categories=categories,
            estimator_names=frozenset(raw.get("estimator_names", [])),
            similarity_threshold=theta,
            segment_count=segments,
            top_k=top_k,
            session_gap_minutes=int(raw.get("session_gap_minutes", 30)),
            digest=digest,
        )

    @classmethod
    def load(cls, path) -> "Ruleset":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "Ruleset":
        return cls.load(DEFAULT_RULESET_PATH)


# ---------------------------------------------------------------------------
# Tables and reports


def _cell_to_json(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value


def _cell_from_json(value):
    if value == "inf":
        return math.inf
    return value


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[tuple] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "columns": list(self.columns),
            "rows": [[_cell_to_json(v) for v in row] for row in self.rows],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Table":
        return cls(
            name=d["name"],
            columns=list(d["columns"]),
            rows=[tuple(_cell_from_json(v) for v in row) for row in d["rows"]],
            meta=dict(d.get("meta", {})),
        )

    def to_csv(self) -> str:
        out = io.StringIO()
        import csv

        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow(["" if v is None else v for v in row])
        return out.getvalue()

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]


@dataclass
class AnalysisReport:
    tables: dict[str, Table]
    document_ids: list[str]
    ruleset_digest: str

    def to_dict(self) -> dict:
        return {
            "document_ids": list(self.document_ids),
            "ruleset_digest": self.ruleset_digest,
            "tables": {name: t.to_dict() for name, t in sorted(self.tables.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisReport":
        return cls(
            tables={name: Table.from_dict(t) for name, t in d["tables"].items()},
            document_ids=list(d["document_ids"]),
            ruleset_digest=d["ruleset_digest"],
        )

    @classmethod
    def from_json(cls, text: str) -> "AnalysisReport":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Shared parsing helpers


def _parse_masked(source: str) -> ast.Module | None:
    masked, _ = mask_directives(source)
    try:
        return ast.parse(masked)
    except SyntaxError:
        return None


def _callee_name(func: ast.AST) -> str | None:
    if isinstance(func, ast.Name):
        return func.id
    if isinstance(func, ast.Attribute):
        return func.attr
    return None


def _calls_by_line(doc: DocumentRecord) -> dict[tuple[int, int], list[str]]:
    out: dict[tuple[int, int], list[str]] = {}
    for rec in doc.logs:
        module = _parse_masked(rec.source)
        if module is None:
            continue
        for node in ast.walk(module):
            if isinstance(node, ast.Call):
                name = _callee_name(node.func)
                if name is not None:
                    out.setdefault((rec.log_id, node.lineno - 1), []).append(name)
    return out


# ---------------------------------------------------------------------------
# tag_lines


@dataclass
class LineTags:
    category: str
    overlays: set[str] = field(default_factory=set)


def tag_lines(doc: DocumentRecord, ruleset: Ruleset,
              labels: dict[tuple[int, int], str] | None = None
              ) -> dict[tuple[int, int], LineTags]:
    """One category per code line (rule precedence resolves overlaps so
    segment counts stay conservative), plus error / llm_generated overlays.
    Blank and comment-only lines carry no tags."""
    features = line_features(doc)
    calls = _calls_by_line(doc)
    tags: dict[tuple[int, int], LineTags] = {}
    for rec in doc.logs:
        generated = False
        for ln in rec.lines:
            line_id = (rec.log_id, ln.line_index)
            info = features[line_id]
            if info.outermost_kind == COMMENT_ONLY:
                generated = LLM_MARK in ln.text
                continue
            if info.outermost_kind == BLANK:
                continue
            category = UNTAGGED
            line_calls = calls.get(line_id, [])
            for name in PRECEDENCE:
                rule = ruleset.categories[name]
                if (info.outermost_kind in rule.kinds
                        or any(c in rule.calls for c in line_calls)
                        or any(p.search(ln.text) for p in rule.regexes)):
                    category = name
                    break
            overlays = set()
            if rec.status == ERROR:
                overlays.add(ERROR_OVERLAY)
            if generated:
                overlays.add(LLM_OVERLAY)
            tags[line_id] = LineTags(category, overlays)
    if labels:
        for line_id, category in labels.items():
            if line_id in tags:
                tags[line_id].category = category
    return tags


def load_labels(path) -> dict[tuple[int, int], str]:
    """Label file: JSON object mapping "log:line" to a category name."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = {}
    for key, category in raw.items():
        log_s, _, line_s = key.partition(":")
        out[(int(log_s), int(line_s))] = str(category)
    return out


def tags_table(doc: DocumentRecord, ruleset: Ruleset,
               labels=None) -> Table:
    tags = tag_lines(doc, ruleset, labels)
    rows = [
        (log_id, idx, t.category, ",".join(sorted(t.overlays)))
        for (log_id, idx), t in sorted(tags.items())
    ]
    return Table("tags", ["log_id", "line_index", "category", "overlays"], rows)


# ---------------------------------------------------------------------------
# segment_distribution


def segment_sizes(count: int, segments: int) -> list[int]:
    q, r = divmod(count, segments)
    return [q + 1] * r + [q] * (segments - r)


def segment_distribution(doc: DocumentRecord, ruleset: Ruleset,
                         tags: dict[tuple[int, int], LineTags] | None = None
                         ) -> Table:
    if tags is None:
        tags = tag_lines(doc, ruleset)
    sizes = segment_sizes(len(doc.logs), ruleset.segment_count)
    segment_of_log: dict[int, int] = {}
    position = 0
    for seg, size in enumerate(sizes):
        for rec in doc.logs[position:position + size]:
            segment_of_log[rec.log_id] = seg
        position += size
    counts: Counter = Counter()
    for (log_id, _), t in tags.items():
        counts[(segment_of_log[log_id], t.category)] += 1
    rows = [
        (seg, category, counts.get((seg, category), 0))
        for seg in range(ruleset.segment_count)
        for category in CATEGORIES + (UNTAGGED,)
    ]
    return Table("segments", ["segment", "category", "count"], rows,
                 meta={"segment_sizes": sizes})


# ---------------------------------------------------------------------------
# error_resolution


_FALLBACK_TOKEN_RE = re.compile(r"[A-Za-z_]\w*|[^\w\s]")
_TOKEN_TYPES = frozenset({tokenize.NAME, tokenize.OP})


def token_multiset(source: str) -> Counter:
    """Identifier, keyword, and operator tokens with multiplicity; string
    and number literals are deliberately not part of similarity."""
    try:
        toks = list(tokenize.generate_tokens(io.StringIO(source).readline))
    except (tokenize.TokenError, IndentationError, SyntaxError):
        return Counter(
            t for t in _FALLBACK_TOKEN_RE.findall(source) if not t.isdigit())
    return Counter(t.string for t in toks if t.type in _TOKEN_TYPES)


def cosine_similarity(a: Counter, b: Counter) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    dot = sum(count * b[token] for token, count in a.items())
    norm = math.sqrt(sum(c * c for c in a.values()))
    norm *= math.sqrt(sum(c * c for c in b.values()))
    return dot / norm


def error_resolution(doc: DocumentRecord, ruleset: Ruleset) -> Table:
    """For each errored log: the first similar later log that ran clean.
    Similar later errors update the reference source first, so a cell edited
    across several failing attempts is still tracked to its fix. Unresolved
    errors get gap inf."""
    theta = ruleset.similarity_threshold
    tokens = [token_multiset(rec.source) for rec in doc.logs]
    rows = []
    for i, rec in enumerate(doc.logs):
        if rec.status != ERROR:
            continue
        reference = tokens[i]
        resolved = None
        for j in range(i + 1, len(doc.logs)):
            later = doc.logs[j]
            if later.status == ERROR:
                if cosine_similarity(reference, tokens[j]) >= theta:
                    reference = tokens[j]
            elif later.status == OK:
                if cosine_similarity(reference, tokens[j]) >= theta:
                    resolved = later.log_id
                    break
        gap = (resolved - rec.log_id) if resolved is not None else math.inf
        rows.append((rec.log_id, resolved, gap))
    return Table("error_resolution", ["error_log", "resolved_log", "gap"], rows)


# ---------------------------------------------------------------------------
# function_error_stats


def function_error_stats(doc: DocumentRecord, ruleset: Ruleset) -> Table:
    """Calls in ok logs count ok; in errored logs only the calls on the
    failing line count, as errored. Aborted and pending logs are skipped."""
    counts: dict[str, list[int]] = {}
    for rec in doc.logs:
        if rec.status not in (OK, ERROR):
            continue
        module = _parse_masked(rec.source)
        if module is None:
            continue
        fail_line = None
        if rec.status == ERROR and rec.error is not None:
            fail_line = rec.error.failing_line_index
        for node in ast.walk(module):
            if not isinstance(node, ast.Call):
                continue
            name = _callee_name(node.func)
            if name is None:
                continue
            if rec.status == OK:
                counts.setdefault(name, [0, 0])[1] += 1
            elif fail_line is not None and node.lineno - 1 == fail_line:
                counts.setdefault(name, [0, 0])[0] += 1
    by_total = sorted(counts.items(),
                      key=lambda kv: (-(kv[1][0] + kv[1][1]), kv[0]))
    top = by_total[:ruleset.top_k]
    top.sort(key=lambda kv: (-(kv[1][0] / (kv[1][0] + kv[1][1])),
                             -(kv[1][0] + kv[1][1]), kv[0]))
    rows = [
        (name, err, ok, err / (err + ok))
        for name, (err, ok) in top
    ]
    return Table("function_calls", ["function", "errored", "ok", "error_ratio"],
                 rows)


# ---------------------------------------------------------------------------
# model_init_stats


def model_init_stats(doc: DocumentRecord, ruleset: Ruleset) -> Table:
    counts: Counter = Counter()
    seen = set()
    for rec in doc.logs:
        module = _parse_masked(rec.source)
        if module is None:
            continue
        for node in ast.walk(module):
            if not isinstance(node, ast.Call):
                continue
            name = _callee_name(node.func)
            if name not in ruleset.estimator_names:
                continue
            mode = "custom" if (node.args or node.keywords) else "default"
            counts[(name, mode)] += 1
            seen.add(name)
    rows = [(name, mode, count)
            for (name, mode), count in sorted(counts.items())]
    return Table("model_init", ["estimator", "mode", "count"], rows,
                 meta={"unique_estimators": len(seen)})


# ---------------------------------------------------------------------------
# workflow_stats


def workflow_stats(doc: DocumentRecord, ruleset: Ruleset) -> Table:
    features = line_features(doc)
    rows: list[tuple] = [("log_count", "", len(doc.logs))]

    unique_lines = set()
    kw_counts: Counter = Counter()
    for line_id, info in features.items():
        if info.outermost_kind in (BLANK, COMMENT_ONLY):
            continue
        unique_lines.add(doc.line(line_id).text)
        kw_counts.update(info.control_kw)
    rows.append(("unique_line_count", "", len(unique_lines)))

    errored = [rec for rec in doc.logs if rec.status == ERROR]
    kinds = Counter(classify_error_kind(rec) for rec in errored)
    rows.append(("error_log_count", "", len(errored)))
    rows.append(("error_kind", FORMAT, kinds.get(FORMAT, 0)))
    rows.append(("error_kind", EXECUTION, kinds.get(EXECUTION, 0)))

    for kw in sorted(CONTROL_WORDS):
        rows.append(("control_kw", kw, kw_counts.get(kw, 0)))

    libraries: Counter = Counter()
    for module_name, _, _ in extract_imports(doc):
        root = module_name.lstrip(".").split(".")[0] or "."
        libraries[root] += 1
    for library, freq in sorted(libraries.items()):
        rows.append(("import", library, freq))

    if doc.logs:
        first = doc.logs[0].ts_ahead
        previous = None
        sessions = 1
        gap_ms = ruleset.session_gap_minutes * 60_000
        for rec in doc.logs:
            rows.append(("timeline", str(rec.log_id), rec.ts_ahead - first))
            if previous is not None and rec.ts_ahead - previous > gap_ms:
                sessions += 1
            previous = rec.ts_ahead
        rows.append(("session_count", "", sessions))
    else:
        rows.append(("session_count", "", 0))
    return Table("workflow", ["metric", "key", "value"], rows)


# ---------------------------------------------------------------------------
# missing_data_stats


_NA_PROBES = frozenset({"isna", "isnull"})


def _subscript_has_na_mask(node: ast.Subscript) -> bool:
    for sub in ast.walk(node.slice):
        if isinstance(sub, ast.UnaryOp) and isinstance(sub.op, ast.Invert):
            for inner in ast.walk(sub.operand):
                if isinstance(inner, ast.Call) and \
                        _callee_name(inner.func) in _NA_PROBES:
                    return True
    return False


def missing_data_stats(doc: DocumentRecord, ruleset: Ruleset) -> Table:
    counts = {"drop_function": 0, "drop_mask": 0, "fill": 0}
    for rec in doc.logs:
        module = _parse_masked(rec.source)
        if module is None:
            continue
        for node in ast.walk(module):
            if isinstance(node, ast.Call):
                name = _callee_name(node.func)
                if name == "dropna":
                    counts["drop_function"] += 1
                elif name == "fillna":
                    counts["fill"] += 1
            elif isinstance(node, ast.Subscript):
                if _subscript_has_na_mask(node):
                    counts["drop_mask"] += 1
    rows = [(technique, count) for technique, count in sorted(counts.items())]
    return Table("missing_data", ["technique", "count"], rows)


# ---------------------------------------------------------------------------
# Report assembly


RECIPES = {
    "tags": tags_table,
    "segments": segment_distribution,
    "errors": error_resolution,
    "functions": function_error_stats,
    "models": model_init_stats,
    "workflow": workflow_stats,
    "missing": missing_data_stats,
}


def run_recipes(docs: list[DocumentRecord], ruleset: Ruleset,
                recipes: list[str] | None = None) -> AnalysisReport:
    """Per-document tables merged under a leading document_id column."""
    names = list(RECIPES) if recipes is None else list(recipes)
    unknown = set(names) - set(RECIPES)
    if unknown:
        raise RulesetError(f"unknown recipes {sorted(unknown)}")
    tables: dict[str, Table] = {}
    for name in names:
        recipe = RECIPES[name]
        merged: Table | None = None
        for doc in docs:
            table = recipe(doc, ruleset)
            if merged is None:
                merged = Table(table.name, ["document_id"] + table.columns)
            merged.rows.extend((doc.document_id,) + row for row in table.rows)
            if table.meta:
                merged.meta[doc.document_id] = table.meta
        if merged is not None:
            tables[merged.name] = merged
    return AnalysisReport(
        tables=tables,
        document_ids=[d.document_id for d in docs],
        ruleset_digest=ruleset.digest,
    )
