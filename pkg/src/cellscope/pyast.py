"""Syntax trees and line-granularity syntactic features for logged cells.

Cells are Python source, possibly with notebook directive lines (%magic,
!shell, %%cell directives). Directive lines are masked to placeholders
before parsing so the remaining Python still parses with original line
numbers; the masked lines are tagged non_python.
"""

from __future__ import annotations

import ast
import io
import tokenize
from dataclasses import dataclass, field

from .logstore import DocumentRecord, ExecutionRecord, FORMAT_ERROR_NAMES, split_lines

BLANK = "blank"
COMMENT_ONLY = "comment_only"
NON_PYTHON = "non_python"
CONTINUATION = "continuation"

# Node kinds counted as one operation each when they start on a line.
OP_KINDS = frozenset({"Call", "BinOp", "Compare", "Subscript", "Attribute"})

CONTROL_WORDS = frozenset({"def", "if", "for", "while", "with", "try", "lambda"})

FORMAT = "format"
EXECUTION = "execution"
NONE = "none"


@dataclass
class SyntaxNode:
    kind: str
    start_line: int
    start_col: int
    end_line: int
    end_col: int
    children: list["SyntaxNode"] = field(default_factory=list)
    # Statement-like nodes (incl. except handlers) are the only candidates
    # for a line's outermost kind; expression fragments on later lines of a
    # multi-line statement read as continuation.
    is_stmt: bool = False
    # Line of the statement keyword itself. start_line may be earlier when
    # the span was widened over decorators.
    stmt_line: int = -1

    def covers_line(self, line: int) -> bool:
        return self.start_line <= line <= self.end_line


@dataclass
class SyntaxTree:
    root: SyntaxNode
    source: str
    masked_lines: frozenset[int]
    module: ast.Module

    @property
    def line_count(self) -> int:
        return len(split_lines(self.source))


@dataclass
class SyntaxFailure:
    error_line: int
    message: str


def mask_directives(source: str) -> tuple[str, frozenset[int]]:
    """Replace %magic / !shell / %%cell-directive lines with pass
    placeholders, keeping indentation and line count."""
    out = []
    masked = set()
    for i, line in enumerate(split_lines(source)):
        stripped = line.lstrip()
        if stripped.startswith("%") or stripped.startswith("!"):
            indent = line[:len(line) - len(stripped)]
            out.append(indent + "pass")
            masked.add(i)
        else:
            out.append(line)
    return "\n".join(out), frozenset(masked)


def _convert(node: ast.AST) -> list[SyntaxNode]:
    if hasattr(node, "lineno"):
        children = []
        for child in ast.iter_child_nodes(node):
            children.extend(_convert(child))
        own = SyntaxNode(type(node).__name__,
                         node.lineno - 1, node.col_offset,
                         (node.end_lineno or node.lineno) - 1,
                         node.end_col_offset or node.col_offset,
                         children,
                         is_stmt=isinstance(node, (ast.stmt, ast.excepthandler)),
                         stmt_line=node.lineno - 1)
        # Decorators precede the def keyword; widen so spans nest.
        for child in children:
            if child.start_line < own.start_line:
                own.start_line, own.start_col = child.start_line, child.start_col
            if child.end_line > own.end_line:
                own.end_line, own.end_col = child.end_line, child.end_col
        return [own]
    out = []
    for child in ast.iter_child_nodes(node):
        out.extend(_convert(child))
    return out


def parse_cell(source: str) -> SyntaxTree | SyntaxFailure:
    masked, masked_lines = mask_directives(source)
    try:
        module = ast.parse(masked)
    except SyntaxError as exc:
        return SyntaxFailure(error_line=(exc.lineno or 1) - 1,
                             message=exc.msg or "invalid syntax")
    except (ValueError, MemoryError, RecursionError) as exc:
        return SyntaxFailure(error_line=0, message=str(exc))
    children = []
    for stmt in module.body:
        children.extend(_convert(stmt))
    last_line = len(split_lines(source)) - 1
    root = SyntaxNode("Module", 0, 0, last_line, 0, children)
    return SyntaxTree(root=root, source=source, masked_lines=masked_lines,
                      module=module)


def _unwrap_expr(node: SyntaxNode) -> str:
    if node.kind == "Expr" and node.children:
        return node.children[0].kind
    return node.kind


def line_outermost(tree: SyntaxTree, line_index: int) -> str:
    """Kind of the shallowest node starting on the line; textual kinds for
    directive/blank/comment lines; continuation when only covered."""
    if not 0 <= line_index < tree.line_count:
        raise IndexError(f"line {line_index} out of range")
    if line_index in tree.masked_lines:
        return NON_PYTHON
    text = split_lines(tree.source)[line_index]
    if not text.strip():
        return BLANK
    if text.lstrip().startswith("#"):
        return COMMENT_ONLY

    def search(node: SyntaxNode) -> SyntaxNode | None:
        for child in node.children:
            if child.is_stmt and child.stmt_line == line_index:
                return child
            if child.covers_line(line_index):
                found = search(child)
                if found is not None:
                    return found
        return None

    found = search(tree.root)
    if found is not None:
        return _unwrap_expr(found)
    if any(c.covers_line(line_index) for c in tree.root.children):
        return CONTINUATION
    return NON_PYTHON


def cell_line_kinds(source: str) -> list[str]:
    """Per-line outermost kinds for one cell; parse failures tag every
    non-blank, non-comment line non_python."""
    lines = split_lines(source)
    tree = parse_cell(source)
    if isinstance(tree, SyntaxFailure):
        kinds = []
        for text in lines:
            if not text.strip():
                kinds.append(BLANK)
            elif text.lstrip().startswith("#"):
                kinds.append(COMMENT_ONLY)
            else:
                kinds.append(NON_PYTHON)
        return kinds
    return [line_outermost(tree, i) for i in range(len(lines))]


# ---------------------------------------------------------------------------
# Imports and function definitions


def _import_entries(module: ast.Module, log_id: int):
    out = []
    for node in ast.walk(module):
        if isinstance(node, ast.Import):
            for alias in node.names:
                bound = alias.asname or alias.name.split(".")[0]
                out.append((alias.name, bound, (log_id, node.lineno - 1)))
        elif isinstance(node, ast.ImportFrom):
            module_name = "." * node.level + (node.module or "")
            for alias in node.names:
                bound = alias.asname or alias.name
                out.append((module_name, bound, (log_id, node.lineno - 1)))
    return out


def iter_parsed_logs(doc: DocumentRecord, up_to_log: int | None = None):
    for rec in doc.logs:
        if up_to_log is not None and rec.log_id > up_to_log:
            continue
        tree = parse_cell(rec.source)
        if isinstance(tree, SyntaxFailure):
            continue
        yield rec, tree


def extract_imports(doc: DocumentRecord, up_to_log: int | None = None
                    ) -> list[tuple[str, str, tuple[int, int]]]:
    """(module, bound name, line_id) for every import binding, duplicates
    kept in execution order."""
    out = []
    for rec, tree in iter_parsed_logs(doc, up_to_log):
        out.extend(sorted(_import_entries(tree.module, rec.log_id),
                          key=lambda e: e[2]))
    return out


def extract_function_defs(doc: DocumentRecord, up_to_log: int | None = None,
                          include_classes: bool = False
                          ) -> list[tuple[str, str, tuple[int, int, int]]]:
    """Top-level definitions as (name, source slice, (log_id, first_line,
    last_line)); redefinitions retained in order."""
    kinds: tuple = (ast.FunctionDef, ast.AsyncFunctionDef)
    if include_classes:
        kinds = kinds + (ast.ClassDef,)
    out = []
    for rec, tree in iter_parsed_logs(doc, up_to_log):
        lines = split_lines(rec.source)
        for node in tree.module.body:
            if not isinstance(node, kinds):
                continue
            start = node.lineno - 1
            for deco in node.decorator_list:
                start = min(start, deco.lineno - 1)
            end = (node.end_lineno or node.lineno) - 1
            text = "\n".join(lines[start:end + 1])
            out.append((node.name, text, (rec.log_id, start, end)))
    return out


# ---------------------------------------------------------------------------
# Line features


@dataclass
class LineSyntaxInfo:
    line_id: tuple[int, int]
    outermost_kind: str
    op_count: int = 0
    control_kw: set[str] = field(default_factory=set)
    comment: str | None = None
    code_no_comment: str = ""
    in_function: bool = False
    in_loop: bool = False


def _count_ops(root: SyntaxNode, counts: dict[int, int]) -> None:
    for child in root.children:
        if child.kind in OP_KINDS:
            counts[child.start_line] = counts.get(child.start_line, 0) + 1
        _count_ops(child, counts)


def _collect_spans(root: SyntaxNode, kinds: frozenset[str]) -> list[tuple[int, int]]:
    out = []

    def walk(node):
        for child in node.children:
            if child.kind in kinds:
                out.append((child.start_line, child.end_line))
            walk(child)

    walk(root)
    return out


_FUNC_KINDS = frozenset({"FunctionDef", "AsyncFunctionDef", "Lambda"})
_LOOP_KINDS = frozenset({"For", "AsyncFor", "While"})


def _tokenize_cell(masked_source: str):
    try:
        return list(tokenize.generate_tokens(io.StringIO(masked_source).readline))
    except (tokenize.TokenError, IndentationError, SyntaxError):
        return []


def cell_line_features(source: str, log_id: int) -> list[LineSyntaxInfo]:
    lines = split_lines(source)
    kinds = cell_line_kinds(source)
    infos = [LineSyntaxInfo(line_id=(log_id, i), outermost_kind=kinds[i],
                            code_no_comment=lines[i])
             for i in range(len(lines))]

    masked, masked_lines = mask_directives(source)
    for tok in _tokenize_cell(masked):
        row = tok.start[0] - 1
        if row >= len(infos) or row in masked_lines:
            continue
        # Unmasked lines are byte-identical to the original, so token
        # columns index the original text directly.
        if tok.type == tokenize.COMMENT:
            col = tok.start[1]
            infos[row].comment = lines[row][col:]
            infos[row].code_no_comment = lines[row][:col].rstrip()
        elif tok.type == tokenize.NAME and tok.string in CONTROL_WORDS:
            infos[row].control_kw.add(tok.string)

    tree = parse_cell(source)
    if isinstance(tree, SyntaxFailure):
        return infos
    counts: dict[int, int] = {}
    _count_ops(tree.root, counts)
    for i, info in enumerate(infos):
        info.op_count = counts.get(i, 0)
        if info.outermost_kind == BLANK:
            info.op_count = 0
    for start, end in _collect_spans(tree.root, _FUNC_KINDS):
        for i in range(start, min(end, len(infos) - 1) + 1):
            infos[i].in_function = True
    for start, end in _collect_spans(tree.root, _LOOP_KINDS):
        for i in range(start, min(end, len(infos) - 1) + 1):
            infos[i].in_loop = True
    return infos


def line_features(doc: DocumentRecord) -> dict[tuple[int, int], LineSyntaxInfo]:
    """LineSyntaxInfo for every line of every log, keyed by line_id."""
    out: dict[tuple[int, int], LineSyntaxInfo] = {}
    for rec in doc.logs:
        for info in cell_line_features(rec.source, rec.log_id):
            out[info.line_id] = info
    return out


def classify_error_kind(rec: ExecutionRecord) -> str:
    """format for syntax-class errors, execution for the rest, none when
    the record did not error."""
    if rec.status != "error" or rec.error is None:
        return NONE
    if rec.error.ename in FORMAT_ERROR_NAMES:
        return FORMAT
    return EXECUTION
