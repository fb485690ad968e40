"""Def-use lineage across the execution-ordered logs.

A single pass in execution order keeps a symbol table from each name to its
most recent defining line. Every resolved read adds an edge def_line ->
use_line, so all edges point forward in execution order. Function and
lambda bodies are late-bound: their module-level reads become edges at each
call site, from the definitions current at that moment.
"""

from __future__ import annotations

import ast
import builtins
import warnings
from dataclasses import dataclass, field

from .logstore import DocumentRecord, LineRef, UnresolvedIdError
from .pyast import SyntaxFailure, mask_directives

DEPS = "deps"
DEPENDENTS = "dependents"

_BUILTIN_NAMES = frozenset(dir(builtins))

# Last line of a notebook calling a fit-style method, the usual final
# modeling artifact.
DEFAULT_ARTIFACT_PATTERN = '(line_key.code, ["REGEX", "\\\\.fit\\\\w*\\\\("])'


@dataclass(frozen=True)
class Edge:
    def_line: LineRef
    use_line: LineRef
    symbol: str


@dataclass
class LineageGraph:
    edges: list[Edge] = field(default_factory=list)
    nodes: set[LineRef] = field(default_factory=set)
    # every covered line of a parsed cell -> (log_id, first_line, last_line)
    toplevel_blocks: dict[LineRef, tuple[int, int, int]] = field(default_factory=dict)
    # log_id -> line count, for target validation
    universe: dict[int, int] = field(default_factory=dict)
    # reads of names with no known definition (builtins excluded)
    unresolved: list[tuple[str, LineRef]] = field(default_factory=list)
    in_edges: dict[LineRef, list[Edge]] = field(default_factory=dict)
    out_edges: dict[LineRef, list[Edge]] = field(default_factory=dict)

    def add_edge(self, def_line: LineRef, use_line: LineRef, symbol: str) -> None:
        edge = Edge(def_line, use_line, symbol)
        if edge in self._seen:
            return
        self._seen.add(edge)
        self.edges.append(edge)
        self.nodes.add(def_line)
        self.nodes.add(use_line)
        self.in_edges.setdefault(use_line, []).append(edge)
        self.out_edges.setdefault(def_line, []).append(edge)

    def __post_init__(self):
        self._seen: set[Edge] = set(self.edges)

    def block_lines(self, line: LineRef) -> list[LineRef]:
        span = self.toplevel_blocks.get(line)
        if span is None:
            return [line]
        log_id, start, end = span
        return [(log_id, i) for i in range(start, end + 1)]

    def has_line(self, line: LineRef) -> bool:
        log_id, index = line
        return log_id in self.universe and 0 <= index < self.universe[log_id]


@dataclass
class _SymbolDef:
    line: LineRef
    # late-bound reads for callables (functions, lambdas, classes)
    free: frozenset[str] | None = None


class _Builder:
    def __init__(self):
        self.graph = LineageGraph()
        self.table: dict[str, _SymbolDef] = {}

    # -- use side ------------------------------------------------------------

    def use(self, name: str, line: LineRef) -> None:
        entry = self.table.get(name)
        if entry is None:
            if name not in _BUILTIN_NAMES:
                self.graph.unresolved.append((name, line))
                self.graph.nodes.add(line)
            return
        self.graph.add_edge(entry.line, line, name)

    def visit_uses(self, node: ast.AST, log_id: int, comp_locals: frozenset[str] = frozenset()):
        """Walk an expression adding use edges for every resolved read."""
        if isinstance(node, ast.Name):
            if isinstance(node.ctx, ast.Load) and node.id not in comp_locals:
                self.use(node.id, (log_id, node.lineno - 1))
            return
        if isinstance(node, (ast.Lambda, ast.FunctionDef, ast.AsyncFunctionDef)):
            # Deferred body: reads become edges at call sites.
            return
        if isinstance(node, ast.Call):
            func = node.func
            if isinstance(func, ast.Name) and func.id not in comp_locals:
                entry = self.table.get(func.id)
                if entry is not None and entry.free:
                    call_line = (log_id, node.lineno - 1)
                    for free_name in sorted(entry.free):
                        free_def = self.table.get(free_name)
                        if free_def is not None:
                            self.graph.add_edge(free_def.line, call_line, free_name)
            for child in ast.iter_child_nodes(node):
                self.visit_uses(child, log_id, comp_locals)
            return
        if isinstance(node, (ast.ListComp, ast.SetComp, ast.DictComp, ast.GeneratorExp)):
            inner = set(comp_locals)
            for gen in node.generators:
                self.visit_uses(gen.iter, log_id, frozenset(inner))
                inner |= _target_names(gen.target)
                for cond in gen.ifs:
                    self.visit_uses(cond, log_id, frozenset(inner))
            masked = frozenset(inner)
            if isinstance(node, ast.DictComp):
                self.visit_uses(node.key, log_id, masked)
                self.visit_uses(node.value, log_id, masked)
            else:
                self.visit_uses(node.elt, log_id, masked)
            return
        if isinstance(node, ast.NamedExpr):
            self.visit_uses(node.value, log_id, comp_locals)
            self.bind_target(node.target, log_id)
            return
        for child in ast.iter_child_nodes(node):
            self.visit_uses(child, log_id, comp_locals)

    # -- def side ------------------------------------------------------------

    def bind(self, name: str, line: LineRef, free: frozenset[str] | None = None):
        self.table[name] = _SymbolDef(line, free)
        self.graph.nodes.add(line)

    def bind_target(self, target: ast.AST, log_id: int) -> None:
        if isinstance(target, ast.Name):
            self.bind(target.id, (log_id, target.lineno - 1))
        elif isinstance(target, (ast.Tuple, ast.List)):
            for elt in target.elts:
                self.bind_target(elt, log_id)
        elif isinstance(target, ast.Starred):
            self.bind_target(target.value, log_id)
        elif isinstance(target, (ast.Attribute, ast.Subscript)):
            # Mutating writes count as definitions of the base symbol.
            base = target
            while isinstance(base, (ast.Attribute, ast.Subscript)):
                base = base.value
            if isinstance(base, ast.Name):
                self.bind(base.id, (log_id, base.lineno - 1))

    # -- statements ----------------------------------------------------------

    def process_stmt(self, stmt: ast.stmt, log_id: int) -> None:
        if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef)):
            for deco in stmt.decorator_list:
                self.visit_uses(deco, log_id)
            for default in stmt.args.defaults + [d for d in stmt.args.kw_defaults if d]:
                self.visit_uses(default, log_id)
            self.bind(stmt.name, (log_id, stmt.lineno - 1),
                      free=frozenset(_free_names(stmt)))
        elif isinstance(stmt, ast.ClassDef):
            for deco in stmt.decorator_list:
                self.visit_uses(deco, log_id)
            for base in stmt.bases + [kw.value for kw in stmt.keywords]:
                self.visit_uses(base, log_id)
            self.bind(stmt.name, (log_id, stmt.lineno - 1),
                      free=frozenset(_free_names(stmt)))
        elif isinstance(stmt, ast.Assign):
            if isinstance(stmt.value, ast.Lambda):
                free = frozenset(_free_names(stmt.value))
                for target in stmt.targets:
                    self.visit_uses(target, log_id)
                    if isinstance(target, ast.Name):
                        self.bind(target.id, (log_id, target.lineno - 1), free=free)
                    else:
                        self.bind_target(target, log_id)
            else:
                self.visit_uses(stmt.value, log_id)
                for target in stmt.targets:
                    self.visit_uses(target, log_id)
                    self.bind_target(target, log_id)
        elif isinstance(stmt, ast.AugAssign):
            self.visit_uses(stmt.value, log_id)
            # reads the previous value of its own target
            if isinstance(stmt.target, ast.Name):
                self.use(stmt.target.id, (log_id, stmt.target.lineno - 1))
            else:
                self.visit_uses(stmt.target, log_id)
            self.bind_target(stmt.target, log_id)
        elif isinstance(stmt, ast.AnnAssign):
            if stmt.value is not None:
                self.visit_uses(stmt.value, log_id)
                self.visit_uses(stmt.target, log_id)
                self.bind_target(stmt.target, log_id)
        elif isinstance(stmt, (ast.For, ast.AsyncFor)):
            self.visit_uses(stmt.iter, log_id)
            self.bind_target(stmt.target, log_id)
            for child in stmt.body + stmt.orelse:
                self.process_stmt(child, log_id)
        elif isinstance(stmt, ast.While):
            self.visit_uses(stmt.test, log_id)
            for child in stmt.body + stmt.orelse:
                self.process_stmt(child, log_id)
        elif isinstance(stmt, ast.If):
            self.visit_uses(stmt.test, log_id)
            for child in stmt.body + stmt.orelse:
                self.process_stmt(child, log_id)
        elif isinstance(stmt, (ast.With, ast.AsyncWith)):
            for item in stmt.items:
                self.visit_uses(item.context_expr, log_id)
                if item.optional_vars is not None:
                    self.bind_target(item.optional_vars, log_id)
            for child in stmt.body:
                self.process_stmt(child, log_id)
        elif isinstance(stmt, ast.Try):
            for child in stmt.body:
                self.process_stmt(child, log_id)
            for handler in stmt.handlers:
                if handler.type is not None:
                    self.visit_uses(handler.type, log_id)
                if handler.name:
                    self.bind(handler.name, (log_id, handler.lineno - 1))
                for child in handler.body:
                    self.process_stmt(child, log_id)
            for child in stmt.orelse + stmt.finalbody:
                self.process_stmt(child, log_id)
        elif isinstance(stmt, ast.Import):
            for alias in stmt.names:
                bound = alias.asname or alias.name.split(".")[0]
                self.bind(bound, (log_id, stmt.lineno - 1))
        elif isinstance(stmt, ast.ImportFrom):
            for alias in stmt.names:
                if alias.name == "*":
                    continue
                bound = alias.asname or alias.name
                self.bind(bound, (log_id, stmt.lineno - 1))
        elif isinstance(stmt, ast.Delete):
            for target in stmt.targets:
                if isinstance(target, ast.Name):
                    # deleting a name requires its binding, so it is a use
                    self.use(target.id, (log_id, target.lineno - 1))
                    self.table.pop(target.id, None)
                else:
                    self.visit_uses(target, log_id)
        elif isinstance(stmt, (ast.Global, ast.Nonlocal, ast.Pass,
                               ast.Break, ast.Continue)):
            pass
        else:
            self.visit_uses(stmt, log_id)


def _target_names(target: ast.AST) -> set[str]:
    out = set()
    for node in ast.walk(target):
        if isinstance(node, ast.Name):
            out.add(node.id)
    return out


def _local_bindings(body: list[ast.stmt]) -> set[str]:
    """Names bound by a scope's own statements, nested scopes excluded."""
    bound: set[str] = set()
    declared_global: set[str] = set()

    def collect(node):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            bound.add(node.name)
            return
        if isinstance(node, ast.Lambda):
            return
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            for alias in node.names:
                if alias.name != "*":
                    bound.add(alias.asname or alias.name.split(".")[0])
            return
        if isinstance(node, ast.Global):
            declared_global.update(node.names)
            return
        if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Store):
            bound.add(node.id)
        for child in ast.iter_child_nodes(node):
            collect(child)

    for stmt in body:
        collect(stmt)
    return bound - declared_global


def _free_names(node: ast.AST) -> set[str]:
    """Module-level names a function/lambda/class body reads: loads not
    bound by parameters or local assignments, nested scopes included."""

    def scope_free(body_nodes, params: set[str]) -> set[str]:
        bound = set(params)
        free: set[str] = set()

        def visit(n, local_bound):
            if isinstance(n, (ast.FunctionDef, ast.AsyncFunctionDef)):
                local_bound.add(n.name)
                free.update(scope_free(n.body, _params_of(n) | set(local_bound)))
                for deco in n.decorator_list:
                    visit(deco, local_bound)
                for default in n.args.defaults + [d for d in n.args.kw_defaults if d]:
                    visit(default, local_bound)
                return
            if isinstance(n, ast.Lambda):
                free.update(scope_free([ast.Expr(n.body)],
                                       _params_of(n) | set(local_bound)))
                return
            if isinstance(n, ast.ClassDef):
                local_bound.add(n.name)
                free.update(scope_free(n.body, set(local_bound)))
                return
            if isinstance(n, ast.Name):
                if isinstance(n.ctx, ast.Store):
                    local_bound.add(n.id)
                elif isinstance(n.ctx, ast.Load) and n.id not in local_bound:
                    free.add(n.id)
                return
            if isinstance(n, (ast.Import, ast.ImportFrom)):
                for alias in n.names:
                    if alias.name != "*":
                        local_bound.add(alias.asname or alias.name.split(".")[0])
                return
            if isinstance(n, (ast.ListComp, ast.SetComp, ast.DictComp,
                              ast.GeneratorExp)):
                comp_bound = set(local_bound)
                for gen in n.generators:
                    visit(gen.iter, comp_bound)
                    comp_bound |= _target_names(gen.target)
                    for cond in gen.ifs:
                        visit(cond, comp_bound)
                if isinstance(n, ast.DictComp):
                    visit(n.key, comp_bound)
                    visit(n.value, comp_bound)
                else:
                    visit(n.elt, comp_bound)
                return
            for child in ast.iter_child_nodes(n):
                visit(child, local_bound)

        # two passes: assignments anywhere in the scope bind the whole scope
        pre_bound = bound | _local_bindings(
            [s for s in body_nodes if isinstance(s, ast.stmt)])
        for item in body_nodes:
            visit(item, pre_bound)
        return free - _BUILTIN_NAMES

    if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return scope_free(node.body, _params_of(node))
    if isinstance(node, ast.Lambda):
        return scope_free([ast.Expr(node.body)], _params_of(node))
    if isinstance(node, ast.ClassDef):
        return scope_free(node.body, set())
    return set()


def _params_of(fn) -> set[str]:
    args = fn.args
    names = [a.arg for a in args.posonlyargs + args.args + args.kwonlyargs]
    if args.vararg:
        names.append(args.vararg.arg)
    if args.kwarg:
        names.append(args.kwarg.arg)
    return set(names)


# ---------------------------------------------------------------------------
# Public operations


def build_lineage(doc: DocumentRecord, up_to_log: int | None = None) -> LineageGraph:
    builder = _Builder()
    graph = builder.graph
    for rec in doc.logs:
        if up_to_log is not None and rec.log_id > up_to_log:
            continue
        graph.universe[rec.log_id] = len(rec.lines)
        masked, _ = mask_directives(rec.source)
        try:
            module = ast.parse(masked)
        except SyntaxError:
            continue
        for stmt in module.body:
            start = stmt.lineno - 1
            for deco in getattr(stmt, "decorator_list", []):
                start = min(start, deco.lineno - 1)
            end = (stmt.end_lineno or stmt.lineno) - 1
            for i in range(start, end + 1):
                graph.toplevel_blocks[(rec.log_id, i)] = (rec.log_id, start, end)
            builder.process_stmt(stmt, rec.log_id)
    return graph


def lineage_query(graph: LineageGraph, target: LineRef, direction: str,
                  direct_only: bool = False,
                  include_toplevel: bool = False) -> list[LineRef]:
    """Lines the target depends on (deps) or that depend on it
    (dependents); transitive unless direct_only; optionally expanded to
    whole top-level blocks. Sorted in execution order."""
    if direction not in (DEPS, DEPENDENTS):
        raise ValueError(f"direction must be {DEPS!r} or {DEPENDENTS!r}")
    target = (int(target[0]), int(target[1]))
    if not graph.has_line(target):
        raise UnresolvedIdError(f"line {target} not in document")
    index = graph.in_edges if direction == DEPS else graph.out_edges

    def neighbors(line):
        if direction == DEPS:
            return [e.def_line for e in index.get(line, [])]
        return [e.use_line for e in index.get(line, [])]

    reached: set[LineRef] = set()
    if direct_only:
        reached.update(neighbors(target))
    else:
        frontier = list(neighbors(target))
        while frontier:
            line = frontier.pop()
            if line in reached:
                continue
            reached.add(line)
            frontier.extend(neighbors(line))
    reached.discard(target)
    if include_toplevel:
        expanded: set[LineRef] = set()
        for line in reached:
            expanded.update(graph.block_lines(line))
        expanded.discard(target)
        reached = expanded
    return sorted(reached)


def executable_slice(graph: LineageGraph, targets, include_toplevel: bool = True
                     ) -> list[LineRef]:
    """Fixpoint of block expansion and dependency closure: every returned
    block's own reads are satisfied by other returned lines. This is the
    replayable slice; lineage_query expands blocks only after closure."""
    included: set[LineRef] = set()
    frontier: list[LineRef] = []
    for target in targets:
        frontier.extend(graph.block_lines(target) if include_toplevel else [target])
    while frontier:
        line = frontier.pop()
        if line in included:
            continue
        included.add(line)
        for edge in graph.in_edges.get(line, []):
            block = (graph.block_lines(edge.def_line)
                     if include_toplevel else [edge.def_line])
            frontier.extend(l for l in block if l not in included)
    return sorted(included)


def parent_distances(graph: LineageGraph) -> list[int]:
    """Per-edge log distance useminus def, for histogramming."""
    return sorted(edge.use_line[0] - edge.def_line[0] for edge in graph.edges)


def final_artifact_slice(doc: DocumentRecord, artifact_pattern=None
                         ) -> list[LineRef]:
    """Transitive, block-expanded deps of the last artifact-producing line
    (default: the last fit-style call), including that line's own block."""
    from . import query as q
    if artifact_pattern is None:
        artifact_pattern = q.parse_query(DEFAULT_ARTIFACT_PATTERN)
    elif isinstance(artifact_pattern, str):
        artifact_pattern = q.parse_query(artifact_pattern)
    res = q.find([doc], artifact_pattern, granularity=q.LINE)
    anchors = [(log_id, idx) for (did, log_id, idx) in res.line_ids()
               if did == doc.document_id]
    if not anchors:
        warnings.warn("no line matches the artifact pattern; empty slice",
                      stacklevel=2)
        return []
    anchor = max(anchors)
    graph = build_lineage(doc, up_to_log=anchor[0])
    return executable_slice(graph, [anchor], include_toplevel=True)
