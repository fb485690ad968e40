"""Query engine: parsing, semantics against a scan oracle, laws."""

import random

import pytest

from cellscope import logstore, query
from cellscope.query import (Contains, Equals, GranularityError, Leaf, Node,
                             QueryParseError, Regex, count_matches, find,
                             parse_query)
from docgen import make_random_document

# -- parsing -----------------------------------------------------------------

def test_parse_nested_and_contains():
    q = parse_query('["AND", (participant_key.ID, 1), (line_key.code, ["CONTAINS", "np"])]')
    assert isinstance(q, Node) and q.op == "AND"
    first, second = q.children
    assert first == Leaf(query.ScopedKey("participant_key", ("ID",)), Equals(1))
    assert second == Leaf(query.ScopedKey("line_key", ("code",)), Contains("np"))


def test_parse_not():
    q = parse_query('["NOT", (log_key.status, "error")]')
    assert q == Node("NOT", (Leaf(query.ScopedKey("log_key", ("status",)),
                                  Equals("error")),))


def test_parse_bare_leaf():
    q = parse_query('(line_key.category, "modeling")')
    assert isinstance(q, Leaf)


def test_parse_regex_matcher():
    q = parse_query('(line_key.code, ["REGEX", "^import"])')
    assert isinstance(q.matcher, Regex)


@pytest.mark.parametrize("text,fragment", [
    ('["XAND", (log_key.status, "ok")]', "unknown operator"),
    ('["NOT", (log_key.status, "ok"), (log_key.status, "error")]', "NOT"),
    ('["AND"]', "AND"),
    ('[]', "empty"),
    ('(bogus_key.code, "x")', "unknown scope"),
    ('(line_key.code, ["FUZZY", "x"])', "unknown matcher"),
    ('(line_key, "x")', "field path"),
    ('(line_key.code, ["REGEX", "(?<=a)b"])', "lookbehind"),
    ('(line_key.code, ["REGEX", "(unclosed"])', "bad regex"),
    ('this is not a query', "unparseable"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(QueryParseError) as exc:
        parse_query(text)
    assert fragment.lower() in str(exc.value).lower()


# -- basic semantics ---------------------------------------------------------

def _doc_with_lines(doc_id, sources):
    doc = logstore.DocumentRecord(document_id=doc_id)
    for i, src in enumerate(sources):
        doc.logs.append(logstore.ExecutionRecord(
            log_id=i, ts_ahead=i * 10, source=src,
            status=logstore.OK, ts_reply=i * 10 + 1))
    return doc


def test_substring_query_selects_matching_lines():
    doc = _doc_with_lines("1", ["import numpy as np\nx=np.ones(3)\ny=1"])
    q = parse_query('["AND", (participant_key.ID, 1), (line_key.code, ["CONTAINS", "np"])]')
    res = find([doc], q)
    assert res.granularity == query.LINE
    assert res.line_ids() == {("1", 0, 0), ("1", 0, 1)}


def test_not_on_empty_universe():
    q = parse_query('["NOT", (line_key.code, ["CONTAINS", "x"])]')
    res = find([], q)
    assert res.documents == []
    assert res.count() == 0


def test_missing_field_is_false_not_error():
    doc = _doc_with_lines("d", ["x = 1"])
    res = find([doc], parse_query('(line_key.nonexistent_tag, "v")'))
    assert res.count() == 0


def test_log_scope_keeps_full_lines():
    doc = _doc_with_lines("d", ["a = 1\nb = 2", "c = 3"])
    res = find([doc], parse_query('(log_key.code, ["CONTAINS", "a"])'))
    assert res.granularity == query.LOG
    assert res.line_ids() == {("d", 0, 0), ("d", 0, 1)}


def test_document_scope_keeps_whole_document():
    doc = _doc_with_lines("d", ["a = 1", "b = 2"])
    doc.meta["cohort"] = "spring"
    res = find([doc], parse_query('(participant_key.cohort, "spring")'))
    assert res.granularity == query.DOCUMENT
    assert res.line_ids() == {("d", 0, 0), ("d", 1, 0)}


def test_document_scope_matches_empty_document():
    doc = logstore.DocumentRecord(document_id="empty")
    doc.meta["cohort"] = "x"
    res = find([doc], parse_query('(participant_key.cohort, "x")'))
    assert res.document_ids() == {"empty"}


def test_ids_preserved_in_sparse_result():
    doc = _doc_with_lines("d", ["skip\nhit", "hit"])
    res = find([doc], parse_query('(line_key.code, "hit")'))
    assert res.line_ids() == {("d", 0, 1), ("d", 1, 0)}
    sparse = res.documents[0]
    assert sparse.logs[0].lines[0].line_index == 1
    assert sparse.logs[0].log_id == 0
    assert sparse.logs[1].log_id == 1


def test_error_fields_addressable():
    doc = _doc_with_lines("d", ["1/0"])
    rec = doc.logs[0]
    rec.status = logstore.ERROR
    rec.error = logstore.ErrorInfo("ZeroDivisionError", "division by zero",
                                   ["Cell In[1], line 1"])
    res = find([doc], parse_query('(log_key.ename, "ZeroDivisionError")'))
    assert res.log_ids() == {("d", 0)}
    res2 = find([doc], parse_query('(log_key.ename, ["CONTAINS", "Division"])'))
    assert res2.log_ids() == {("d", 0)}


def test_env_fields_addressable():
    doc = _doc_with_lines("d", ["x"])
    doc.env.interpreter_version = "3.11.2"
    res = find([doc], parse_query('(participant_key.env.interpreter_version, ["CONTAINS", "3.11"])'))
    assert res.document_ids() == {"d"}


def test_numeric_equality_is_insensitive_to_representation():
    doc = _doc_with_lines("7", ["x"])
    assert find([doc], parse_query('(participant_key.ID, 7)')).count() == 1
    assert find([doc], parse_query('(participant_key.ID, "7")')).count() == 1
    assert find([doc], parse_query('(log_key.ID, 0)')).count() == 1


def test_regex_matching():
    doc = _doc_with_lines("d", ["import numpy\nx = 1\nimportant = 2"])
    res = find([doc], parse_query('(line_key.code, ["REGEX", "^import\\\\b"])'))
    assert res.line_ids() == {("d", 0, 0)}


# -- count_matches -----------------------------------------------------------

def test_count_lines_single_match():
    doc = _doc_with_lines("d", ["a = 1\nplt.plot(a)\nb = 2"])
    q = parse_query('(line_key.code, ["CONTAINS", "plt"])')
    assert count_matches([doc], q) == 1


def test_count_dedups_at_log_granularity():
    doc = _doc_with_lines("d", ["plt.plot(x)\nplt.show()"])
    q = parse_query('(line_key.code, ["CONTAINS", "plt"])')
    assert count_matches([doc], q, query.LINE) == 2
    assert count_matches([doc], q, query.LOG) == 1
    assert count_matches([doc], q, query.DOCUMENT) == 1


def test_count_rejects_finer_granularity():
    doc = _doc_with_lines("d", ["x"])
    q = parse_query('(log_key.status, "ok")')
    with pytest.raises(GranularityError):
        count_matches([doc], q, query.LINE)


# -- random corpus + scan oracle ---------------------------------------------

CATEGORIES = ["auxiliary", "visualization", "modification", "modeling"]


def _plant_meta(doc, rng):
    if rng.random() < 0.7:
        doc.meta["cohort"] = rng.choice(["spring", "fall"])
    for rec in doc.logs:
        if rng.random() < 0.4:
            rec.meta["phase"] = rng.choice(["explore", "model"])
        for ln in rec.lines:
            if rng.random() < 0.4:
                ln.meta["category"] = rng.choice(CATEGORIES)
    return doc


def _corpus(rng, n_docs=6):
    docs = []
    for i in range(n_docs):
        doc = make_random_document(rng, max_logs=8, document_id=str(i))
        docs.append(_plant_meta(doc, rng))
    return docs


def _rand_leaf_text(rng, docs):
    scope = rng.choice(["participant_key", "log_key", "line_key"])
    if scope == "participant_key":
        kind = rng.choice(["id", "cohort", "valid"])
        if kind == "id":
            return f'(participant_key.ID, {rng.randrange(len(docs))})'
        if kind == "cohort":
            return f'(participant_key.cohort, "{rng.choice(["spring", "fall", "winter"])}")'
        return '(participant_key.valid, "true")'
    if scope == "log_key":
        kind = rng.choice(["status", "code", "stdout", "ename", "id", "phase"])
        if kind == "status":
            return f'(log_key.status, "{rng.choice(["ok", "error", "aborted", "pending"])}")'
        if kind == "code":
            return f'(log_key.code, ["CONTAINS", "{rng.choice(["np", "pd", "plot", "fit", "="])}"])'
        if kind == "stdout":
            return f'(log_key.stdout, ["CONTAINS", "{rng.choice(["a", "data", "x"])}"])'
        if kind == "ename":
            return f'(log_key.ename, "{rng.choice(["NameError", "ValueError"])}")'
        if kind == "id":
            return f'(log_key.ID, {rng.randrange(8)})'
        return f'(log_key.phase, "{rng.choice(["explore", "model"])}")'
    kind = rng.choice(["code_contains", "code_regex", "category", "index"])
    if kind == "code_contains":
        return f'(line_key.code, ["CONTAINS", "{rng.choice(["np", "x", "def", "print", "model"])}"])'
    if kind == "code_regex":
        return f'(line_key.code, ["REGEX", "{rng.choice(["^import", "[a-z]+ =", "plot", "f.x."])}"])'
    if kind == "category":
        return f'(line_key.category, "{rng.choice(CATEGORIES)}")'
    return f'(line_key.index, {rng.randrange(4)})'


def _rand_expr_text(rng, docs, depth=0):
    if depth >= 2 or rng.random() < 0.45:
        return _rand_leaf_text(rng, docs)
    op = rng.choice(["AND", "OR", "NOT"])
    if op == "NOT":
        return f'["NOT", {_rand_expr_text(rng, docs, depth + 1)}]'
    n = rng.randint(1, 3)
    parts = ", ".join(_rand_expr_text(rng, docs, depth + 1) for _ in range(n))
    return f'["{op}", {parts}]'


# Independent evaluator: resolves fields straight off the records.

def _oracle_leaf(leaf, doc, rec, ln):
    scope, path = leaf.key.scope, ".".join(leaf.key.path)
    value = None
    if scope == "participant_key":
        if path == "ID":
            value = doc.document_id
        elif path == "valid":
            value = "true" if doc.valid else "false"
        elif path == "cohort":
            value = doc.meta.get("cohort")
        elif path.startswith("env."):
            value = doc.env.to_dict().get(path[4:])
    elif scope == "log_key":
        if path in ("code", "source"):
            value = rec.source
        elif path == "status":
            value = rec.status
        elif path == "stdout":
            value = rec.stdout
        elif path == "ename":
            value = rec.error.ename if rec.error else None
        elif path == "ID":
            value = str(rec.log_id)
        elif path == "phase":
            value = rec.meta.get("phase")
    else:
        if path == "code":
            value = ln.text
        elif path == "category":
            value = ln.meta.get("category")
        elif path == "index":
            value = str(ln.line_index)
    if value is None:
        return False
    value = str(value)
    m = leaf.matcher
    if isinstance(m, Equals):
        return value == str(m.value)
    if isinstance(m, Contains):
        return m.substring in value
    return m.compiled.search(value) is not None


def _oracle_eval(expr, doc, rec, ln):
    if isinstance(expr, Node):
        votes = [_oracle_eval(c, doc, rec, ln) for c in expr.children]
        if expr.op == "AND":
            return all(votes)
        if expr.op == "OR":
            return any(votes)
        return not votes[0]
    return _oracle_leaf(expr, doc, rec, ln)


def _oracle_finest(expr):
    if isinstance(expr, Leaf):
        return {"participant_key": 0, "log_key": 1, "line_key": 2}[expr.key.scope]
    return max(_oracle_finest(c) for c in expr.children)


def _oracle_result(docs, expr):
    finest = _oracle_finest(expr)
    doc_ids, triples = set(), set()
    for doc in docs:
        if finest == 0:
            if _oracle_eval(expr, doc, None, None):
                doc_ids.add(doc.document_id)
                triples |= {(doc.document_id, r.log_id, ln.line_index)
                            for r in doc.logs for ln in r.lines}
        elif finest == 1:
            hit = False
            for rec in doc.logs:
                if _oracle_eval(expr, doc, rec, None):
                    hit = True
                    triples |= {(doc.document_id, rec.log_id, ln.line_index)
                                for ln in rec.lines}
            if hit:
                doc_ids.add(doc.document_id)
        else:
            hit = False
            for rec in doc.logs:
                for ln in rec.lines:
                    if _oracle_eval(expr, doc, rec, ln):
                        hit = True
                        triples.add((doc.document_id, rec.log_id, ln.line_index))
            if hit:
                doc_ids.add(doc.document_id)
    return doc_ids, triples


def test_find_agrees_with_scan_oracle():
    rng = random.Random(77)
    checked = 0
    while checked < 1200:
        docs = _corpus(rng)
        for _ in range(40):
            text = _rand_expr_text(rng, docs)
            q = parse_query(text)
            res = find(docs, q)
            doc_ids, triples = _oracle_result(docs, q)
            assert res.document_ids() == doc_ids, text
            assert res.line_ids() == triples, text
            checked += 1


def test_composition_and_intersection_laws():
    rng = random.Random(99)
    checked = 0
    while checked < 300:
        docs = _corpus(rng)
        for _ in range(20):
            q1 = parse_query(_rand_expr_text(rng, docs))
            q2 = parse_query(_rand_expr_text(rng, docs))
            r1 = find(docs, q1)
            chained = find(r1, q2)
            r2 = find(docs, q2)
            both = find(docs, Node("AND", (q1, q2)))
            assert chained.line_ids() == r1.line_ids() & r2.line_ids()
            assert chained.line_ids() == both.line_ids()
            checked += 1


def test_de_morgan():
    rng = random.Random(5)
    docs = _corpus(rng)
    for _ in range(60):
        a = parse_query(_rand_leaf_text(rng, docs))
        b = parse_query(_rand_leaf_text(rng, docs))
        lhs = find(docs, Node("NOT", (Node("OR", (a, b)),)))
        rhs = find(docs, Node("AND", (Node("NOT", (a,)), Node("NOT", (b,)))))
        assert lhs.line_ids() == rhs.line_ids()
        assert lhs.document_ids() == rhs.document_ids()


def test_result_is_requeryable_storage_shape():
    rng = random.Random(8)
    docs = _corpus(rng)
    res = find(docs, parse_query('(line_key.code, ["CONTAINS", "x"])'))
    for doc in res.documents:
        # sparse structure still carries original ids and real records
        assert isinstance(doc, logstore.DocumentRecord)
        for rec in doc.logs:
            assert rec.lines
    d = res.to_dict()
    assert d["granularity"] == "line"
    assert all("document_id" in item for item in d["documents"])
