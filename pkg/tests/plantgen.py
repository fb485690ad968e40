"""Generator for traces with planted error/fix pairs at controlled
similarity, plus dissimilar distractors. Ground truth is returned alongside
the document so detector output can be scored exactly.

Similarity control: a pair's error and fix share their identifier tokens
(cosine ~0.89 >= 0.8); any cross-pair combination shares only operator
tokens (cosine < 0.5)."""

from cellscope.logstore import (
    ERROR,
    OK,
    DocumentRecord,
    ErrorInfo,
    ExecutionRecord,
)


def make_resolution_trace(rng, pairs=25, ok_distractors=15, err_distractors=10):
    events = []
    for i in range(pairs):
        events.append(("error", i, f"va{i} = vb{i} + missing{i}"))
        events.append(("fix", i, f"va{i} = vb{i} + 1"))
    for j in range(ok_distractors):
        events.append(("ok", None, f"wa{j} = wb{j} * 2"))
    for j in range(err_distractors):
        events.append(("lost", None, f"xa{j} = xb{j} + boom{j}"))

    # random order, but each fix must come after its own error
    order = []
    pending = list(events)
    emitted_error = set()
    while pending:
        candidates = [
            e for e in pending
            if e[0] != "fix" or e[1] in emitted_error
        ]
        choice = rng.choice(candidates)
        pending.remove(choice)
        if choice[0] == "error":
            emitted_error.add(choice[1])
        order.append(choice)

    logs = []
    error_pos = {}
    expected = []
    for log_id, (kind, pair, source) in enumerate(order):
        if kind in ("error", "lost"):
            status = ERROR
            error = ErrorInfo(ename="NameError",
                              evalue=f"name is not defined ({log_id})",
                              traceback=[f"Cell In[{log_id + 1}], line 1"],
                              failing_line_index=0)
        else:
            status = OK
            error = None
        logs.append(ExecutionRecord(
            log_id=log_id, ts_ahead=log_id * 1000, source=source,
            status=status, ts_reply=log_id * 1000 + 10, error=error))
        if kind == "error":
            error_pos[pair] = log_id
        elif kind == "fix":
            expected.append((error_pos[pair], log_id, log_id - error_pos[pair]))
        elif kind == "lost":
            expected.append((log_id, None, float("inf")))

    expected.sort(key=lambda row: row[0])
    doc = DocumentRecord(document_id="planted", logs=logs)
    return doc, expected
