"""BLEU-4, ROUGE-L, PARENT and PARENT-T over whitespace/punctuation tokens.

PARENT uses the word-overlap entailment model: an n-gram is entailed by the
table in proportion to how many of its tokens occur among the table's
attribute and value tokens.

Conventions shared by every geometric mean here: an n-gram order with no
n-grams to count (zero denominator) contributes 1.0, and a zero numerator
is replaced by ``EPS``.
"""
from __future__ import annotations

import json
import math
from collections import Counter

import numpy as np

from .numkernel.backend import kernels
from .table import E_CLS, E_SEP, SEP, Table, TableError, read_jsonl, split_tokens

EPS = 1e-9
MAX_N = 4


class EvalError(ValueError):
    pass


def text_tokens(text):
    """Metric tokenization: table-core tokens without boundary markers or [SEP]."""
    return [t for t in split_tokens(text) if t not in (E_CLS, E_SEP, SEP)]


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def lcs(a, b):
    """Longest common subsequence length of two token lists."""
    if not a or not b:
        return 0
    ids = {}
    ia = np.array([ids.setdefault(t, len(ids)) for t in a], dtype=np.int64)
    ib = np.array([ids.setdefault(t, len(ids)) for t in b], dtype=np.int64)
    return int(kernels.lcs_length(ia, ib))


def _ratio(num, den):
    if den == 0:
        return 1.0
    return num / den if num > 0 else EPS / den


def _geo(values):
    return math.exp(math.fsum(math.log(max(v, EPS)) for v in values) / len(values))


def _mean(values):
    return math.fsum(values) / len(values) if values else 0.0


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def bleu4(pairs):
    """Corpus BLEU-4 over ``(pred_tokens, ref_tokens)`` pairs."""
    if not pairs:
        raise EvalError("empty corpus")
    match = [0] * MAX_N
    total = [0] * MAX_N
    c_len = r_len = 0
    for pred, ref in pairs:
        c_len += len(pred)
        r_len += len(ref)
        for n in range(1, MAX_N + 1):
            cp, cr = ngrams(pred, n), ngrams(ref, n)
            match[n - 1] += sum(min(c, cr[g]) for g, c in cp.items())
            total[n - 1] += sum(cp.values())
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * _geo([_ratio(m, t) for m, t in zip(match, total)])


def rouge_l(pairs):
    """Mean per-pair LCS F-measure."""
    if not pairs:
        raise EvalError("empty corpus")
    return _mean([rouge_l_pair(p, r) for p, r in pairs])


def rouge_l_pair(pred, ref):
    if not pred or not ref:
        return 0.0
    k = lcs(pred, ref)
    return _f1(k / len(pred), k / len(ref))


def _weights(table_tokens):
    return lambda g: sum(t in table_tokens for t in g) / len(g)


def table_recall(pred, table):
    return _mean([lcs(list(s.value), pred) / len(s.value) for s in table.slots])


def parent_example(pred, ref, table, lam=0.5):
    """(P, R, F) of one prediction against its reference and table."""
    w = _weights(table.token_set())
    precs, recs = [], []
    for n in range(1, MAX_N + 1):
        cp, cr = ngrams(pred, n), ngrams(ref, n)
        num = 0.0
        for g, c in cp.items():
            m = min(c, cr[g])
            num += m + (c - m) * w(g)
        precs.append(_ratio(num, sum(cp.values())))
        rnum = math.fsum(min(c, cp[g]) * w(g) for g, c in cr.items())
        rden = math.fsum(c * w(g) for g, c in cr.items())
        recs.append(_ratio(rnum, rden))
    p = _geo(precs)
    r = _geo(recs) ** lam * table_recall(pred, table) ** (1 - lam)
    return p, r, _f1(p, r)


def parent_t_example(pred, table):
    """(P, R, F) of one prediction against its table only."""
    w = _weights(table.token_set())
    precs = []
    for n in range(1, MAX_N + 1):
        cp = ngrams(pred, n)
        precs.append(_ratio(math.fsum(c * w(g) for g, c in cp.items()), sum(cp.values())))
    p = _geo(precs)
    r = table_recall(pred, table)
    return p, r, _f1(p, r)


def _corpus(scores):
    return {k: _mean([s[i] for s in scores]) for i, k in enumerate("prf")}


def parent(triples, lam=0.5):
    """Corpus PARENT over ``(pred_tokens, ref_tokens, table)``; mean of per-example scores."""
    if not triples:
        raise EvalError("empty corpus")
    return _corpus([parent_example(p, r, t, lam) for p, r, t in triples])


def parent_t(pairs):
    """Corpus PARENT-T over ``(pred_tokens, table)``."""
    if not pairs:
        raise EvalError("empty corpus")
    return _corpus([parent_t_example(p, t) for p, t in pairs])


def read_predictions(path):
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = str(obj["id"])
                # a gold file doubles as a prediction file
                text = obj["prediction"] if "prediction" in obj else obj["reference"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EvalError(f"{path}:{lineno}: {exc}") from None
            if key in preds:
                raise EvalError(f"{path}:{lineno}: duplicate id {key!r}")
            preds[key] = text
    return preds


def evaluate(records, lam=0.5):
    """Score ``(id, pred_text, ref_text, table)`` records; returns the report dict.

    Records are sorted by id first so corpus scores do not depend on input order.
    """
    records = sorted(records, key=lambda r: r[0])
    if not records:
        raise EvalError("nothing to evaluate")
    rows = [(i, text_tokens(p), text_tokens(r), t) for i, p, r, t in records]
    examples = []
    for i, pred, ref, table in rows:
        pp = parent_example(pred, ref, table, lam)
        pt = parent_t_example(pred, table)
        examples.append({"id": i, "rouge_l": rouge_l_pair(pred, ref),
                         "parent_f": pp[2], "parent_t_f": pt[2]})
    return {
        "bleu4": bleu4([(p, r) for _, p, r, _ in rows]),
        "rouge_l": rouge_l([(p, r) for _, p, r, _ in rows]),
        "parent": parent([(p, r, t) for _, p, r, t in rows], lam),
        "parent_t": parent_t([(p, t) for _, p, _, t in rows]),
        "examples": examples,
    }


def evaluate_file(pred_path, gold_path, lam=0.5):
    """Join predictions to gold pairs by id and score them."""
    preds = read_predictions(pred_path)
    try:
        gold = read_jsonl(gold_path)
    except TableError as exc:
        raise EvalError(str(exc)) from None
    gold_ids = {g.id for g in gold}
    missing = sorted(gold_ids - preds.keys())
    extra = sorted(preds.keys() - gold_ids)
    if missing or extra:
        raise EvalError(f"id mismatch; no prediction for {missing}, no gold for {extra}")
    no_ref = [g.id for g in gold if g.reference is None]
    if no_ref:
        raise EvalError(f"gold examples without a reference: {no_ref}")
    return evaluate([(g.id, preds[g.id], g.reference, g.table) for g in gold], lam)


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


__all__ = ["EPS", "EvalError", "bleu4", "evaluate", "evaluate_file", "lcs", "ngrams",
           "parent", "parent_example", "parent_t", "parent_t_example", "rouge_l", "rouge_l_pair",
           "table_recall", "text_tokens", "write_report"]
