"""Autoregressive generation with per-hypothesis slot memory.

The search is written against a small scorer protocol so that the beam logic
can be checked on toy distributions:

* ``initial()`` -> state
* ``log_probs(state)`` -> float64 array over the vocabulary (``-inf`` = banned)
* ``advance(state, token)`` -> new state
* ``is_final(state)`` -> bool
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .masks import build_masks
from .model import SlotContext, extract_history, init_memory, update_memory
from .numkernel import Tensor, log_softmax_np
from .table import (
    CLS_ID,
    E_CLS,
    E_CLS_ID,
    E_SEP,
    E_SEP_ID,
    MASK_ID,
    NO_SLOT,
    PAD_ID,
    SEP_ID,
    encode_table,
    match_span,
    read_jsonl,
    write_jsonl,
)

log = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    tokens: tuple = ()
    logprob: float = 0.0
    step_logprobs: tuple = ()
    states: tuple = ()          # memory after 0, 1, ... updates
    events: tuple = ()          # (target position of [E_SEP], slot)
    spans: tuple = ()           # closed (start, end, slot) value spans
    open_at: int | None = None  # target position of the open [E_CLS]
    finished: bool = False
    truncated: bool = False

    @property
    def n_updates(self):
        return max(len(self.states) - 1, 0)

    def __len__(self):
        return len(self.tokens)


class AMGScorer:
    """Scores next tokens for one table with a trained model."""

    def __init__(self, model, frozen, table_encoding, max_tgt=None):
        self.model = model
        self.frozen = frozen
        self.enc = table_encoding
        cfg = model.config
        self.max_tgt = cfg.max_tgt if max_tgt is None else min(max_tgt, cfg.max_tgt)
        self.memory = None
        if cfg.slot_layers > 0:
            self.memory = init_memory(table_encoding, frozen, cfg.slot_n)
        self._his_cache = {}
        self.update_calls = 0

    def initial(self):
        states = (self.memory.M,) if self.memory is not None else ()
        return Hypothesis(states=states)

    def is_final(self, hyp):
        return hyp.finished

    def _labels(self, hyp):
        """Slot label per target position plus the label of the next position."""
        labels = np.full(len(hyp.tokens), NO_SLOT, dtype=np.int64)
        for a, b, j in hyp.spans:
            labels[a:b] = j
        nxt = NO_SLOT
        if hyp.open_at is not None and len(hyp.tokens) > hyp.open_at + 1:
            span = np.asarray(hyp.tokens[hyp.open_at + 1:])
            j, overlap = match_span(span, self.enc)
            if overlap > 0:
                labels[hyp.open_at + 1:] = j
                nxt = j
        return labels, nxt

    def inputs(self, hyp):
        """Forward inputs with a [MASK] appended at the next target position."""
        src_len = len(self.enc)
        tgt = np.array(list(hyp.tokens) + [MASK_ID], dtype=np.int64)
        labels, nxt = self._labels(hyp)
        tgt_labels = np.concatenate([labels, [nxt]])
        mask_ta, mask_slot = build_masks(src_len, tgt_labels)
        ids = np.concatenate([self.enc.token_ids, tgt])
        ctx = None
        if self.memory is not None:
            scatter = np.concatenate([self.enc.slot_of, labels, [NO_SLOT]])
            row_state = np.zeros(len(ids), dtype=np.int64)
            # with memory frozen, closed spans produce no new state to advance to
            for pos, _ in hyp.events[:len(hyp.states) - 1]:
                row_state[src_len + pos + 1:] += 1
            ctx = SlotContext([Tensor(s) for s in hyp.states], row_state, scatter)
        return ids, src_len, mask_ta, mask_slot, ctx

    def log_probs(self, hyp):
        ids, src_len, mask_ta, mask_slot, ctx = self.inputs(hyp)
        with nk.no_grad():
            logits = self.model.forward(ids, src_len, mask_ta, mask_slot, ctx)
        lp = log_softmax_np(logits.data[0].astype(np.float64))
        lp[[PAD_ID, CLS_ID, MASK_ID]] = -np.inf
        if hyp.open_at is None:
            lp[E_SEP_ID] = -np.inf
        else:
            lp[E_CLS_ID] = -np.inf
            if len(hyp.tokens) == hyp.open_at + 1:
                lp[E_SEP_ID] = -np.inf
        return lp

    def history(self, span):
        key = tuple(int(t) for t in span)
        if key not in self._his_cache:
            self._his_cache[key] = extract_history(np.asarray(key), self.enc, self.frozen).his
        return self._his_cache[key]

    def advance(self, hyp, token, logprob=0.0):
        token = int(token)
        pos = len(hyp.tokens)
        tokens = hyp.tokens + (token,)
        states, events, spans, open_at = hyp.states, hyp.events, hyp.spans, hyp.open_at
        if token == E_CLS_ID:
            open_at = pos
        elif token == E_SEP_ID and open_at is not None:
            span = np.asarray(tokens[open_at + 1:pos])
            j, _ = match_span(span, self.enc)
            spans = spans + ((open_at + 1, pos, j),)
            events = events + ((pos, j),)
            open_at = None
            if self.memory is not None and self.model.config.memory_enabled:
                with nk.no_grad():
                    new = update_memory(self.model.params, Tensor(states[-1]), self.history(span),
                                        self.memory.n_active)
                self.update_calls += 1
                states = states + (new.data,)
        finished = token == SEP_ID
        truncated = False
        if not finished and len(tokens) >= self.max_tgt:
            finished = truncated = True
        return Hypothesis(tokens, hyp.logprob + logprob, hyp.step_logprobs + (logprob,), states,
                          events, spans, open_at, finished, truncated)


def final_score(hyp, length_penalty):
    return hyp.logprob / (max(len(hyp), 1) ** length_penalty)


def _rank_key(hyp, length_penalty):
    return (-final_score(hyp, length_penalty), len(hyp), hyp.tokens)


def beam_search(scorer, beam_size=3, length_penalty=1.0, return_all=False):
    """Shrinking-beam search; returns the best finished hypothesis.

    At each step the ``beam_size`` best extensions (by accumulated
    log-probability) are kept; those that finish leave the beam. Finished
    hypotheses are ranked by ``logprob / len ** length_penalty``, ties going
    to the shorter and then the lexicographically smaller sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    alive = [scorer.initial()]
    finished = []
    while alive:
        cands = []
        for hyp in alive:
            lp = scorer.log_probs(hyp)
            k = min(beam_size, int(np.isfinite(lp).sum()))
            for tok in np.argsort(-lp, kind="stable")[:k]:
                cands.append((hyp.logprob + float(lp[tok]), hyp.tokens + (int(tok),), hyp,
                              float(lp[tok])))
        cands.sort(key=lambda c: (-c[0], len(c[1]), c[1]))
        alive = []
        for _, tokens, hyp, lp in cands[:beam_size]:
            nxt = scorer.advance(hyp, tokens[-1], lp)
            (finished if scorer.is_final(nxt) else alive).append(nxt)
    finished.sort(key=lambda h: _rank_key(h, length_penalty))
    if return_all:
        return finished
    return finished[0] if finished else None


def greedy(scorer):
    return beam_search(scorer, beam_size=1)


@dataclass
class Decoded:
    tokens: list
    text: str
    logprob: float
    score: float
    truncated: bool = False
    malformed: bool = False
    n_updates: int = 0
    reopened: list = field(default_factory=list)


def surface(hyp, vocab):
    """Output tokens without [SEP], boundary markers, or an unclosed span."""
    toks = list(hyp.tokens)
    if toks and toks[-1] == SEP_ID:
        toks = toks[:-1]
    malformed = hyp.open_at is not None
    if malformed:
        toks = toks[:hyp.open_at]
    words = [w for w in vocab.decode(toks) if w not in (E_CLS, E_SEP)]
    return words, malformed


def decode_table(model, frozen, vocab, table, beam_size=3, length_penalty=1.0, max_tgt=None):
    enc = encode_table(table, vocab, model.config.max_src, model.config.slot_n)
    scorer = AMGScorer(model, frozen, enc, max_tgt)
    best = beam_search(scorer, beam_size, length_penalty)
    words, malformed = surface(best, vocab)
    slots = [j for _, j in best.events]
    reopened = sorted({j for i, j in enumerate(slots) if j in slots[:i]})
    return Decoded(list(best.tokens), " ".join(words), best.logprob,
                   final_score(best, length_penalty), best.truncated, malformed,
                   best.n_updates, reopened)


def generate_file(model, frozen, vocab, in_path, out_path, beam_size=3, length_penalty=1.0,
                  max_tgt=None, stage=None):
    """Decode every table of a JSONL file; writes one {"id", "prediction"} row per line."""
    if stage is not None and stage != "finetuned":
        log.warning("generating from a %r checkpoint, not a fine-tuned one", stage)
    rows = []
    for ex in read_jsonl(in_path):
        out = decode_table(model, frozen, vocab, ex.table, beam_size, length_penalty, max_tgt)
        row = {"id": ex.id, "prediction": out.text}
        if out.truncated:
            row["truncated"] = True
        if out.malformed:
            row["malformed"] = True
        if out.reopened:
            row["reopened_slots"] = out.reopened
        rows.append(row)
    write_jsonl(out_path, rows)
    return rows
