"""Tables, vocabulary, linearization and reference parsing."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, CLS, SEP, MASK, E_CLS, E_SEP = (
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[E_CLS]", "[E_SEP]")
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, E_CLS, E_SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, E_CLS_ID, E_SEP_ID = range(7)

# slot_of value for positions outside any slot value span
NO_SLOT = -1

DEFAULT_MAX_SRC = 300
DEFAULT_MAX_TGT = 64

_TOKEN_RE = re.compile(
    r"\[(?:PAD|UNK|CLS|SEP|MASK|E_CLS|E_SEP)\]|\w+(?:[-']\w+)*|[^\w\s]")


class TableError(ValueError):
    pass


class TruncationError(TableError):
    def __init__(self, message, slot_index):
        super().__init__(message)
        self.slot_index = slot_index


class StructureError(TableError):
    def __init__(self, message, position):
        super().__init__(message)
        self.position = position


def split_tokens(text):
    """Lowercase and split on whitespace and punctuation; special tokens are kept whole."""
    out = []
    for tok in _TOKEN_RE.findall(text):
        out.append(tok if tok in SPECIAL_TOKENS else tok.lower())
    return out


def normalize_attribute(name):
    return " ".join(name.lower().split())


@dataclass(frozen=True)
class Slot:
    attribute: str
    value: tuple

    def __post_init__(self):
        if not self.attribute:
            raise TableError("empty attribute name")
        if not self.value:
            raise TableError(f"slot {self.attribute!r} has an empty value")
        bad = [t for t in self.value if t in SPECIAL_TOKENS]
        if bad:
            raise TableError(f"slot {self.attribute!r} value contains reserved token {bad[0]}")


@dataclass(frozen=True)
class Table:
    slots: tuple
    id: str = ""

    def __post_init__(self):
        if not self.slots:
            raise TableError(f"table {self.id!r} has no slots")
        seen = set()
        for s in self.slots:
            if s.attribute in seen:
                raise TableError(f"table {self.id!r}: duplicate attribute {s.attribute!r}")
            seen.add(s.attribute)

    @classmethod
    def from_pairs(cls, pairs, id=""):
        slots = tuple(Slot(normalize_attribute(a), tuple(split_tokens(v))) for a, v in pairs)
        return cls(slots, id)

    def to_pairs(self):
        return [[s.attribute, " ".join(s.value)] for s in self.slots]

    def __len__(self):
        return len(self.slots)

    def token_set(self):
        """Attribute-name and value tokens, used by the faithfulness metrics."""
        toks = set()
        for s in self.slots:
            toks.update(split_tokens(s.attribute))
            toks.update(s.value)
        return toks


class Vocabulary:
    """Token <-> id bijection. The seven reserved tokens always hold ids 0..6."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:7]) != SPECIAL_TOKENS:
            raise TableError("vocabulary must start with the reserved tokens in order")
        if len(set(tokens)) != len(tokens):
            raise TableError("vocabulary contains duplicate tokens")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.itos:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])


def build_vocab(corpus, min_count=1):
    """Reserved tokens first, then by descending count, ties lexicographic."""
    if not corpus:
        raise TableError("build_vocab: empty corpus")
    counts = Counter(t for doc in corpus for t in doc if t not in SPECIAL_TOKENS)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


def tokenize(text, vocab):
    return vocab.encode(split_tokens(text))


def linearize(table):
    """Render ``table`` as ``[CLS] a is [E_CLS] v [E_SEP] ; ... [SEP]``.

    Returns the token list and the half-open (start, end) span of each slot's
    value tokens.
    """
    tokens = [CLS]
    spans = []
    for s in table.slots:
        tokens.extend(split_tokens(s.attribute))
        tokens.append("is")
        tokens.append(E_CLS)
        start = len(tokens)
        tokens.extend(s.value)
        spans.append((start, len(tokens)))
        tokens.append(E_SEP)
        tokens.append(";")
    tokens.append(SEP)
    return tokens, spans


def delinearize(tokens, id=""):
    """Inverse of :func:`linearize` for well-formed token lists."""
    if not tokens or tokens[0] != CLS or tokens[-1] != SEP:
        raise StructureError("linearization must be wrapped in [CLS] ... [SEP]", 0)
    pairs = []
    i = 1
    while i < len(tokens) - 1:
        j = tokens.index(E_CLS, i)
        k = tokens.index(E_SEP, j)
        attr = tokens[i:j - 1]
        if tokens[j - 1] != "is" or not attr:
            raise StructureError("expected '<attribute> is [E_CLS]'", j)
        pairs.append((" ".join(attr), tuple(tokens[j + 1:k])))
        if tokens[k + 1] != ";":
            raise StructureError("expected ';' after [E_SEP]", k + 1)
        i = k + 2
    return Table(tuple(Slot(a, v) for a, v in pairs), id)


@dataclass(frozen=True)
class TableEncoding:
    token_ids: np.ndarray
    slot_of: np.ndarray      # NO_SLOT outside value spans
    slot_spans: tuple

    @property
    def n_slots(self):
        return len(self.slot_spans)

    def __len__(self):
        return len(self.token_ids)

    def __eq__(self, other):
        return (isinstance(other, TableEncoding)
                and np.array_equal(self.token_ids, other.token_ids)
                and np.array_equal(self.slot_of, other.slot_of)
                and self.slot_spans == other.slot_spans)

    def slot_value_ids(self, j):
        a, b = self.slot_spans[j]
        return self.token_ids[a:b]


def encode_table(table, vocab, max_src=DEFAULT_MAX_SRC, slot_n=None):
    if slot_n is not None and len(table) > slot_n:
        raise TableError(f"table {table.id!r} has {len(table)} slots; limit is {slot_n}")
    tokens, spans = linearize(table)
    if len(tokens) > max_src:
        # the first slot whose segment (plus the closing [SEP]) does not fit
        for j, (_, end) in enumerate(spans):
            if end + 3 > max_src:
                raise TruncationError(
                    f"table {table.id!r}: linearization of {len(tokens)} tokens exceeds "
                    f"max source length {max_src} at slot {j}", j)
    slot_of = np.full(len(tokens), NO_SLOT, dtype=np.int64)
    for j, (a, b) in enumerate(spans):
        slot_of[a:b] = j
    return TableEncoding(np.asarray(vocab.encode(tokens), dtype=np.int64), slot_of, tuple(spans))


def match_span(span_ids, table_encoding):
    """Slot whose value shares the most tokens with ``span_ids``; ties -> lowest index.

    Returns ``(slot, overlap)``.
    """
    span = Counter(int(t) for t in span_ids)
    best, best_overlap = 0, -1
    for j in range(table_encoding.n_slots):
        value = Counter(int(t) for t in table_encoding.slot_value_ids(j))
        overlap = sum((span & value).values())
        if overlap > best_overlap:
            best, best_overlap = j, overlap
    return best, best_overlap


@dataclass(frozen=True)
class TargetEncoding:
    token_ids: np.ndarray
    slot_of: np.ndarray
    complete_slot_events: tuple = field(default=())   # (position of [E_SEP], slot)

    def __len__(self):
        return len(self.token_ids)


def parse_target(reference_ids, table_encoding):
    """Label reference positions with the slot of their bracketed span."""
    ids = np.asarray(reference_ids, dtype=np.int64)
    slot_of = np.full(len(ids), NO_SLOT, dtype=np.int64)
    events = []
    open_at = None
    for pos, t in enumerate(ids):
        if t == E_CLS_ID:
            if open_at is not None:
                raise StructureError(f"nested [E_CLS] at position {pos}", pos)
            open_at = pos
        elif t == E_SEP_ID:
            if open_at is None:
                raise StructureError(f"[E_SEP] without [E_CLS] at position {pos}", pos)
            j, _ = match_span(ids[open_at + 1:pos], table_encoding)
            slot_of[open_at + 1:pos] = j
            events.append((pos, j))
            open_at = None
    if open_at is not None:
        raise StructureError(f"unclosed [E_CLS] at position {open_at}", open_at)
    return TargetEncoding(ids, slot_of, tuple(events))


def encode_reference(text, vocab, table_encoding, max_tgt=DEFAULT_MAX_TGT):
    """Tokenize a reference, append [SEP] and parse its slot spans."""
    ids = tokenize(text, vocab)
    if len(ids) + 1 > max_tgt:
        cut = max_tgt - 1
        depth = sum(1 if t == E_CLS_ID else -1 if t == E_SEP_ID else 0 for t in ids[:cut])
        if depth:
            raise TruncationError(f"reference truncation at {cut} would split a slot span", None)
        ids = ids[:cut]
    return parse_target(ids + [SEP_ID], table_encoding)


def strip_boundaries(tokens):
    return [t for t in tokens if t not in (E_CLS, E_SEP)]


@dataclass
class Example:
    id: str
    table: Table
    reference: str | None = None

    def to_json(self):
        obj = {"id": self.id, "table": self.table.to_pairs()}
        if self.reference is not None:
            obj["reference"] = self.reference
        return obj


def read_jsonl(path):
    """Load a dataset; raises ``TableError`` with the offending line number."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                table = Table.from_pairs(obj["table"], id=str(obj["id"]))
                out.append(Example(str(obj["id"]), table, obj.get("reference")))
            except (json.JSONDecodeError, KeyError, TypeError, TableError) as exc:
                raise TableError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
