"""Synthetic table/reference corpora.

Attribute names double as the connecting words of the reference templates
("born", "from", ...), so every reference token appears in its table and a
reference scored as a prediction is fully faithful.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .table import E_CLS, E_SEP, Example, Table

FIRST = ["john", "maria", "ahmed", "li", "olga", "pedro", "kwame", "yuki", "sara", "ivan",
         "amara", "lucas"]
LAST = ["smith", "garcia", "khan", "wei", "petrova", "silva", "mensah", "tanaka", "cohen",
        "novak", "okafor", "berg"]
MONTHS = ["january", "february", "march", "april", "may", "june", "july", "august",
          "september", "october", "november", "december"]
COUNTRIES = ["kenya", "brazil", "japan", "norway", "chile", "egypt", "canada", "india",
             "poland", "ghana"]
SPORTS = ["football", "tennis", "cricket", "hockey", "rugby", "golf"]
TEAMS = ["arsenal", "real madrid", "ajax", "porto", "celtic", "river plate", "benfica",
         "lazio", "boca juniors", "galatasaray", "santos", "olympiacos"]
INSTRUMENTS = ["guitar", "piano", "violin", "drums", "cello", "flute"]


def _name(rng):
    return f"{FIRST[rng.integers(len(FIRST))]} {LAST[rng.integers(len(LAST))]}"


def _date(rng):
    return f"{rng.integers(1, 29)} {MONTHS[rng.integers(12)]} {rng.integers(1950, 2000)}"


def _pick(pool):
    return lambda rng: pool[rng.integers(len(pool))]


DEFAULT_ATTRIBUTES = {
    "name": _name,
    "born": _date,
    "from": _pick(COUNTRIES),
    "plays": _pick(SPORTS),
    "for": _pick(TEAMS),
    "with": _pick(INSTRUMENTS),
}

DEFAULT_TEMPLATES = [
    "<name> born <born> from <from> plays <plays> for <for>",
    "<name> from <from> plays <plays> for <for>",
    "<name> plays <plays> for <for> born <born>",
    "<name> born <born> from <from>",
    "<name> from <from> born <born> plays <plays> with <with>",
    "<name> plays <plays> with <with>",
    "<name> born <born>",
    "<name> for <for> from <from>",
]

_PLACEHOLDER = re.compile(r"<(\w+)>")


@dataclass
class GeneratorSpec:
    seed: int = 17
    n_tables: int = 50
    n_pairs: int = 200
    max_slots: int = 8
    attributes: dict = field(default_factory=lambda: dict(DEFAULT_ATTRIBUTES))
    templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    shuffle_slots: bool = True

    def __post_init__(self):
        if not self.attributes or not self.templates:
            raise ValueError("attribute and template pools must be non-empty")
        for t in self.templates:
            names = _PLACEHOLDER.findall(t)
            unknown = [n for n in names if n not in self.attributes]
            if unknown:
                raise ValueError(f"template {t!r} uses unknown attributes {unknown}")
            if not 1 <= len(names) <= self.max_slots:
                raise ValueError(f"template {t!r} has {len(names)} slots; limit {self.max_slots}")


def render(template, values):
    """Fill ``<attr>`` placeholders with bracketed slot values."""
    return _PLACEHOLDER.sub(lambda m: f"{E_CLS} {values[m.group(1)]} {E_SEP}", template)


def make_example(spec, rng, idx, prefix):
    template = spec.templates[rng.integers(len(spec.templates))]
    names = _PLACEHOLDER.findall(template)
    values = {n: spec.attributes[n](rng) for n in names}
    order = list(names)
    if spec.shuffle_slots:
        order = [order[i] for i in rng.permutation(len(order))]
    table = Table.from_pairs([(n, values[n]) for n in order], id=f"{prefix}{idx}")
    return Example(table.id, table, render(template, values))


def make_split(spec, stream, n, prefix):
    """``n`` labeled examples from an independent random stream."""
    return [make_example(spec, np.random.default_rng([spec.seed, stream, i]), i, prefix)
            for i in range(n)]


def make_corpus(spec):
    """Returns (unlabeled tables, labeled pairs); deterministic in ``spec.seed``."""
    tables = [Example(ex.id, ex.table, None) for ex in make_split(spec, 0, spec.n_tables, "t")]
    return tables, make_split(spec, 1, spec.n_pairs, "p")


def make_test_split(spec, n):
    return make_split(spec, 2, n, "x")
