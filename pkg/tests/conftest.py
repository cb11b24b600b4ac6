import sys

import numpy as np
import pytest

from amg.corpus import GeneratorSpec, make_corpus
from amg.model import AMGModel, ModelConfig
from amg.table import Table, build_vocab, linearize, split_tokens


def corpus_vocab(examples):
    docs = [linearize(e.table)[0] for e in examples]
    docs += [split_tokens(e.reference) for e in examples if e.reference is not None]
    return build_vocab(docs)


@pytest.fixture(scope="session")
def small_corpus():
    tables, pairs = make_corpus(GeneratorSpec(seed=3, n_tables=6, n_pairs=6))
    return tables, pairs, corpus_vocab(tables + pairs)


@pytest.fixture
def tiny_model(small_corpus):
    vocab = small_corpus[2]
    cfg = ModelConfig(vocab_size=len(vocab), d_h=16, n_layers=2, n_heads=2, slot_layers=1,
                      slot_n=8, dropout=0.0, max_tgt=24)
    return AMGModel(cfg, seed=5)


@pytest.fixture
def two_slot_table():
    return Table.from_pairs([("name", "robert kiprono cheruiyot"),
                             ("birth_date", "august 10 , 1998")], id="r")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)
