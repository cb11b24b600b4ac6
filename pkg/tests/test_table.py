import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amg.table import (
    CLS, E_CLS, E_CLS_ID, E_SEP, E_SEP_ID, NO_SLOT, SEP, SEP_ID, SPECIAL_TOKENS, UNK_ID,
    Example, StructureError, Table, TableError, TruncationError, Vocabulary, build_vocab,
    delinearize, encode_reference, encode_table, linearize, match_span, parse_target,
    read_jsonl, split_tokens, tokenize, write_jsonl,
)


def test_reserved_ids_fixed():
    v = build_vocab([["x"]])
    assert v.itos[:7] == list(SPECIAL_TOKENS)
    assert [v.id(t) for t in ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[E_CLS]",
                              "[E_SEP]")] == list(range(7))


def test_single_slot_linearization():
    toks, spans = linearize(Table.from_pairs([("a", "x")]))
    assert " ".join(toks) == "[CLS] a is [E_CLS] x [E_SEP] ; [SEP]"
    assert spans == [(4, 5)]


def test_two_slot_spans_by_hand(two_slot_table):
    toks, spans = linearize(two_slot_table)
    # [CLS] name is [E_CLS] robert kiprono cheruiyot [E_SEP] ; birth_date is [E_CLS] ...
    assert toks[4:7] == ["robert", "kiprono", "cheruiyot"]
    # ... [E_SEP] ; birth_date is [E_CLS] august 10 , 1998 [E_SEP] ; [SEP]
    assert spans == [(4, 7), (12, 16)]
    assert toks[12:16] == ["august", "10", ",", "1998"]
    assert len(toks) == 19


def test_paper_style_segment():
    toks, _ = linearize(Table.from_pairs([("name", "robert kiprono cheruiyot")]))
    assert " ".join(toks[1:-1]) == "name is [E_CLS] robert kiprono cheruiyot [E_SEP] ;"


def test_build_vocab_frequency_and_threshold():
    v = build_vocab([["a", "a", "b"]])
    assert (v.id("a"), v.id("b")) == (7, 8)
    v2 = build_vocab([["b", "a"], ["a"]], min_count=2)
    assert "a" in v2 and "b" not in v2


def test_build_vocab_tie_break_matches_sort_oracle():
    corpus = [["d", "c", "b"], ["a", "b", "c"], ["e", "a", "d", "z"]]
    counts = {}
    for doc in corpus:
        for t in doc:
            counts[t] = counts.get(t, 0) + 1
    expected = sorted(counts, key=lambda t: (-counts[t], t))
    assert build_vocab(corpus).itos[7:] == expected


def test_build_vocab_empty_corpus():
    with pytest.raises(TableError):
        build_vocab([])


def test_tokenize_examples():
    v = build_vocab([["robert", ","]])
    assert tokenize("Robert ,", v) == [v.id("robert"), v.id(",")]
    assert tokenize("", v) == []
    assert tokenize("zzz-unknown", v) == [UNK_ID]


def test_special_tokens_survive_tokenizer():
    assert split_tokens("[E_CLS] John [E_SEP] .") == [E_CLS, "john", E_SEP, "."]


def test_vocab_roundtrip(tmp_path):
    v = build_vocab([["b", "a", "a"]])
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_table_invariants():
    with pytest.raises(TableError):
        Table.from_pairs([])
    with pytest.raises(TableError):
        Table.from_pairs([("Name", "a"), ("name ", "b")])
    with pytest.raises(TableError):
        Table.from_pairs([("name", "")])
    with pytest.raises(TableError):
        Table.from_pairs([("name", "a [SEP]")])


def test_encoding_invariants(two_slot_table):
    v = build_vocab([linearize(two_slot_table)[0]])
    enc = encode_table(two_slot_table, v)
    assert enc.token_ids[0] == v.id(CLS) and enc.token_ids[-1] == SEP_ID
    for j, (a, b) in enumerate(enc.slot_spans):
        assert np.all(enc.slot_of[a:b] == j)
    outside = np.ones(len(enc), bool)
    for a, b in enc.slot_spans:
        outside[a:b] = False
    assert np.all(enc.slot_of[outside] == NO_SLOT)
    assert (enc.token_ids == E_CLS_ID).sum() == (enc.token_ids == E_SEP_ID).sum() == 2


def test_truncation_error_names_slot():
    table = Table.from_pairs([("a", "x y"), ("b", " ".join(["w"] * 20)), ("c", "z")])
    v = build_vocab([linearize(table)[0]])
    with pytest.raises(TruncationError) as err:
        encode_table(table, v, max_src=15)
    assert err.value.slot_index == 1


def test_slot_limit():
    table = Table.from_pairs([("a", "x"), ("b", "y"), ("c", "z")])
    v = build_vocab([linearize(table)[0]])
    with pytest.raises(TableError):
        encode_table(table, v, slot_n=2)


def _ref_ids(text, v):
    return tokenize(text, v)


def test_parse_target_maps_spans(two_slot_table):
    v = build_vocab([linearize(two_slot_table)[0], ["(", "born"]])
    enc = encode_table(two_slot_table, v)
    ids = _ref_ids("[E_CLS] robert [E_SEP] ( born [E_CLS] 1998 [E_SEP]", v)
    tgt = parse_target(ids, enc)
    assert tgt.complete_slot_events == ((2, 0), (7, 1))
    assert list(tgt.slot_of) == [NO_SLOT, 0, NO_SLOT, NO_SLOT, NO_SLOT, NO_SLOT, 1, NO_SLOT]


def test_parse_target_no_boundaries(two_slot_table):
    v = build_vocab([linearize(two_slot_table)[0]])
    tgt = parse_target(_ref_ids("robert 1998", v), encode_table(two_slot_table, v))
    assert tgt.complete_slot_events == ()
    assert np.all(tgt.slot_of == NO_SLOT)


@pytest.mark.parametrize("text,pos", [("[E_SEP] x", 0), ("[E_CLS] x [E_CLS] y [E_SEP]", 2),
                                      ("x [E_CLS] y", 1)])
def test_parse_target_structure_errors(two_slot_table, text, pos):
    v = build_vocab([linearize(two_slot_table)[0], ["x", "y"]])
    with pytest.raises(StructureError) as err:
        parse_target(_ref_ids(text, v), encode_table(two_slot_table, v))
    assert err.value.position == pos


def test_match_span_tie_goes_to_lowest():
    table = Table.from_pairs([("a", "p q"), ("b", "q r")])
    v = build_vocab([linearize(table)[0]])
    enc = encode_table(table, v)
    assert match_span([v.id("q")], enc) == (0, 1)
    assert match_span([v.id("r"), v.id("q")], enc) == (1, 2)


def test_encode_reference_appends_sep_and_guards_truncation(two_slot_table):
    v = build_vocab([linearize(two_slot_table)[0], ["born"]])
    enc = encode_table(two_slot_table, v)
    tgt = encode_reference("[E_CLS] robert [E_SEP] born", v, enc)
    assert tgt.token_ids[-1] == SEP_ID
    with pytest.raises(TruncationError):
        encode_reference("born [E_CLS] robert kiprono cheruiyot [E_SEP]", v, enc, max_tgt=4)


def test_jsonl_roundtrip_and_line_numbers(tmp_path, two_slot_table):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, [Example("r", two_slot_table, "x").to_json()])
    (ex,) = read_jsonl(path)
    assert ex.table == two_slot_table and ex.reference == "x"
    path.write_text(path.read_text() + '{"id": 2}\n')
    with pytest.raises(TableError, match=":2:"):
        read_jsonl(path)


_words = st.text(alphabet="abcdefg", min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(_words, st.lists(_words, min_size=1, max_size=3)),
                min_size=1, max_size=5, unique_by=lambda p: p[0]))
def test_linearization_roundtrip(pairs):
    table = Table.from_pairs([(a, " ".join(v)) for a, v in pairs])
    toks, _ = linearize(table)
    again = delinearize(toks)
    assert again == table
    v = build_vocab([toks])
    assert encode_table(again, v) == encode_table(table, v)
    wrapped = " ".join(f"{E_CLS} {' '.join(s.value)} {E_SEP}" for s in table.slots)
    tgt = parse_target(tokenize(wrapped, v), encode_table(table, v))
    assert [j for _, j in tgt.complete_slot_events] == _first_best(table, v)


def _first_best(table, v):
    # wrapping slot j's own value always matches slot j unless an earlier slot ties
    enc = encode_table(table, v)
    return [match_span(enc.slot_value_ids(j), enc)[0] for j in range(len(table))]
