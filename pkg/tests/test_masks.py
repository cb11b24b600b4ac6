import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from amg.masks import build_masks, build_seq2seq_mask, build_slot_mask, dump_mask
from amg.numkernel import NEG_INF, Tensor, softmax_masked
from amg.table import NO_SLOT


def brute_ta(src_len, tgt_len):
    n = src_len + tgt_len
    m = np.zeros((n, n))
    for i in range(n):
        for k in range(n):
            ok = k < src_len or (i >= src_len and k <= i)
            m[i, k] = 0.0 if ok else NEG_INF
    return m


def brute_slot(src_len, labels):
    m = brute_ta(src_len, len(labels))
    for i, li in enumerate(labels):
        for k, lk in enumerate(labels):
            if li == lk != NO_SLOT and k < i:
                m[src_len + i, src_len + k] = NEG_INF
    return m


def test_pure_encoder_mask_is_zero():
    assert np.all(build_seq2seq_mask(2, 0) == 0)


def test_causal_triangle():
    m = build_seq2seq_mask(1, 2)
    assert m[1, 0] == 0 and m[1, 1] == 0 and m[1, 2] == NEG_INF
    assert np.all(m[2] == 0)
    assert np.all(m[0, 1:] == NEG_INF)


def test_3x3_matches_predicate():
    np.testing.assert_array_equal(build_seq2seq_mask(3, 3), brute_ta(3, 3))


def test_rejects_empty_source():
    import pytest
    with pytest.raises(ValueError):
        build_seq2seq_mask(0, 2)


def test_slot_mask_without_spans_equals_ta():
    ta, sl = build_masks(3, [NO_SLOT] * 4)
    np.testing.assert_array_equal(ta, sl)


def test_single_span_block():
    ta, sl = build_masks(2, [0, 0, 0])
    diff = (sl != ta)
    tgt = diff[2:, 2:]
    assert set(zip(*np.nonzero(tgt))) == {(1, 0), (2, 0), (2, 1)}
    assert diff.sum() == 3


def test_mixed_reference_against_oracle():
    # [E_CLS] a b [E_SEP] c [E_CLS] d [E_SEP]
    labels = [NO_SLOT, 0, 0, NO_SLOT, NO_SLOT, NO_SLOT, 1, NO_SLOT]
    _, sl = build_masks(4, labels)
    np.testing.assert_array_equal(sl, brute_slot(4, labels))


def test_dump_grid():
    assert dump_mask(build_seq2seq_mask(1, 2)) == ".XX\n..X\n...\n"


layouts = st.integers(1, 8).flatmap(
    lambda s: st.tuples(st.just(s), st.lists(st.sampled_from([NO_SLOT, 0, 1, 2]), max_size=8)))


@settings(max_examples=80, deadline=None)
@given(layouts)
def test_masks_match_oracle_and_invariants(layout):
    src_len, labels = layout
    ta, sl = build_masks(src_len, labels)
    np.testing.assert_array_equal(ta, brute_ta(src_len, len(labels)))
    np.testing.assert_array_equal(sl, brute_slot(src_len, labels))
    # monotone restriction; identical source keys
    assert np.all((sl == 0) <= (ta == 0))
    np.testing.assert_array_equal(sl[:, :src_len], ta[:, :src_len])
    assert np.all(sl[src_len:, :src_len] == 0)
    x = np.random.default_rng(len(labels)).standard_normal((1,) + sl.shape)
    w = softmax_masked(Tensor(x), sl).data[0]
    assert np.all(w[sl == NEG_INF] < 1e-12)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
