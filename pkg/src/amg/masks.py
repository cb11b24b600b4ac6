"""Additive attention masks for the token and slot attention branches.

Entries are 0 (attention permitted) or ``NEG_INF`` (forbidden). Rows are
queries, columns keys; the first ``src_len`` positions are the linearized
table and the rest the target.
"""
import numpy as np

from .numkernel import NEG_INF, get_default_dtype
from .table import NO_SLOT


def build_seq2seq_mask(src_len, tgt_len):
    """Bidirectional over the source, causal over the target."""
    if src_len < 1 or tgt_len < 0:
        raise ValueError(f"bad lengths src_len={src_len} tgt_len={tgt_len}")
    n = src_len + tgt_len
    q = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    allowed = (k < src_len) | ((q >= src_len) & (k <= q))
    return np.where(allowed, 0.0, NEG_INF).astype(get_default_dtype())


def build_slot_mask(mask_ta, tgt_slot_of):
    """Forbid a target token from seeing earlier target tokens of its own slot."""
    labels = np.asarray(tgt_slot_of, dtype=np.int64)
    n = mask_ta.shape[0]
    t = len(labels)
    src_len = n - t
    out = np.array(mask_ta, copy=True)
    if t == 0:
        return out
    same = (labels[:, None] == labels[None, :]) & (labels[:, None] != NO_SLOT)
    earlier = np.tril(np.ones((t, t), dtype=bool), k=-1)
    block = out[src_len:, src_len:]
    block[same & earlier] = NEG_INF
    return out


def build_masks(src_len, tgt_slot_of):
    mask_ta = build_seq2seq_mask(src_len, len(tgt_slot_of))
    return mask_ta, build_slot_mask(mask_ta, tgt_slot_of)


def dump_mask(mask):
    """Render a mask as rows of '.' (permitted) and 'X' (forbidden)."""
    return "\n".join("".join("." if v > NEG_INF / 2 else "X" for v in row) for row in mask) + "\n"
