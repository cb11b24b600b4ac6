"""The AMG network.

A pre-norm transformer over ``[linearized table ; target]``. Every layer runs
token attention under the seq2seq mask; the top ``slot_layers`` layers also
run slot attention, whose keys and values come from a per-slot memory bank
scattered onto token positions, and average the two branches. The memory bank
is initialized from a frozen copy of the network and updated by a gated rule
each time a slot value is completed.

Memory is stored row-major: row ``j`` of an ``(slot_n, d_h)`` array is the
state of slot ``j``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numkernel as nk
from .masks import build_seq2seq_mask
from .numkernel import Tensor
from .table import DEFAULT_MAX_SRC, DEFAULT_MAX_TGT, NO_SLOT, Vocabulary

STAGES = ("init", "phase1", "phase2", "finetuned")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_h: int = 64
    n_layers: int = 4
    n_heads: int = 4
    slot_layers: int = 2
    slot_n: int = 8
    max_src: int = DEFAULT_MAX_SRC
    max_tgt: int = DEFAULT_MAX_TGT
    dropout: float = 0.1
    use_memory: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_h % self.n_heads:
            raise ModelError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.slot_layers <= self.n_layers:
            raise ModelError(f"slot_layers={self.slot_layers} outside [0, {self.n_layers}]")

    @property
    def d_k(self):
        return self.d_h // self.n_heads

    @property
    def memory_enabled(self):
        return self.use_memory and self.slot_layers > 0

    def is_slot_layer(self, layer):
        return layer >= self.n_layers - self.slot_layers

    def to_json(self):
        return asdict(self)


def init_params(config, seed=0):
    """Create all trainable tensors in a fixed order."""
    rng = np.random.default_rng(seed)
    d, std = config.d_h, config.init_std
    p = {}

    def normal(name, *shape):
        p[name] = nk.parameter(rng.normal(0.0, std, size=shape), name=name)

    def const(name, value, *shape):
        p[name] = nk.parameter(np.full(shape, value), name=name)

    normal("emb.token", config.vocab_size, d)
    normal("emb.position", config.max_src + config.max_tgt, d)
    for l in range(config.n_layers):
        pre = f"layer{l}."
        const(pre + "ln1.gain", 1.0, d)
        const(pre + "ln1.bias", 0.0, d)
        for w in ("Q", "K", "V"):
            normal(pre + f"attn.W_{w}_ta", d, d)
            if w != "K":  # a key bias shifts every score in a row equally
                const(pre + f"attn.b_{w}_ta", 0.0, d)
        normal(pre + "attn.W_O", d, d)
        if config.is_slot_layer(l):
            for w in ("Q", "K", "V"):
                normal(pre + f"slot.W_{w}_sa", d, d)
        const(pre + "ln2.gain", 1.0, d)
        const(pre + "ln2.bias", 0.0, d)
        normal(pre + "ff.W1", d, 4 * d)
        const(pre + "ff.b1", 0.0, 4 * d)
        normal(pre + "ff.W2", 4 * d, d)
        const(pre + "ff.b2", 0.0, d)
    const("final.ln.gain", 1.0, d)
    const("final.ln.bias", 0.0, d)
    const("head.bias", 0.0, config.vocab_size)
    if config.slot_layers > 0:
        normal("slot.m_null", d)
    if config.memory_enabled:
        for w in ("a", "b", "c", "d"):
            normal(f"mem.W_{w}", d, d)
        const("mem.b_cand", 0.0, d)
        const("mem.b_gate", 0.0, d)
    return p


TOKEN_ONLY_PREFIXES = ("emb.", "final.", "head.")


def is_token_param(name):
    if name.startswith(TOKEN_ONLY_PREFIXES):
        return True
    return name.startswith("layer") and ".slot." not in name


# ----------------------------------------------------------------------------
# building blocks

def _split_heads(x, n_heads):
    n, d = x.shape
    return nk.transpose(nk.reshape(x, (n, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x):
    h, n, dk = x.shape
    return nk.reshape(nk.transpose(x, (1, 0, 2)), (n, h * dk))


def _attend(q, k, v, mask, d_k, p_drop=0.0, rng=None):
    """Scaled dot-product attention on head-split (H, n, d_k) tensors."""
    scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_k))
    weights = nk.softmax_masked(scores, mask)
    if p_drop and rng is not None:
        weights = nk.dropout(weights, p_drop, rng)
    return nk.matmul(weights, v), weights


def token_attention(params, prefix, h, mask_ta, n_heads, p_drop=0.0, rng=None):
    """Multi-head seq2seq self-attention; returns (N, d_h) after the output projection."""
    d_k = h.shape[1] // n_heads
    q = nk.add(nk.matmul(h, params[prefix + "attn.W_Q_ta"]), params[prefix + "attn.b_Q_ta"])
    k = nk.matmul(h, params[prefix + "attn.W_K_ta"])
    v = nk.add(nk.matmul(h, params[prefix + "attn.W_V_ta"]), params[prefix + "attn.b_V_ta"])
    out, _ = _attend(_split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads),
                     mask_ta, d_k, p_drop, rng)
    return nk.matmul(_merge_heads(out), params[prefix + "attn.W_O"])


def scatter_memory(memory, m_null, labels):
    """Row p is ``memory[labels[p]]``, or ``m_null`` where the label is NO_SLOT."""
    labels = np.asarray(labels, dtype=np.int64)
    slot_n = memory.shape[0]
    if labels.size and labels.max() >= slot_n:
        raise ModelError(f"slot index {int(labels.max())} >= slot_n={slot_n}")
    idx = np.where(labels == NO_SLOT, slot_n, labels)
    table = nk.concat([memory, nk.reshape(m_null, (1, memory.shape[1]))], axis=0)
    return nk.embedding_lookup(table, idx)


def segments(row_state):
    """Contiguous (start, end, state) runs of a nondecreasing row-state array."""
    row_state = np.asarray(row_state)
    out = []
    start = 0
    for i in range(1, len(row_state) + 1):
        if i == len(row_state) or row_state[i] != row_state[start]:
            out.append((start, i, int(row_state[start])))
            start = i
    return out


def slot_attention(params, prefix, h, scattered, mask_slot, n_heads, rows=None,
                   p_drop=0.0, rng=None, return_weights=False):
    """Attention with queries from ``h`` and keys/values from scattered memory.

    ``rows`` restricts the queries to a half-open row range; the output is the
    corresponding block of rows after the shared output projection.
    """
    d_k = h.shape[1] // n_heads
    r0, r1 = rows if rows is not None else (0, h.shape[0])
    hq = h if (r0, r1) == (0, h.shape[0]) else nk.slice_(h, slice(r0, r1))
    q = nk.matmul(hq, params[prefix + "slot.W_Q_sa"])
    k = nk.matmul(scattered, params[prefix + "slot.W_K_sa"])
    v = nk.matmul(scattered, params[prefix + "slot.W_V_sa"])
    out, weights = _attend(_split_heads(q, n_heads), _split_heads(k, n_heads),
                           _split_heads(v, n_heads), mask_slot[r0:r1], d_k, p_drop, rng)
    out = nk.matmul(_merge_heads(out), params[prefix + "attn.W_O"])
    if return_weights:
        return out, weights
    return out


def fuse(a_ta, a_sa):
    return nk.scale(nk.add(a_ta, a_sa), 0.5)


def update_memory(params, memory, his, n_active):
    """Gated update of the first ``n_active`` memory rows; padding rows are copied."""
    d = memory.shape[1]
    his = nk.as_tensor(his)
    his_row = nk.reshape(his, (1, d))
    active = memory if n_active == memory.shape[0] else nk.slice_(memory, slice(0, n_active))
    hb = nk.reshape(nk.matmul(his_row, params["mem.W_b"]), (d,))
    hd = nk.reshape(nk.matmul(his_row, params["mem.W_d"]), (d,))
    cand = nk.tanh(nk.add(nk.add(nk.matmul(active, params["mem.W_a"]), hb), params["mem.b_cand"]))
    z = nk.sigmoid(nk.add(nk.add(nk.matmul(active, params["mem.W_c"]), hd), params["mem.b_gate"]))
    one = Tensor(np.ones(z.shape))
    new = nk.add(nk.mul(nk.sub(one, z), active), nk.mul(z, cand))
    if n_active == memory.shape[0]:
        return new
    return nk.concat([new, nk.slice_(memory, slice(n_active, memory.shape[0]))], axis=0)


@dataclass
class MemoryBank:
    M: np.ndarray          # (slot_n, d_h)
    active: np.ndarray     # (slot_n,) bool

    @property
    def n_active(self):
        return int(self.active.sum())

    def copy(self):
        return MemoryBank(self.M.copy(), self.active.copy())


@dataclass
class SlotHistory:
    his: np.ndarray
    valid: bool = True


@dataclass
class SlotContext:
    """Memory schedule for one forward pass.

    ``states[s]`` is the memory presented to rows whose ``row_state`` is s;
    ``labels`` gives each position's slot for scattering.
    """
    states: list
    row_state: np.ndarray
    labels: np.ndarray


# ----------------------------------------------------------------------------

def encode(params, config, ids, mask_ta, mask_slot=None, slot_ctx=None, train=False, rng=None,
           token_only=False, trace=None):
    """Final-layer hidden states (N, d_h) for the token ids ``ids``.

    If ``trace`` is a dict it receives ``"layer{l}.slot_weights"``, the
    (heads, N, N) slot-attention weights of each slot-enabled layer.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n > config.max_src + config.max_tgt:
        raise ModelError(f"sequence length {n} exceeds max_src+max_tgt="
                         f"{config.max_src + config.max_tgt}")
    p_drop = config.dropout if train else 0.0
    x = nk.add(nk.embedding_lookup(params["emb.token"], ids),
               nk.embedding_lookup(params["emb.position"], np.arange(n)))
    x = nk.dropout(x, p_drop, rng)
    use_slots = (not token_only) and config.slot_layers > 0 and slot_ctx is not None
    scattered_cache = {}
    for l in range(config.n_layers):
        pre = f"layer{l}."
        h = nk.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"], config.ln_eps)
        a = token_attention(params, pre, h, mask_ta, config.n_heads, p_drop, rng)
        if use_slots and config.is_slot_layer(l):
            parts, weights = [], []
            for r0, r1, s in segments(slot_ctx.row_state):
                if s not in scattered_cache:
                    scattered_cache[s] = scatter_memory(slot_ctx.states[s], params["slot.m_null"],
                                                        slot_ctx.labels)
                out, w = slot_attention(params, pre, h, scattered_cache[s], mask_slot,
                                        config.n_heads, rows=(r0, r1), p_drop=p_drop, rng=rng,
                                        return_weights=True)
                parts.append(out)
                weights.append(w.data)
            if trace is not None:
                trace[pre + "slot_weights"] = np.concatenate(weights, axis=1)
            sa = parts[0] if len(parts) == 1 else nk.concat(parts, axis=0)
            a = fuse(a, sa)
        x = nk.add(x, nk.dropout(a, p_drop, rng))
        h = nk.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"], config.ln_eps)
        f = nk.gelu(nk.add(nk.matmul(h, params[pre + "ff.W1"]), params[pre + "ff.b1"]))
        f = nk.add(nk.matmul(nk.dropout(f, p_drop, rng), params[pre + "ff.W2"]), params[pre + "ff.b2"])
        x = nk.add(x, nk.dropout(f, p_drop, rng))
    return nk.layer_norm(x, params["final.ln.gain"], params["final.ln.bias"], config.ln_eps)


def logits_at(params, hidden, positions):
    """Tied-embedding vocabulary logits at the given row positions."""
    rows = nk.embedding_lookup(hidden, np.asarray(positions, dtype=np.int64))
    return nk.add(nk.matmul(rows, nk.transpose(params["emb.token"])), params["head.bias"])


class FrozenEncoder:
    """Read-only token-attention snapshot used to initialize memory and summarize spans."""

    def __init__(self, params, config):
        self.config = config
        self.params = {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v))
                       for k, v in params.items() if is_token_param(k)}

    def hidden_states(self, ids, src_len):
        mask = build_seq2seq_mask(src_len, len(ids) - src_len)
        with nk.no_grad():
            return encode(self.params, self.config, ids, mask, token_only=True).data

    def arrays(self):
        return {k: v.data for k, v in self.params.items()}


def init_memory(table_encoding, frozen, slot_n):
    """Memory rows = mean frozen hidden state over each slot's value span."""
    m = table_encoding.n_slots
    if m > slot_n:
        raise ModelError(f"table has {m} slots; slot_n={slot_n}")
    hidden = frozen.hidden_states(table_encoding.token_ids, len(table_encoding))
    M = np.zeros((slot_n, hidden.shape[1]), dtype=hidden.dtype)
    for j, (a, b) in enumerate(table_encoding.slot_spans):
        M[j] = hidden[a:b].mean(axis=0)
    active = np.zeros(slot_n, dtype=bool)
    active[:m] = True
    return MemoryBank(M, active)


def extract_history(span_ids, table_encoding, frozen):
    """Mean frozen hidden state over a completed span fed after its table."""
    span_ids = np.asarray(span_ids, dtype=np.int64)
    if span_ids.size == 0:
        raise ModelError("extract_history: empty span")
    src_len = len(table_encoding)
    ids = np.concatenate([table_encoding.token_ids, span_ids])
    hidden = frozen.hidden_states(ids, src_len)
    return SlotHistory(hidden[src_len:].mean(axis=0), True)


class AMGModel:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self):
        return self.params

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ModelError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for k, v in self.params.items():
            if arrays[k].shape != v.shape:
                raise ModelError(f"{k}: shape {arrays[k].shape} != {v.shape}")
            v.data = np.array(arrays[k], dtype=v.data.dtype)

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def frozen(self):
        return FrozenEncoder(self.params, self.config)

    def memory_states(self, memory, histories):
        """Memory after 0, 1, ... gated updates with the given histories."""
        states = [Tensor(memory.M)]
        if not self.config.memory_enabled:
            return states
        for his in histories:
            states.append(update_memory(self.params, states[-1], his.his, memory.n_active))
        return states

    def forward(self, ids, src_len, mask_ta, mask_slot=None, slot_ctx=None, positions=None,
                train=False, rng=None):
        """Vocabulary logits at ``positions`` (default: the last row)."""
        hidden = encode(self.params, self.config, ids, mask_ta, mask_slot, slot_ctx, train, rng)
        if positions is None:
            positions = [len(ids) - 1]
        return logits_at(self.params, hidden, positions)


# ----------------------------------------------------------------------------
# checkpoints: a directory holding model.amgt and meta.json

def save_checkpoint(path, model, stage, frozen=None, lineage=None, extra=None, vocab=None):
    """Write ``model.amgt`` and ``meta.json`` (plus ``vocab.txt`` if given) under ``path``."""
    if stage not in STAGES:
        raise ModelError(f"unknown stage {stage!r}")
    os.makedirs(path, exist_ok=True)
    tensors = model.state_dict()
    if frozen is not None:
        tensors.update({"frozen." + k: v for k, v in frozen.arrays().items()})
    nk.save_tensors(os.path.join(path, "model.amgt"), tensors)
    if vocab is not None:
        vocab.save(os.path.join(path, "vocab.txt"))
    meta = {"config": model.config.to_json(), "stage": stage, "lineage": list(lineage or [])}
    if extra:
        meta.update(extra)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, frozen encoder or None, meta)."""
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise ModelError(f"{path}: not a checkpoint directory")
    with open(meta_path) as fh:
        meta = json.load(fh)
    config = ModelConfig(**meta["config"])
    arrays = nk.load_tensors(os.path.join(path, "model.amgt"))
    model = AMGModel(config, params=init_params(config, 0))
    model.load_state_dict(arrays)
    frozen_arrays = {k[len("frozen."):]: v for k, v in arrays.items() if k.startswith("frozen.")}
    frozen = FrozenEncoder(frozen_arrays, config) if frozen_arrays else None
    return model, frozen, meta


def checkpoint_digest(path):
    """sha256 of a checkpoint's tensor file; identifies it in lineage records."""
    with open(os.path.join(path, "model.amgt"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def checkpoint_vocab(path):
    vpath = os.path.join(path, "vocab.txt")
    return Vocabulary.load(vpath) if os.path.exists(vpath) else None
