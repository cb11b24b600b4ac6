"""Corruption, masked-LM loss, Adam, and the pre-training / fine-tuning stages."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import numkernel as nk
from .masks import build_masks
from .model import (
    AMGModel,
    ModelError,
    checkpoint_digest,
    SlotContext,
    extract_history,
    init_memory,
    load_checkpoint,
    save_checkpoint,
)
from .table import (
    CLS_ID,
    E_CLS_ID,
    E_SEP_ID,
    MASK_ID,
    NO_SLOT,
    SEP_ID,
    encode_reference,
    encode_table,
)

log = logging.getLogger(__name__)

STAGE_CODES = {"phase1": 1, "phase2": 2, "finetuned": 3}
_TABLE_STRUCTURAL = np.array([CLS_ID, SEP_ID, E_CLS_ID, E_SEP_ID])


class TrainingError(RuntimeError):
    pass


class StageError(ValueError):
    """A checkpoint was used out of pipeline order."""


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    grad_accum: int = 11
    pretrain_epochs: int = 30
    finetune_epochs: int = 50
    pretrain_mask_rate: float = 0.20
    finetune_mask_rate: float = 0.70
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None
    seed: int = 17

    def __post_init__(self):
        for name in ("pretrain_mask_rate", "finetune_mask_rate"):
            rate = getattr(self, name)
            if not 0 < rate < 1:
                raise ValueError(f"{name}={rate} must lie in (0, 1)")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


# ----------------------------------------------------------------------------
# corruption

def _mask_positions(eligible, rate, rng):
    eligible = np.asarray(eligible, dtype=np.int64)
    if not 0 < rate < 1:
        raise ValueError(f"mask rate {rate} must lie in (0, 1)")
    if eligible.size == 0:
        return eligible
    k = math.ceil(rate * eligible.size)
    return np.sort(rng.choice(eligible, size=k, replace=False))


def corrupt_table(ids, rate, rng):
    """Mask ``ceil(rate * eligible)`` table tokens; structural markers are never masked.

    Returns (corrupted ids, masked positions).
    """
    ids = np.asarray(ids, dtype=np.int64)
    eligible = np.flatnonzero(~np.isin(ids, _TABLE_STRUCTURAL))
    pos = _mask_positions(eligible, rate, rng)
    out = ids.copy()
    out[pos] = MASK_ID
    return out, pos


def corrupt_reference(ids, rate, rng):
    """Mask ``ceil(rate * len(ids))`` reference positions, boundary tokens included."""
    ids = np.asarray(ids, dtype=np.int64)
    pos = _mask_positions(np.arange(len(ids)), rate, rng)
    out = ids.copy()
    out[pos] = MASK_ID
    return out, pos


# ----------------------------------------------------------------------------
# prepared examples

@dataclass
class Prepared:
    """Per-example tensors that stay fixed during a stage."""
    id: str
    enc: object
    tgt: object = None
    memory: object = None
    histories: tuple = ()
    events: tuple = ()      # (absolute row of the closing [E_SEP], slot)


def prepare(example, vocab, config, frozen, with_reference):
    enc = encode_table(example.table, vocab, config.max_src, config.slot_n)
    tgt = None
    if with_reference:
        if example.reference is None:
            raise TrainingError(f"example {example.id!r} has no reference")
        tgt = encode_reference(example.reference, vocab, enc, config.max_tgt)
    memory, histories, events = None, (), ()
    if config.slot_layers > 0:
        memory = init_memory(enc, frozen, config.slot_n)
        src_len = len(enc)
        if tgt is not None:
            events = tuple((src_len + p, j) for p, j in tgt.complete_slot_events)
            spans = _target_spans(tgt)
            span_ids = [tgt.token_ids[a:b] for a, b in spans]
        else:
            events = tuple((b, j) for j, (a, b) in enumerate(enc.slot_spans))
            span_ids = [enc.slot_value_ids(j) for j in range(enc.n_slots)]
        if config.memory_enabled:
            histories = tuple(extract_history(s, enc, frozen) for s in span_ids)
    return Prepared(example.id, enc, tgt, memory, histories, events)


def _target_spans(tgt):
    spans = []
    start = None
    for i, t in enumerate(tgt.token_ids):
        if t == E_CLS_ID:
            start = i + 1
        elif t == E_SEP_ID:
            spans.append((start, i))
    return spans


def row_states(n, events):
    """Number of slot-completion events strictly before each row."""
    state = np.zeros(n, dtype=np.int64)
    for row, _ in events:
        state[row + 1:] += 1
    return state


def assemble(model, prep, src_ids, tgt_ids=None, use_memory=True):
    """Inputs for one forward pass: (ids, src_len, mask_ta, mask_slot, slot_ctx).

    Target positions that carry [MASK] present the null memory vector to slot
    attention because their slot is not observable at inference time.
    """
    src_len = len(src_ids)
    if tgt_ids is None:
        ids = np.asarray(src_ids, dtype=np.int64)
        tgt_labels = np.zeros(0, dtype=np.int64)
    else:
        ids = np.concatenate([src_ids, tgt_ids]).astype(np.int64)
        tgt_labels = prep.tgt.slot_of[:len(tgt_ids)]
    mask_ta, mask_slot = build_masks(src_len, tgt_labels)
    ctx = None
    if model.config.slot_layers > 0:
        labels = np.concatenate([prep.enc.slot_of, tgt_labels])
        labels = np.where(ids == MASK_ID, NO_SLOT, labels)
        histories = prep.histories if (use_memory and model.config.memory_enabled) else ()
        events = prep.events[:len(histories)]
        states = model.memory_states(prep.memory, histories)
        ctx = SlotContext(states, row_states(len(ids), events), labels)
    return ids, src_len, mask_ta, mask_slot, ctx


def mlm_loss(model, batch, train=False, rng=None):
    """Mean cross-entropy over all masked positions of a batch.

    ``batch`` holds (prepared, corrupted source, corrupted target or None,
    masked rows (absolute), labels, use_memory) tuples.
    """
    total = sum(len(item[3]) for item in batch)
    if total == 0:
        raise TrainingError("batch has no masked positions")
    loss = None
    for prep, src, tgt, rows, labels, use_memory in batch:
        if len(rows) == 0:
            continue
        ids, src_len, mask_ta, mask_slot, ctx = assemble(model, prep, src, tgt, use_memory)
        logits = model.forward(ids, src_len, mask_ta, mask_slot, ctx, positions=rows,
                               train=train, rng=rng)
        part = nk.scale(nk.cross_entropy_masked(logits, labels), len(rows) / total)
        loss = part if loss is None else nk.add(loss, part)
    return loss


def _corrupted_item(prep, mode, rate, rng, use_memory):
    if mode == "table":
        src, pos = corrupt_table(prep.enc.token_ids, rate, rng)
        return (prep, src, None, pos, prep.enc.token_ids[pos], use_memory)
    tgt, pos = corrupt_reference(prep.tgt.token_ids, rate, rng)
    return (prep, prep.enc.token_ids, tgt, pos + len(prep.enc), prep.tgt.token_ids[pos], use_memory)


# ----------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params):
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def decays(name, value):
    """Weight decay applies to matrices other than embeddings."""
    return value.ndim == 2 and not name.startswith("emb.")


def adam_step(params, state, config):
    """One bias-corrected Adam step with decoupled weight decay, using ``p.grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if config.weight_decay and decays(name, p.data):
            update = update + config.weight_decay * p.data
        p.data = (p.data - config.lr * update).astype(p.data.dtype)
    return state


# ----------------------------------------------------------------------------
# training loop

def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def train_loop(model, prepared, mode, stage, config, epochs, use_memory=True, val=None,
               log_path=None, resume_dir=None, state_dir=None):
    """Run ``epochs`` epochs of masked-LM training.

    ``mode`` is "table" (corrupt the linearized table) or "reference"
    (corrupt the target). Returns (history dict, best state dict or None).
    Randomness is keyed on (seed, stage, epoch, example) so a resumed run
    matches an uninterrupted one.
    """
    code = STAGE_CODES[stage]
    rate = config.pretrain_mask_rate if mode == "table" else config.finetune_mask_rate
    params = model.parameters()
    opt = OptimizerState.zeros(params)
    start_epoch = 0
    history = {"train_loss": [], "val_loss": []}
    best = None
    best_loss = math.inf
    if resume_dir is not None:
        opt, start_epoch, history, best, best_loss = _load_train_state(resume_dir, model)
    log_fh = open(log_path, "a") if log_path else None
    per_step = config.batch_size * config.grad_accum
    try:
        for epoch in range(start_epoch, epochs):
            order = _rng(config.seed, code, epoch).permutation(len(prepared))
            epoch_loss, epoch_count = 0.0, 0
            for start in range(0, len(order), per_step):
                if config.max_steps is not None and opt.step >= config.max_steps:
                    break
                chunk = order[start:start + per_step]
                model.zero_grad()
                step_rng = _rng(config.seed, code, epoch, start, 1)
                step_loss = 0.0
                for b in range(0, len(chunk), config.batch_size):
                    batch = [_corrupted_item(prepared[i], mode, rate,
                                             _rng(config.seed, code, epoch, i), use_memory)
                             for i in chunk[b:b + config.batch_size]]
                    batch = [item for item in batch if len(item[3])]
                    if not batch:
                        continue
                    loss = mlm_loss(model, batch, train=True, rng=step_rng)
                    n_b = len(chunk[b:b + config.batch_size])
                    nk.backward(nk.scale(loss, n_b / len(chunk)))
                    step_loss += float(loss.data) * n_b / len(chunk)
                adam_step(params, opt, config)
                epoch_loss += step_loss * len(chunk)
                epoch_count += len(chunk)
                if log_fh:
                    log_fh.write(json.dumps({"step": opt.step, "loss": round(step_loss, 6),
                                             "lr": config.lr, "stage": stage}) + "\n")
            history["train_loss"].append(epoch_loss / max(epoch_count, 1))
            if val is not None:
                vl = evaluate_loss(model, val, mode, rate, config.seed, use_memory)
                history["val_loss"].append(vl)
                if vl < best_loss:
                    best_loss = vl
                    best = model.state_dict()
            if state_dir is not None:
                _save_train_state(state_dir, model, opt, epoch + 1, history, best, best_loss)
            if config.max_steps is not None and opt.step >= config.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    history["steps"] = opt.step
    return history, best


def evaluate_loss(model, prepared, mode, rate, seed, use_memory=True):
    """Masked-LM loss under a fixed corruption (keyed on seed) with dropout off."""
    total, count = 0.0, 0
    with nk.no_grad():
        for i, prep in enumerate(prepared):
            item = _corrupted_item(prep, mode, rate, _rng(seed, 99, i), use_memory)
            n = len(item[3])
            if n == 0:
                continue
            total += float(mlm_loss(model, [item]).data) * n
            count += n
    return total / max(count, 1)


def reconstruction_accuracy(model, prepared, mode, rate, seed, use_memory=True):
    """Fraction of masked tokens whose argmax prediction is the original token."""
    hit, count = 0, 0
    with nk.no_grad():
        for i, prep in enumerate(prepared):
            _, src, tgt, rows, labels, mem = _corrupted_item(prep, mode, rate,
                                                             _rng(seed, 98, i), use_memory)
            if len(rows) == 0:
                continue
            ids, src_len, mask_ta, mask_slot, ctx = assemble(model, prep, src, tgt, mem)
            logits = model.forward(ids, src_len, mask_ta, mask_slot, ctx, positions=rows)
            hit += int((logits.data.argmax(axis=1) == labels).sum())
            count += len(rows)
    return hit / max(count, 1)


def _save_train_state(path, model, opt, epoch, history, best, best_loss):
    os.makedirs(path, exist_ok=True)
    tensors = {"param." + k: v for k, v in model.state_dict().items()}
    tensors.update({"adam.m." + k: v for k, v in opt.m.items()})
    tensors.update({"adam.v." + k: v for k, v in opt.v.items()})
    if best is not None:
        tensors.update({"best." + k: v for k, v in best.items()})
    nk.save_tensors(os.path.join(path, "train_state.amgt"), tensors)
    with open(os.path.join(path, "train_state.json"), "w") as fh:
        json.dump({"epoch": epoch, "step": opt.step, "history": history,
                   "best_loss": None if math.isinf(best_loss) else best_loss}, fh)


def _load_train_state(path, model):
    arrays = nk.load_tensors(os.path.join(path, "train_state.amgt"))
    with open(os.path.join(path, "train_state.json")) as fh:
        meta = json.load(fh)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param.")})
    opt = OptimizerState({k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")},
                         {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")},
                         meta["step"])
    best = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")} or None
    best_loss = meta["best_loss"] if meta["best_loss"] is not None else math.inf
    return opt, meta["epoch"], meta["history"], best, best_loss


# ----------------------------------------------------------------------------
# stages

def _stage_model(model_or_path, expected_stage, allow_skip):
    if isinstance(model_or_path, AMGModel):
        return model_or_path, list(getattr(model_or_path, "lineage", []))
    model, _, meta = load_checkpoint(model_or_path)
    if expected_stage is not None and meta["stage"] != expected_stage and not allow_skip:
        raise StageError(f"{model_or_path}: expected a {expected_stage!r} checkpoint, "
                            f"found {meta['stage']!r}")
    entry = {"stage": meta["stage"], "sha256": checkpoint_digest(model_or_path)}
    return model, meta.get("lineage", []) + [entry]


def pretrain_phase1(tables, vocab, model, config, out_dir=None, epochs=None, **kw):
    """Table reconstruction with slot attention on and memory held at its initial value."""
    frozen = model.frozen()
    prepared = [prepare(ex, vocab, model.config, frozen, with_reference=False) for ex in tables]
    epochs = config.pretrain_epochs if epochs is None else epochs
    history, _ = train_loop(model, prepared, "table", "phase1", config, epochs,
                            use_memory=False, **kw)
    if out_dir is not None:
        save_checkpoint(out_dir, model, "phase1", frozen=frozen,
                        lineage=getattr(model, "lineage", []), extra={"history": history},
                        vocab=vocab)
    return model, frozen, history


def pretrain_phase2(tables, vocab, phase1, config, out_dir=None, epochs=None, allow_skip=False,
                    **kw):
    """Table reconstruction with the full model, gated memory updates included."""
    model, lineage = _stage_model(phase1, "phase1", allow_skip)
    frozen = model.frozen()
    prepared = [prepare(ex, vocab, model.config, frozen, with_reference=False) for ex in tables]
    epochs = config.pretrain_epochs if epochs is None else epochs
    history, _ = train_loop(model, prepared, "table", "phase2", config, epochs,
                            use_memory=True, **kw)
    model.lineage = lineage
    if out_dir is not None:
        save_checkpoint(out_dir, model, "phase2", frozen=frozen, lineage=lineage,
                        extra={"history": history}, vocab=vocab)
    return model, frozen, history


def finetune(pairs, vocab, phase2, config, val_pairs=None, out_dir=None, epochs=None,
             allow_skip=False, **kw):
    """Reference masked-LM training; keeps the parameters with the best validation loss."""
    model, lineage = _stage_model(phase2, "phase2", allow_skip)
    frozen = model.frozen()
    prepared = [prepare(ex, vocab, model.config, frozen, with_reference=True) for ex in pairs]
    val = None
    if val_pairs:
        val = [prepare(ex, vocab, model.config, frozen, with_reference=True) for ex in val_pairs]
    epochs = config.finetune_epochs if epochs is None else epochs
    history, best = train_loop(model, prepared, "reference", "finetuned", config, epochs,
                               use_memory=True, val=val, **kw)
    if best is not None:
        model.load_state_dict(best)
    model.lineage = lineage
    if out_dir is not None:
        save_checkpoint(out_dir, model, "finetuned", frozen=frozen, lineage=lineage,
                        extra={"history": history}, vocab=vocab)
    return model, frozen, history
