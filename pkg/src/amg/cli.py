"""Command-line entry point: ``amg <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 failure while running.

Every command writes a run manifest next to its main output
(``<output>.manifest.json``) holding the resolved configuration, the seed,
content hashes of the inputs and the checkpoint lineage. Manifests carry
wall-clock time and therefore differ between runs; the artifacts
themselves are byte-identical for identical inputs and seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .corpus import GeneratorSpec, make_corpus, make_test_split
from .decoding import generate_file
from .metrics import evaluate_file, write_report
from .model import AMGModel, ModelConfig, checkpoint_digest, checkpoint_vocab, load_checkpoint
from .numkernel import CheckpointError
from .table import Vocabulary, build_vocab, linearize, read_jsonl, split_tokens, write_jsonl
from .training import TrainConfig, finetune, pretrain_phase1, pretrain_phase2

log = logging.getLogger("amg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------------------
# manifests

def file_digest(path):
    """sha256 of a file, or of a directory's files in sorted relative order."""
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode() + b"\0")
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict
    outputs: list
    lineage: list = dataclasses.field(default_factory=list)
    wall_clock_s: float = 0.0
    version: str = __version__

    @property
    def input_hash(self):
        h = hashlib.sha256()
        for path in sorted(self.inputs):
            h.update(self.inputs[path].encode())
        return h.hexdigest()

    def write(self, path):
        obj = dataclasses.asdict(self)
        obj["input_hash"] = self.input_hash
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _manifest_path(output):
    return output.rstrip("/\\") + ".manifest.json"


def _write_manifest(args, config, inputs, outputs, lineage, t0):
    man = RunManifest(args.command, config, args.seed,
                      {p: file_digest(p) for p in inputs if p}, list(outputs), lineage,
                      round(time.time() - t0, 3))
    man.write(_manifest_path(outputs[0]))


# ----------------------------------------------------------------------------
# configuration

def load_config(path):
    """JSON file with optional "model", "train", "corpus" and "decode" sections."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    unknown = set(cfg) - {"model", "train", "corpus", "decode"}
    if unknown:
        raise UsageError(f"{path}: unknown config sections {sorted(unknown)}")
    return cfg


def _dataclass_from(cls, section, **overrides):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    values = dict(section)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "betas" in values:  # accept the paired form too
        values["beta1"], values["beta2"] = values.pop("betas")
    return cls(**values)


def train_config(args, cfg):
    return _dataclass_from(TrainConfig, cfg.get("train", {}), seed=args.seed, lr=args.lr,
                           batch_size=args.batch_size, grad_accum=args.grad_accum)


def model_config(cfg, vocab, **overrides):
    section = dict(cfg.get("model", {}))
    section.pop("vocab_size", None)
    return _dataclass_from(ModelConfig, section, vocab_size=len(vocab), **overrides)


def _open_checkpoint(path):
    model, frozen, meta = load_checkpoint(path)
    vocab = checkpoint_vocab(path)
    if vocab is None:
        raise UsageError(f"{path}: checkpoint has no vocab.txt")
    return model, frozen, meta, vocab


# ----------------------------------------------------------------------------
# commands

def cmd_make_corpus(args, cfg):
    section = dict(cfg.get("corpus", {}))
    section.update({k: v for k, v in (("n_tables", args.n_tables), ("n_pairs", args.n_pairs))
                    if v is not None})
    section["seed"] = args.seed
    spec = _dataclass_from(GeneratorSpec, section)
    tables, pairs = make_corpus(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    outs = [os.path.join(args.out_dir, "tables.jsonl"), os.path.join(args.out_dir, "pairs.jsonl")]
    write_jsonl(outs[0], [e.to_json() for e in tables])
    write_jsonl(outs[1], [e.to_json() for e in pairs])
    if args.n_test:
        outs.append(os.path.join(args.out_dir, "test.jsonl"))
        write_jsonl(outs[2], [e.to_json() for e in make_test_split(spec, args.n_test)])
    config = {"n_tables": spec.n_tables, "n_pairs": spec.n_pairs, "n_test": args.n_test}
    return config, [], [args.out_dir] + outs, []


def vocab_corpus(paths):
    corpus = []
    for path in paths:
        for ex in read_jsonl(path):
            corpus.append(linearize(ex.table)[0])
            if ex.reference is not None:
                corpus.append(split_tokens(ex.reference))
    return corpus


def cmd_build_vocab(args, cfg):
    vocab = build_vocab(vocab_corpus(args.inputs), min_count=args.min_count)
    vocab.save(args.out)
    return {"min_count": args.min_count, "size": len(vocab)}, args.inputs, [args.out], []


def cmd_pretrain(args, cfg):
    tc = train_config(args, cfg)
    tables = read_jsonl(args.tables)
    if args.phase == 1:
        if args.init is not None:
            model, _, _, vocab = _open_checkpoint(args.init)
        else:
            if args.vocab is None:
                raise UsageError("pretrain --phase 1 needs --vocab or --init")
            vocab = Vocabulary.load(args.vocab)
            model = AMGModel(model_config(cfg, vocab), seed=args.seed)
        model, _, _ = pretrain_phase1(tables, vocab, model, tc, out_dir=args.out,
                                      epochs=args.epochs)
        inputs = [args.tables, args.vocab, args.init]
    else:
        if args.init is None:
            raise UsageError("pretrain --phase 2 needs --init <phase-1 checkpoint>")
        vocab = checkpoint_vocab(args.init)
        if vocab is None:
            raise UsageError(f"{args.init}: checkpoint has no vocab.txt")
        model, _, _ = pretrain_phase2(tables, vocab, args.init, tc, out_dir=args.out,
                                      epochs=args.epochs, allow_skip=args.allow_skip)
        inputs = [args.tables, args.init]
    config = {"train": dataclasses.asdict(tc), "model": model.config.to_json(),
              "phase": args.phase, "epochs": args.epochs}
    return config, inputs, [args.out], list(getattr(model, "lineage", []))


def cmd_finetune(args, cfg):
    tc = train_config(args, cfg)
    pairs = read_jsonl(args.pairs)
    val = read_jsonl(args.val) if args.val else None
    if args.init is not None:
        vocab = checkpoint_vocab(args.init)
        if vocab is None:
            raise UsageError(f"{args.init}: checkpoint has no vocab.txt")
        source = args.init
    else:
        if not args.allow_skip:
            raise UsageError("finetune needs --init <phase-2 checkpoint> (or --allow-skip)")
        if args.vocab is None:
            raise UsageError("finetune --allow-skip without --init needs --vocab")
        vocab = Vocabulary.load(args.vocab)
        source = AMGModel(model_config(cfg, vocab), seed=args.seed)
    model, _, _ = finetune(pairs, vocab, source, tc, val_pairs=val, out_dir=args.out,
                           epochs=args.epochs, allow_skip=args.allow_skip)
    config = {"train": dataclasses.asdict(tc), "model": model.config.to_json(),
              "epochs": args.epochs}
    return (config, [args.pairs, args.val, args.init, args.vocab], [args.out],
            list(getattr(model, "lineage", [])))


def decode_options(args, cfg):
    section = cfg.get("decode", {})
    opts = {"beam_size": section.get("beam_size", 3),
            "length_penalty": section.get("length_penalty", 1.0),
            "max_tgt": section.get("max_tgt")}
    for key, val in (("beam_size", args.beam), ("length_penalty", args.length_penalty),
                     ("max_tgt", args.max_tgt)):
        if val is not None:
            opts[key] = val
    if opts["beam_size"] < 1:
        raise UsageError("--beam must be >= 1")
    return opts


def cmd_generate(args, cfg):
    model, frozen, meta, vocab = _open_checkpoint(args.checkpoint)
    opts = decode_options(args, cfg)
    generate_file(model, frozen, vocab, args.tables, args.out, stage=meta["stage"], **opts)
    lineage = meta.get("lineage", []) + [{"stage": meta["stage"],
                                          "sha256": checkpoint_digest(args.checkpoint)}]
    return opts, [args.checkpoint, args.tables], [args.out], lineage


def cmd_evaluate(args, cfg):
    report = evaluate_file(args.pred, args.gold, lam=args.lam)
    write_report(report, args.out)
    print(json.dumps({k: report[k] for k in ("bleu4", "rouge_l", "parent", "parent_t")},
                     sort_keys=True))
    return {"lambda": args.lam}, [args.pred, args.gold], [args.out], []


def run_ablation(out_dir, tables_path, pairs_path, test_path, vocab, cfg, tc,
                 no_slot_attention=False, no_memory=False, pretrain_epochs=None,
                 finetune_epochs=None, decode=None, seed=17, val_path=None):
    """Full pipeline for one model variant; returns the evaluation report.

    Writes ``phase1/``, ``phase2/`` and ``finetuned/`` checkpoints,
    ``predictions.jsonl`` and ``report.json`` under ``out_dir``.
    """
    overrides = {}
    if no_slot_attention:
        overrides["slot_layers"] = 0
    if no_memory:
        overrides["use_memory"] = False
    config = model_config(cfg, vocab, **overrides)
    os.makedirs(out_dir, exist_ok=True)
    tables = read_jsonl(tables_path)
    model = AMGModel(config, seed=seed)
    p1, p2, ft = (os.path.join(out_dir, d) for d in ("phase1", "phase2", "finetuned"))
    pretrain_phase1(tables, vocab, model, tc, out_dir=p1, epochs=pretrain_epochs)
    pretrain_phase2(tables, vocab, p1, tc, out_dir=p2, epochs=pretrain_epochs)
    val = read_jsonl(val_path) if val_path else None
    finetune(read_jsonl(pairs_path), vocab, p2, tc, val_pairs=val, out_dir=ft,
             epochs=finetune_epochs)
    model, frozen, meta = load_checkpoint(ft)
    pred = os.path.join(out_dir, "predictions.jsonl")
    generate_file(model, frozen, vocab, test_path, pred, stage=meta["stage"], **(decode or {}))
    report = evaluate_file(pred, test_path)
    write_report(report, os.path.join(out_dir, "report.json"))
    return report


def cmd_ablate(args, cfg):
    tc = train_config(args, cfg)
    vocab = Vocabulary.load(args.vocab)
    opts = decode_options(args, cfg)
    report = run_ablation(args.out_dir, args.tables, args.pairs, args.test, vocab, cfg, tc,
                          args.no_slot_attention, args.no_memory, args.pretrain_epochs,
                          args.finetune_epochs, opts, args.seed, args.val)
    print(json.dumps({"bleu4": report["bleu4"], "parent_t": report["parent_t"]},
                     sort_keys=True))
    config = {"train": dataclasses.asdict(tc), "decode": opts,
              "no_slot_attention": args.no_slot_attention, "no_memory": args.no_memory,
              "pretrain_epochs": args.pretrain_epochs, "finetune_epochs": args.finetune_epochs}
    return (config, [args.tables, args.pairs, args.test, args.vocab, args.val],
            [args.out_dir], [])


# ----------------------------------------------------------------------------
# parser

def _train_flags(p, epochs=True):
    if epochs:
        p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--lr", type=float, help="learning rate (default 5e-5)")
    p.add_argument("--batch-size", type=int, help="examples per micro-batch (default 4)")
    p.add_argument("--grad-accum", type=int, help="micro-batches per update (default 11)")


def _decode_flags(p):
    p.add_argument("--beam", type=int, help="beam size (default 3)")
    p.add_argument("--length-penalty", type=float, help="length exponent (default 1.0)")
    p.add_argument("--max-tgt", type=int, help="maximum output length (default 64)")


def build_parser():
    parser = argparse.ArgumentParser(prog="amg", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=17)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-tables", type=int)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--n-test", type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("build-vocab", help="vocabulary from JSONL datasets")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain", help="task-adaptive pre-training on unlabeled tables")
    p.add_argument("--phase", type=int, choices=(1, 2), required=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--vocab")
    p.add_argument("--init", help="starting checkpoint (phase 1 output for phase 2)")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-skip", action="store_true")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="few-shot fine-tuning on table/reference pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--val")
    p.add_argument("--init", help="phase-2 checkpoint")
    p.add_argument("--vocab", help="only with --allow-skip and no --init")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-skip", action="store_true")
    _train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="decode descriptions for a table file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--out", required=True)
    _decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against gold pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=0.5, help="PARENT recall mixing weight")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate one model variant end to end")
    p.add_argument("--tables", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--val")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-slot-attention", action="store_true",
                   help="token attention only; implies no memory")
    p.add_argument("--no-memory", action="store_true", help="memory frozen at its initial value")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    _train_flags(p, epochs=False)
    _decode_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        cfg = load_config(args.config)
        config, inputs, outputs, lineage = args.func(args, cfg)
        _write_manifest(args, config, inputs, outputs, lineage, t0)
    except (ValueError, KeyError, OSError, CheckpointError) as exc:
        print(f"amg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported, mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"amg {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
