"""Command-line entry point: gen-data, train, decode, eval, selftest.

Exit codes: 0 success, 1 selftest failure, 2 usage or input error,
3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from . import numerics as nx
from . import selftest
from .data import (DatasetError, GrammarSpec, Vocabulary, corpus_stats, feature_pipeline,
                   generate_corpus, load_dataset, save_dataset, vocab_path_for)
from .decoding import BeamConfig, StreamingSession, greedy_decode, semantic_beam_search
from .model import ModelConfig, encode, load_checkpoint, save_checkpoint
from .trainer import (REPORT_SCHEMA, DivergenceError, TrainConfig, add_relative_reductions, evaluate,
                      train)

EXIT_OK, EXIT_SELFTEST, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path} is not valid JSON: {exc}") from None


def _load_data(path):
    vpath = vocab_path_for(path)
    if not Path(path).exists():
        raise InputError(f"dataset not found: {path}")
    if not vpath.exists():
        raise InputError(f"vocabulary sidecar not found: {vpath}")
    vocab = Vocabulary.from_json(_read_json(vpath, "vocabulary"))
    try:
        return load_dataset(path, vocab), vocab
    except DatasetError as exc:
        raise InputError(str(exc)) from None


def _load_model(path, vocab: Vocabulary):
    try:
        params = load_checkpoint(path)
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    except ValueError as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from None
    cfg = params.config
    if (cfg.n_wp, cfg.n_slot, cfg.n_intent) != (vocab.n_wp, vocab.n_slot, vocab.n_intent):
        raise InputError(f"checkpoint {path} was trained for a different vocabulary")
    return params


def _beam(text: str) -> BeamConfig:
    try:
        return BeamConfig.parse(text)
    except ValueError as exc:
        raise InputError(f"--beam: {exc}") from None


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        grammar = GrammarSpec.from_json(_read_json(args.grammar, "grammar"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad grammar {args.grammar}: {exc}") from None
    if args.n <= 0:
        raise InputError("--n must be positive")
    utts, vocab = generate_corpus(grammar, args.n, args.seed)
    save_dataset(args.out, utts, vocab)
    vocab.save(vocab_path_for(args.out))
    stats = corpus_stats(utts, vocab)
    print(" ".join(f"{k}={v}" for k, v in stats.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    data, vocab = _load_data(args.data)
    cfg = _read_json(args.config, "config")
    try:
        model_cfg = ModelConfig.for_vocab(vocab, **cfg.get("model", {}))
        train_cfg = TrainConfig.from_json(cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad config {args.config}: {exc}") from None
    held_out = _load_data(args.held_out)[0] if args.held_out else None
    log_path = args.log or f"{args.out}.log.jsonl"
    try:
        result = train(model_cfg, data, train_cfg, held_out=held_out, log_path=log_path,
                       checkpoint_path=None if args.no_epoch_checkpoints else args.out)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(args.out, result.params)
    last = result.epochs[-1] if result.epochs else {}
    print(f"wrote {args.out} ({result.params.num_parameters()} parameters, {len(result.epochs)} epochs)")
    if last:
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))
    return EXIT_OK


def _decode_record(index, res, vocab: Vocabulary) -> dict:
    return {
        "index": index,
        "n_best": [{"tokens": [vocab.word_pieces[t] for t in e.tokens],
                    "slots": [vocab.slot_tags[s] for s in e.slots],
                    "score": e.score} for e in res.n_best],
        "intent": vocab.intents[res.intent],
    }


def cmd_decode(args) -> int:
    beam = _beam(args.beam)
    if args.stream is not None and args.stream < 1:
        raise InputError("--stream chunk size must be positive")
    data, vocab = _load_data(args.data)
    params = _load_model(args.ckpt, vocab)
    lines = []
    for i, utt in enumerate(data):
        feats = feature_pipeline(utt.features)
        if args.greedy:
            res = greedy_decode(params, encode(params, feats), beam.max_emits_per_frame)
        else:
            res = semantic_beam_search(params, encode(params, feats), beam)
        if args.stream is not None:
            # greedy decoding is the (1,1,1,1) beam, so it streams the same way
            stream_beam = BeamConfig(1, 1, 1, 1, beam.max_emits_per_frame) if args.greedy else beam
            session = StreamingSession(params, stream_beam)
            for start in range(0, len(feats), args.stream):
                session.push_frames(feats[start:start + args.stream])
            if not session.finalize().same_as(res):
                print(f"error: utterance {i}: streaming result differs from batch decode", file=sys.stderr)
                return EXIT_SELFTEST
        lines.append(json.dumps(_decode_record(i, res, vocab)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    beam = _beam(args.beam)
    data, vocab = _load_data(args.data)
    if not data:
        raise InputError(f"dataset {args.data} is empty")
    params = _load_model(args.ckpt, vocab)
    report = evaluate(params, data, beam, vocab)
    if args.baseline:
        baseline = _read_json(args.baseline, "baseline report")
        try:
            jsonschema.validate(baseline, REPORT_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise InputError(f"baseline {args.baseline} is not a valid report: {exc.message}") from None
        for warning in add_relative_reductions(report, baseline):
            print(f"warning: {warning}", file=sys.stderr)
    jsonschema.validate(report, REPORT_SCHEMA)
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    m = report["metrics"]
    summary = " ".join(f"{k.upper()}={m[k]:.4f}" for k in ("wer", "semer", "irer", "icer"))
    if "relative_reduction" in report:
        summary += " " + " ".join(f"{k}={'null' if v is None else f'{v:.2f}%'}"
                                  for k, v in report["relative_reduction"].items())
    print(summary if args.out else text, end="\n" if args.out else "")
    return EXIT_OK


def cmd_selftest(args) -> int:
    names = args.only or list(selftest.BATTERIES)
    unknown = [n for n in names if n not in selftest.BATTERIES]
    if unknown:
        raise InputError(f"unknown battery {unknown[0]!r}; choose from {sorted(selftest.BATTERIES)}")
    ok = True
    for name in names:
        if args.inject_sign_flip:
            with nx.debug_flip_gradient_sign():
                result = selftest.BATTERIES[name]()
        else:
            result = selftest.BATTERIES[name]()
        print(result.line(), flush=True)
        ok &= result.passed
    return EXIT_OK if ok else EXIT_SELFTEST


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semrnnt", description="Semantic transducer SLU toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample a synthetic corpus from a grammar")
    g.add_argument("--grammar", required=True, help="grammar JSON file")
    g.add_argument("--out", required=True, help="output dataset (JSON Lines)")
    g.add_argument("--n", type=int, required=True, help="number of utterances")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True, help='JSON with optional "model" and "train" objects')
    t.add_argument("--out", required=True, help="checkpoint to write")
    t.add_argument("--held-out", help="held-out dataset (default: hash split of --data)")
    t.add_argument("--log", help="per-epoch JSON Lines log (default: <out>.log.jsonl)")
    t.add_argument("--no-epoch-checkpoints", action="store_true",
                   help="skip the <out>.epochNNN and <out>.best checkpoints written after each epoch")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a dataset to JSON Lines n-best lists")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--beam", default="1,1,1,1", help='"B_wp,B_slot,B_local,B_beam"')
    d.add_argument("--greedy", action="store_true", help="argmax decoding instead of beam search")
    d.add_argument("--stream", type=int, metavar="CHUNK",
                   help="push frames in CHUNK-sized pieces and check against batch decoding")
    d.add_argument("--out", help="output file (default: stdout)")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score a model and write a metric report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--beam", default="1,1,1,1")
    e.add_argument("--baseline", help="baseline report for relative reductions")
    e.add_argument("--out", help="report file (default: stdout)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the oracle batteries")
    s.add_argument("--only", nargs="+", metavar="BATTERY", help=f"subset of {list(selftest.BATTERIES)}")
    s.add_argument("--inject-sign-flip", action="store_true",
                   help="debug hook: negate every backward gradient (the gradient battery must fail)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
