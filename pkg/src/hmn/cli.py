"""Command-line entry point: ``hmn {synth,train,eval,generate,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import autodiff as ad
from .config import ModelConfig, TrainConfig, load_config
from .data import load_dataset, synth_generate
from .evaluation import caption_corpus, decode_dataset
from .metrics import EvalCorpus, evaluate, tokenize
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("hmn")

EVAL_MANIFEST_VERSION = 1


def _setup_logging() -> None:
    level = os.environ.get("HMN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ValueError(f"HMN_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ad.set_debug(level == "debug")


def _write_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _configs(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    return load_config(path) if path else (ModelConfig(), TrainConfig())


def cmd_synth(args) -> int:
    ds = synth_generate(args.seed, args.videos, out=args.out)
    log.info("wrote %d videos (%d words) to %s", len(ds), len(ds.vocab), args.out)
    return 0


def cmd_train(args) -> int:
    model_config, train_config = _configs(args.config)
    if args.seed is not None:
        train_config = replace(train_config, seed=args.seed)
    if args.epochs is not None:
        train_config = replace(train_config, epochs=args.epochs)
    dataset = load_dataset(args.data)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    with log_path.open("w") as fh:
        def record(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
        ckpt = train(dataset, model_config, train_config, on_epoch=record)
    save_checkpoint(ckpt, args.out)
    log.info("saved checkpoint to %s", args.out)
    return 0


def _decoded_corpus(args) -> EvalCorpus:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    decoded = decode_dataset(ckpt.model, dataset, beam=args.beam)
    return caption_corpus(ckpt.model, dataset, decoded)


def read_eval_manifest(path) -> EvalCorpus:
    """``{"version": 1, "videos": [{"id", "candidate", "references": [...]}]}``;
    captions are strings (tokenized here) or token lists."""
    data = json.loads(Path(path).read_text())
    if data.get("version") != EVAL_MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported evaluation manifest version {data.get('version')!r}")

    def words(c):
        return tuple(tokenize(c)) if isinstance(c, str) else tuple(str(t).lower() for t in c)

    cands, refs = {}, {}
    for rec in data["videos"]:
        vid = rec["id"]
        if vid in cands:
            raise ValueError(f"{path}: duplicate video id {vid!r}")
        cands[vid] = words(rec["candidate"])
        refs[vid] = [words(r) for r in rec["references"]]
    return EvalCorpus(cands, refs)


def cmd_eval(args) -> int:
    if args.manifest:
        corpus = read_eval_manifest(args.manifest)
    elif args.ckpt and args.data:
        corpus = _decoded_corpus(args)
    else:
        raise SystemExit(_usage_error(args, "eval needs --manifest, or both --ckpt and --data"))
    _write_json(evaluate(corpus), args.out)
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    decoded = decode_dataset(ckpt.model, dataset, beam=args.beam)
    _write_json({vid: " ".join(ckpt.model.vocab.decode(ids)) for vid, ids in decoded.items()}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model

    model_config, train_config = _configs(args.config)
    err = check_model(model_config, train_config, max_entries=args.max_entries or None, seed=args.seed)
    print(f"max relative error {err:.3e}")
    return 0 if err < args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmn", description="Hierarchical modular video captioning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic caption corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSON-lines loss log (default: <out>.log.jsonl)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score captions: an evaluation manifest or a checkpoint on a dataset")
    p.add_argument("--manifest")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="caption every video of a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=20, help="entries probed per parameter; 0 probes all")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _usage_error(args, message: str) -> int:
    args.parser_for_errors.print_usage(sys.stderr)
    print(f"hmn: error: {message}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.parser_for_errors = parser
    try:
        _setup_logging()
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # report, don't trace
        log.debug("failure", exc_info=True)
        print(f"hmn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
