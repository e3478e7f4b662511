"""Command-line entry point: ``nmtadapt <command> [--config FILE] [--seed N]``.

Exit status: 0 ok, 2 configuration error, 3 data error, 4 format or
integrity error. ``NMTADAPT_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from ..errors import ConfigError, NmtAdaptError
from . import pipeline
from .config import load_config

THREADS_ENV = "NMTADAPT_THREADS"


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nmtadapt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run configuration file, or a bundled name: defaults, desk (default: defaults)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--data-dir", help="override data_dir")
        p.add_argument("--work-dir", help="override work_dir")
        return p

    add("align", "align every language's embeddings into the pivot space")
    add("build-vocab", "build the base-language vocabulary from aligned embeddings")
    add("train", "train the multilingual base model")
    p = add("extend", "add the new language's words to the base model")
    p.add_argument("--new-lang")
    p = add("adapt", "adapt the extended model to the new language")
    p.add_argument("--new-lang")
    p.add_argument("--method", help="supervised, denoise_ae, frozen_ae, frozen_denoise_ae or backtranslate")
    p = add("backtranslate", "write a backtranslated corpus for the new language")
    p.add_argument("--new-lang")
    p = add("decode", "translate a file, one tokenized sentence per line")
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="output file (default: stdout)")
    p.add_argument("--checkpoint", help="model checkpoint (default: the base model)")
    p.add_argument("--beam", type=int)
    add("evaluate", "BLEU of every model on the test sets")
    add("diagnose", "encoder representation diagnostics of the base model")
    p = add("pipeline", "run align through diagnose in order")
    p.add_argument("--stages", help="comma-separated subset of stages")
    p = sub.add_parser("synth", help="write a synthetic language family to a directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concepts", type=int, default=500)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--pairs", type=int, default=3000)
    p.add_argument("--mono", type=int, default=1000)
    return ap


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, data_dir=args.data_dir, work_dir=args.work_dir,
                              new_lang=getattr(args, "new_lang", None),
                              adapt_method=getattr(args, "method", None),
                              beam_size=getattr(args, "beam", None))


def _run(args) -> None:
    if args.command == "synth":
        from ..synthbench import FamilySpec, generate_family
        spec = FamilySpec(concepts=args.concepts, dim=args.dim, pairs_per_direction=args.pairs,
                          mono_sentences=args.mono)
        root = generate_family(spec, args.seed).write(args.out)
        print(f"wrote synthetic family to {root}")
        return
    cfg = _config(args)
    if args.command == "decode":
        out = pipeline.stage_decode(cfg, args.input, args.output, args.src_lang, args.tgt_lang, args.checkpoint)
        if args.output is None:
            sys.stdout.write("".join(" ".join(s) + "\n" for s in out))
        return
    if args.command == "pipeline":
        stages = args.stages.split(",") if args.stages else pipeline.PIPELINE
        results = pipeline.execute(cfg, stages)
    else:
        results = pipeline.execute(cfg, [args.command])
    for r in results:
        if r["stage"] == "evaluate":
            print(r["text"])
        else:
            print(json.dumps(r, sort_keys=True, default=str))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads is not None and (not threads.isdigit() or int(threads) < 1):
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {threads!r}")
        with threadpool_limits(limits=int(threads) if threads else None):
            _run(args)
    except NmtAdaptError as e:
        print(f"nmtadapt: error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
