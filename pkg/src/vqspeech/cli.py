"""Command-line front end.

Every subcommand accepts ``--config``, repeatable ``--set key=value``,
``--out``, ``--seed`` and ``--workers``.  Overrides apply after the config
file; ``--seed`` overrides ``train.seed``.  Failures print one line of the
form ``error: <Kind>: <message>`` to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import trainer as T
from .config import ExperimentConfig, parse_codebooks, provenance_header
from .errors import DataError, VQSpeechError
from .evaluation import MODES, abx_evaluate, cooccurrence, purity, write_abx_report, write_cooccurrence
from .quantizer import write_codes
from .signal_io import Corpus, load_corpus, synthesize_corpus, write_corpus

EXIT_ERROR = 2


def _common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", default=".", help="output directory (default: current directory)")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers; 1 is bitwise reproducible")


def build_parser():
    parser = argparse.ArgumentParser(prog="vqspeech", description="Discrete speech representation toolkit")
    parser.add_argument("--version", action="version", version=f"vqspeech {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,extract,abx,cooccur,sweep,inspect}")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic corpus and manifest")
    _common(p)
    p.add_argument("--split", choices=("train", "eval"), default="train",
                   help="eval uses eval.n_utterances and data.seed + eval.seed_offset")

    p = sub.add_parser("train", help="train a model; writes checkpoint.bin and metrics.csv")
    _common(p)
    p.add_argument("--manifest", help="training manifest (default: synthesize from data.*)")

    for name, text in (("extract", "write discrete codes for every manifest entry"),
                       ("abx", "write an ABX report"),
                       ("cooccur", "write the code/phoneme co-occurrence matrix")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", help="evaluation manifest (default: synthetic eval split)")
        if name == "abx":
            p.add_argument("--mode", choices=MODES + ("all",), help="default: eval.mode")
        if name == "cooccur":
            p.add_argument("--counts", action="store_true", help="write raw counts instead of conditionals")

    p = sub.add_parser("sweep", help="train and evaluate one model per codebook shape")
    _common(p)
    p.add_argument("--codebooks", help="comma-separated KxG list (default: sweep.codebooks)")
    p.add_argument("--manifest", help="training manifest (default: synthesize from data.*)")
    p.add_argument("--eval-manifest", help="evaluation manifest (default: synthetic eval split)")

    p = sub.add_parser("inspect", help="print checkpoint metadata as JSON")
    p.add_argument("checkpoint")
    return parser


def _config(args, base=None):
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        if base is not None:
            raise VQSpeechError("--config cannot be combined with a checkpoint; use --set")
    else:
        cfg = base or ExperimentConfig()
    cfg = cfg.with_overrides(args.overrides)
    if args.seed is not None:
        cfg = cfg.with_overrides({"train.seed": args.seed})
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_corpus(args, cfg) -> Corpus:
    return load_corpus(args.manifest) if args.manifest else synthesize_corpus(cfg.data)


def _eval_corpus(path, cfg) -> Corpus:
    return load_corpus(path) if path else synthesize_corpus(T.eval_corpus_config(cfg))


def _load_model(args):
    state = T.load_checkpoint(args.checkpoint)
    return state, _config(args, base=state.config)


def cmd_synth(args):
    cfg = _config(args)
    data = cfg.data if args.split == "train" else T.eval_corpus_config(cfg)
    corpus = synthesize_corpus(data)
    manifest = write_corpus(corpus, _out(args), provenance_header(cfg))
    print(manifest)


def cmd_train(args):
    cfg = _config(args)
    out = _out(args)
    corpus = _train_corpus(args, cfg)
    header = provenance_header(cfg)
    (out / "config.txt").write_text(header + "\n" + cfg.to_text(), encoding="utf-8")
    result = T.train(corpus, cfg, log_path=out / "metrics.csv", checkpoint_path=out / "checkpoint.bin")
    T.write_metrics(out / "metrics.csv", result.metrics, header)
    last = result.metrics[-1]
    print(f"update={last['update']} task_loss={last['task_loss']:.6f} perplexity={last['perplexity']:.3f}")


def cmd_extract(args):
    state, cfg = _load_model(args)
    out = _out(args) / "codes"
    out.mkdir(exist_ok=True)
    corpus = _eval_corpus(args.manifest, cfg)
    header = provenance_header(cfg)
    rate = T.latent_frame_rate(cfg)
    for name, w in zip(corpus.names, corpus.waveforms):
        res = T.extract(state.params, cfg, w)
        write_codes(out / f"{name}.codes", res.indices, cfg.quantizer.K, rate, header)
    print(out)


def cmd_abx(args):
    state, cfg = _load_model(args)
    corpus = _eval_corpus(args.manifest, cfg)
    segments, _, _ = T.frame_segments(state.params, cfg, corpus)
    if not segments:
        raise DataError("no aligned utterances to evaluate")
    mode = args.mode or cfg.eval.mode
    modes = MODES if mode == "all" else (mode,)
    results = [abx_evaluate(segments, cfg.eval.n_triplets, cfg.train.seed, m) for m in modes]
    path = _out(args) / "abx.csv"
    write_abx_report(path, results, provenance_header(cfg))
    for r in results:
        print(f"mode={r.mode} n_triplets={r.n_triplets} error_rate={r.error_rate:.6f}")


def cmd_cooccur(args):
    state, cfg = _load_model(args)
    corpus = _eval_corpus(args.manifest, cfg)
    _, pairs, _ = T.frame_segments(state.params, cfg, corpus)
    if not pairs:
        raise DataError("no aligned utterances to evaluate")
    m = cooccurrence(pairs, n_phonemes=cfg.data.n_classes)
    path = _out(args) / "cooccurrence.csv"
    write_cooccurrence(path, m, provenance_header(cfg), counts=args.counts)
    print(f"codes={len(m.codes)} purity={purity(m):.6f}")


def cmd_sweep(args):
    cfg = _config(args)
    codebooks = parse_codebooks(args.codebooks or cfg.sweep.codebooks)
    corpus = _train_corpus(args, cfg)
    eval_corpus = _eval_corpus(args.eval_manifest, cfg)
    rows = T.sweep_codebooks(cfg, codebooks, corpus, eval_corpus, workers=args.workers)
    path = _out(args) / "sweep.csv"
    T.write_table(path, rows, provenance_header(cfg))
    print(path)


def cmd_inspect(args):
    manifest = T.read_checkpoint_manifest(args.checkpoint)
    manifest.pop("_data_offset", None)
    manifest.pop("config", None)
    manifest["n_tensors"] = len(manifest["tensors"])
    manifest["n_parameters"] = int(sum(np.prod(t["shape"], dtype=np.int64)
                                       for t in manifest["tensors"] if t["name"].startswith("param.")))
    manifest["tensors"] = {t["name"]: t["shape"] for t in manifest["tensors"]}
    print(json.dumps(manifest, indent=1, sort_keys=True))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "abx": cmd_abx,
    "cooccur": cmd_cooccur,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (VQSpeechError, FileNotFoundError) as exc:
        kind = type(exc).__name__
        message = " ".join(str(exc).split())
        print(f"error: {kind}: {message}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
