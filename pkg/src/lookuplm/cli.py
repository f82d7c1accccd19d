"""``lookuplm`` command line.

Run-log lines (``key=value``) go to stderr, result tables to stdout.  On
failure a single ``error=<kind> message=<text>`` line is written to stderr
and the exit code is 1.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import evaluation, fusion, ngram_hash, synthetic, tokenizer, trainer
from .config import ALL_KEYS, ConfigError, RunConfig, parse_overrides

log = logging.getLogger("lookuplm")


class CliError(Exception):
    pass


def _runlog(**items) -> None:
    for key, value in items.items():
        print(f"{key}={value}", file=sys.stderr)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _parse_set(values) -> dict[str, str]:
    return parse_overrides(values or [], "--set")


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_vocab(args) -> None:
    vocab = tokenizer.build_vocab(_require_file(args.corpus, "corpus"), args.max_size)
    vocab.save(args.out)
    _runlog(corpus=args.corpus, out=args.out, max_size=args.max_size)
    print(f"vocab_size\t{vocab.size}")


def cmd_rescale(args) -> None:
    tokenizer.frequency_rescale_corpus(_require_file(args.corpus, "corpus"), args.out)
    print(f"out\t{args.out}")


def cmd_synth(args) -> None:
    corpus = synthetic.generate_longtail(seed=args.seed, n_rare=args.n_rare)
    paths = corpus.write(args.out_dir)
    _runlog(seed=args.seed, n_rare=args.n_rare, out_dir=args.out_dir)
    for name, path in paths.items():
        print(f"{name}\t{path}")


def _run_config(args) -> RunConfig:
    overrides = {"corpus": args.corpus, "vocab": args.vocab, "out": args.out,
                 "table_dir": getattr(args, "table_dir", None),
                 "steps": args.steps, "seed": args.seed}
    overrides.update(_parse_set(args.set))
    return RunConfig.from_sources(args.config, overrides)


def cmd_train(args) -> None:
    rc = _run_config(args)
    for key in ("corpus", "vocab", "out"):
        if rc.get(key) is None:
            raise CliError(f"--{key} is required (flag or config key)")
    vocab = tokenizer.Vocab.load(_require_file(rc.get("vocab"), "vocab"))
    model_cfg = rc.model_config(vocab.size)
    train_cfg = rc.train_config()
    for line in rc.echo():
        print(line, file=sys.stderr)
    table_dir = rc.get("table_dir")
    if table_dir is not None:
        Path(table_dir).mkdir(parents=True, exist_ok=True)
    ckpt = trainer.train(_require_file(rc.get("corpus"), "corpus"), vocab, model_cfg, train_cfg,
                         out_path=rc.get("out"), table_dir=table_dir)
    print(f"checkpoint\t{rc.get('out')}")
    print(f"sha256\t{_sha256(rc.get('out'))}")
    print(f"dense_params\t{ckpt.dense_params}")
    print(f"sparse_params\t{ckpt.sparse_params}")


def cmd_eval(args) -> None:
    ckpt = trainer.load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    ts = evaluation.TestSetSpec.load(_require_file(args.testset, "test set"))
    _runlog(ckpt=args.ckpt, testset=args.testset, masked=int(args.masked),
            dense_params=ckpt.dense_params, sparse_params=ckpt.sparse_params)
    rows = []
    modes = [True, False] if args.masked else [False]
    for masked in modes:
        res = evaluation.score_testset(ckpt, ts, masked)
        if res.count == 0:
            raise CliError(f"{'masked' if masked else 'unmasked'} selection is empty: "
                           "log perplexity undefined")
        rows.append(("masked" if masked else "unmasked", res.value, res.count, res.total))
    eos = evaluation.eos_total(ckpt, ts)
    print("testset\tmode\tlog_perplexity\ttokens\tnll_sum")
    for mode, value, count, total in rows:
        print(f"{ts.name}\t{mode}\t{value:.6f}\t{count}\t{total:.6f}")
    print(f"{ts.name}\teos\t{eos / max(1, len(ts)):.6f}\t{len(ts)}\t{eos:.6f}")


def cmd_curate(args) -> None:
    sizes = {"Head": args.head_size, "RareA": args.rare_a_size, "RareBOTH": args.rare_both_size}
    sets = evaluation.curate_testsets(_require_file(args.corpus_a, "corpus A"),
                                      _require_file(args.corpus_b, "corpus B"),
                                      _require_file(args.heldout, "held-out corpus"),
                                      args.threshold, sizes)
    paths = evaluation.save_testsets(sets, args.out_dir)
    rare = evaluation.rare_sets(args.corpus_a, args.corpus_b, args.threshold)
    out_dir = Path(args.out_dir)
    (out_dir / "rare_in_a.txt").write_text("".join(w + "\n" for w in sorted(rare.rare_in_A)),
                                           encoding="utf-8")
    (out_dir / "rare_in_b.txt").write_text("".join(w + "\n" for w in sorted(rare.rare_in_B)),
                                           encoding="utf-8")
    _runlog(threshold=args.threshold, out_dir=args.out_dir)
    print("testset\tsentences\tpath")
    for name, ts in sets.items():
        print(f"{name}\t{len(ts)}\t{paths[name]}")


def cmd_hash_stats(args) -> None:
    vocab = tokenizer.Vocab.load(_require_file(args.vocab, "vocab"))
    cfg = ngram_hash.HashConfig(V=vocab.size, U=args.table_size, n=args.order,
                                include_current=args.include_current)
    stats = ngram_hash.collision_stats(_require_file(args.corpus, "corpus"), vocab, cfg)
    _runlog(corpus=args.corpus, order=args.order, table_size=args.table_size,
            include_current=int(args.include_current))
    for key, value in stats.as_rows():
        print(f"{key}\t{value}")


def cmd_rescore(args) -> None:
    ckpt = trainer.load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    weights = fusion.FusionWeights(args.lambda1, args.lambda2)
    ranked, errors = fusion.rescore_nbest(_require_file(args.nbest, "n-best file"), ckpt, weights,
                                          args.out)
    _runlog(ckpt=args.ckpt, nbest=args.nbest, lambda1=args.lambda1, lambda2=args.lambda2,
            utterances=len(ranked), skipped=len(errors))
    for err in errors:
        print(f"skipped_line={err.lineno} utt_id={err.utt_id} reason={err.message}", file=sys.stderr)
    if args.out is None:
        sys.stdout.write(fusion.format_ranked(ranked))


def load_grid(path) -> list[tuple[str | None, dict[str, str]]]:
    """Grid file: one configuration per line as whitespace-separated key=value pairs.

    ``name=...`` labels a row; every other key is a run-config key.
    """
    entries = []
    for lineno, raw in enumerate(tokenizer.read_lines(path), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name = None
        tokens = []
        for tok in line.split():
            if tok.startswith("name="):
                name = tok[5:]
            else:
                tokens.append(tok)
        entries.append((name, parse_overrides(tokens, f"{path}:{lineno}")))
    if not entries:
        raise CliError(f"grid {path} has no configurations")
    return entries


def cmd_sweep(args) -> None:
    base = RunConfig.from_sources(args.config, _parse_set(args.set))
    lines = list(tokenizer.read_lines(_require_file(args.corpus, "corpus")))
    if args.vocab:
        vocab = tokenizer.Vocab.load(_require_file(args.vocab, "vocab"))
    else:
        vocab = tokenizer.vocab_from_sentences(lines, args.max_vocab)
    testsets = evaluation.load_testsets(args.testsets)
    if not testsets:
        raise CliError(f"no test sets ({', '.join(evaluation.TESTSET_FILES.values())}) in {args.testsets}")
    grid, names = [], []
    for name, overrides in load_grid(_require_file(args.grid, "grid")):
        rc = base.merged(overrides)
        cfg = rc.model_config(vocab.size)
        grid.append((cfg, rc.train_config()))
        names.append(name or evaluation.config_name(cfg))
    seeds = [int(s) for s in args.seeds.split(",")]
    _runlog(grid=args.grid, corpus=args.corpus, testsets=args.testsets, seeds=args.seeds,
            configs=len(grid), vocab_size=vocab.size)
    rows = evaluation.ablation_sweep(grid, lines, testsets, vocab, seeds=seeds, names=names)
    table = evaluation.format_sweep(rows)
    if args.out:
        out = Path(args.out)
        out.write_text(table, encoding="utf-8")
        if args.plot:
            from .plotting import plot_sweep
            fig = plot_sweep(rows, out.with_suffix(".png"))
            _runlog(figure=fig)
    sys.stdout.write(table)


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"override a config key (repeatable); keys: {', '.join(ALL_KEYS)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lookuplm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a word vocabulary from a corpus")
    p.add_argument("--corpus", required=True, help="UTF-8 corpus, one sentence per line")
    p.add_argument("--out", required=True, help="vocab file to write")
    p.add_argument("--max-size", type=int, default=4096, help="vocab size including reserved ids")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("rescale", help="log-scale duplicate sentence counts")
    p.add_argument("--corpus", required=True, help="input corpus")
    p.add_argument("--out", required=True, help="rescaled corpus to write")
    p.set_defaults(func=cmd_rescale)

    p = sub.add_parser("synth", help="write the synthetic long-tail corpus")
    p.add_argument("--out-dir", required=True, help="directory for lm_corpus/transcripts/heldout")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--n-rare", type=int, default=600, help="number of rare entities")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--corpus", help="training corpus")
    p.add_argument("--vocab", help="vocab file")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--steps", type=int, help="override the steps key")
    p.add_argument("--seed", type=int, help="override the seed key")
    p.add_argument("--table-dir", help="keep embedding tables as memory-mapped files here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="log perplexity of a checkpoint on a test set")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--testset", required=True, help="test-set TSV (sentence<TAB>mask)")
    p.add_argument("--masked", action="store_true",
                   help="also report the rare-word-only metric")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curate", help="build Head/RareA/RareBOTH test sets")
    p.add_argument("--corpus-a", required=True, help="corpus A (e.g. speech transcripts)")
    p.add_argument("--corpus-b", required=True, help="corpus B (LM training text)")
    p.add_argument("--heldout", required=True, help="held-out sentences")
    p.add_argument("--threshold", type=int, default=evaluation.DEFAULT_THRESHOLD,
                   help="a word is rare when seen at most this many times")
    p.add_argument("--out-dir", required=True, help="directory for the test-set files")
    p.add_argument("--head-size", type=int, help="max Head sentences")
    p.add_argument("--rare-a-size", type=int, help="max RareA sentences")
    p.add_argument("--rare-both-size", type=int, help="max RareBOTH sentences")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("hash-stats", help="n-gram hash collision statistics")
    p.add_argument("--corpus", required=True, help="corpus to scan")
    p.add_argument("--vocab", required=True, help="vocab file")
    p.add_argument("--order", type=int, default=4, help="n-gram order")
    p.add_argument("--table-size", type=int, required=True, help="embedding rows U")
    p.add_argument("--include-current", action="store_true", help="window ends at the current token")
    p.set_defaults(func=cmd_hash_stats)

    p = sub.add_parser("rescore", help="shallow-fusion rescoring of an n-best list")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--nbest", required=True, help="n-best TSV")
    p.add_argument("--lambda1", type=float, default=0.0, help="LM weight")
    p.add_argument("--lambda2", type=float, default=0.0, help="internal-LM weight")
    p.add_argument("--out", help="ranked TSV to write (default: stdout)")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("sweep", help="train and evaluate a grid of configurations")
    p.add_argument("--grid", required=True, help="grid file, one key=value line per config")
    p.add_argument("--corpus", required=True, help="training corpus")
    p.add_argument("--testsets", required=True, help="directory written by curate")
    p.add_argument("--out", help="results TSV (a .png figure is written beside it)")
    p.add_argument("--vocab", help="vocab file (default: built from the corpus)")
    p.add_argument("--max-vocab", type=int, default=65536, help="vocab size when building one")
    p.add_argument("--seeds", default="0", help="comma-separated training seeds")
    p.add_argument("--no-plot", dest="plot", action="store_false", help="skip the figure")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CliError, ConfigError, OSError, ValueError, trainer.TrainingError,
            MemoryError, FloatingPointError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error={type(exc).__name__} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
