"""Command-line entry point: ``acvi {train,eval,decode,gradcheck,synth}``.

Configuration precedence is flag override > ``--config`` file > defaults.
Any ``--<field>=<value>`` (or ``--<field> <value>``) that names a
:class:`~acvi.config.TrainConfig` field is an override.  Every command writes
``manifest.txt`` into ``--out`` with the resolved configuration, the seed and
git-style content hashes of the files it read.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric
error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from . import gradsuite  # noqa: E402
from . import tensor as T  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .config import TrainConfig, parse_kv  # noqa: E402
from .data import (SYNTH_KINDS, encode_source, load_feature_corpus, load_text_corpus, synth_feature_task,  # noqa: E402
                   synth_task, write_feature_corpus, write_text_corpus)
from .errors import ConfigError, FormatError  # noqa: E402
from .metrics import format_report  # noqa: E402
from .train import (VocabMismatchError, decode_pair, evaluate, model_from_checkpoint, train,  # noqa: E402
                    vocab_for)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

logger = logging.getLogger("acvi")


class UsageError(Exception):
    pass


def blob_hash(path: str) -> str:
    """Git-style object hash of a file: ``sha1(b"blob <size>\\0" + content)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: str, command: str, config: Optional[TrainConfig], seed: Optional[int],
                   inputs: Sequence[str], extra: Optional[Dict[str, object]] = None) -> str:
    lines = [f"command={command}", f"seed={'' if seed is None else seed}"]
    for path in inputs:
        lines.append(f"input.{os.path.basename(path)}={blob_hash(path)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    if config is not None:
        for key, value in parse_kv(config.to_text()).items():
            lines.append(f"config.{key}={value}")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def split_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Turn leftover ``--key=value`` / ``--key value`` arguments into a mapping."""
    out: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise UsageError(f"unexpected argument {arg!r}")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise UsageError(f"override --{body} needs a value")
            key, value = body, extra[i + 1]
            i += 1
        out[key.replace("-", "_")] = value
        i += 1
    return out


def resolve_config(config_path: Optional[str], overrides: Dict[str, str], seed: Optional[int]) -> TrainConfig:
    cfg = TrainConfig()
    if config_path:
        if not os.path.exists(config_path):
            raise FileNotFoundError(f"config file not found: {config_path}")
        with open(config_path, encoding="utf-8") as fh:
            cfg = TrainConfig.from_text(fh.read(), cfg)
    cfg = TrainConfig.from_mapping(overrides, cfg)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _load_examples(args) -> Tuple[list, List[str]]:
    if getattr(args, "features", None):
        if not args.targets:
            raise UsageError("--features needs --targets")
        return load_feature_corpus(args.features, args.targets), [args.features, args.targets]
    if not args.data:
        raise UsageError("a corpus is required: --data FILE (or --features FILE --targets FILE)")
    return load_text_corpus(args.data), [args.data]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args, overrides) -> int:
    from .plotting import plot_loss_curve

    cfg = resolve_config(args.config, overrides, args.seed)
    examples, inputs = _load_examples(args)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        inputs.append(args.resume)
    if args.config:
        inputs.append(args.config)
    os.makedirs(args.out, exist_ok=True)
    result = train(cfg, examples, resume=resume)
    ckpt = os.path.join(args.out, "checkpoint.acvi")
    save_checkpoint(ckpt, result.checkpoint)
    start = resume.step if resume is not None else 0
    with open(os.path.join(args.out, "loss_trace.txt"), "w", encoding="utf-8") as fh:
        for k, (loss, mode) in enumerate(zip(result.trace, result.modes)):
            fh.write(f"step={start + k + 1} loss={loss!r} context={mode}\n")
    plot_loss_curve(result.trace, os.path.join(args.out, "loss_curve.png"), result.modes,
                    title=f"{cfg.model} training loss")
    write_manifest(args.out, "train", cfg, cfg.seed, inputs,
                   {"final_step": result.checkpoint.step, "checkpoint_sha1": blob_hash(ckpt)})
    print(f"checkpoint={ckpt}")
    print(f"final_step={result.checkpoint.step}")
    print(f"final_loss={result.trace[-1]!r}" if result.trace else "final_loss=")
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    from .plotting import plot_attention, plot_scores

    if overrides:
        raise UsageError(f"eval takes no config overrides (got {sorted(overrides)})")
    cp = load_checkpoint(args.checkpoint)
    examples, inputs = _load_examples(args)
    os.makedirs(args.out, exist_ok=True)
    vocab = None
    if args.vocab_from_data:
        vocab = vocab_for(examples, cp.config.vocab_max_size)
    result = evaluate(cp, examples, args.beam_width, args.max_len, vocab=vocab)
    report = format_report(result.metrics)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    with open(os.path.join(args.out, "outputs.txt"), "w", encoding="utf-8") as fh:
        for out in result.outputs:
            fh.write(" ".join(out) + "\n")
    plot_scores(result.metrics, os.path.join(args.out, "scores.png"), title=f"{cp.config.model} ROUGE")
    if result.attention is not None and examples:
        src = examples[0][0]
        src_labels = src if isinstance(src, list) else [str(i) for i in range(result.attention.shape[1])]
        plot_attention(result.attention, src_labels, examples[0][1] + ["</s>"],
                       os.path.join(args.out, "attention.png"))
    write_manifest(args.out, "eval", cp.config, cp.config.seed, [args.checkpoint] + inputs,
                   {"beam_width": args.beam_width or cp.config.beam_width})
    sys.stdout.write(report)
    return EXIT_OK


def cmd_decode(args, overrides) -> int:
    if overrides:
        raise UsageError(f"decode takes no config overrides (got {sorted(overrides)})")
    cp = load_checkpoint(args.checkpoint)
    if cp.feature_dim is not None:
        raise VocabMismatchError("checkpoint was trained on feature sequences; decode reads token lines")
    if not os.path.exists(args.input):
        raise FileNotFoundError(f"input file not found: {args.input}")
    model = model_from_checkpoint(cp)
    width = args.beam_width or cp.config.beam_width
    max_len = args.max_len or cp.config.max_decode_len
    lines_out = []
    with open(args.input, encoding="utf-8") as fh:
        for line in fh:
            tokens = (line.lower() if cp.config.lowercase else line).split()
            if not tokens:
                lines_out.append("")
                continue
            pair = encode_source(tokens, cp.vocab)
            lines_out.append(" ".join(decode_pair(model, pair, cp.vocab, width, max_len)))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "decoded.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(s + "\n" for s in lines_out))
    write_manifest(args.out, "decode", cp.config, cp.config.seed, [args.checkpoint, args.input],
                   {"beam_width": width, "max_len": max_len})
    for s in lines_out:
        print(s)
    return EXIT_OK


def cmd_gradcheck(args, overrides) -> int:
    if overrides:
        raise UsageError(f"gradcheck takes no config overrides (got {sorted(overrides)})")
    suites = gradsuite.SUITES if args.scope == "all" else (args.scope,)
    seed = 0 if args.seed is None else args.seed
    results = gradsuite.run(suites, seed)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.suite}.{r.name}={status} max_rel_err={r.report.max_error:.3e} "
                     f"tol={r.report.tolerance:g} seconds={r.seconds:.2f}")
    failed = [r for r in results if not r.passed]
    lines.append(f"cases={len(results)} failed={len(failed)}")
    text = "\n".join(lines) + "\n"
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    write_manifest(args.out, "gradcheck", None, seed, [], {"scope": args.scope})
    sys.stdout.write(text)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_synth(args, overrides) -> int:
    if overrides:
        raise UsageError(f"synth takes no config overrides (got {sorted(overrides)})")
    seed = 0 if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "features":
        examples = synth_feature_task(seed, args.n, args.vocab_size, args.feature_dim, args.min_len, args.max_len)
        paths = [os.path.join(args.out, "features.txt"), os.path.join(args.out, "targets.txt")]
        write_feature_corpus(paths[0], paths[1], examples)
    else:
        examples = synth_task(args.kind, seed, args.n, args.vocab_size, args.min_len, args.max_len)
        paths = [os.path.join(args.out, "corpus.tsv")]
        write_text_corpus(paths[0], examples)
    write_manifest(args.out, "synth", None, seed, [],
                   {"kind": args.kind, "n": args.n, "vocab_size": args.vocab_size, "min_len": args.min_len,
                    "max_len": args.max_len, **{f"output.{os.path.basename(p)}": blob_hash(p) for p in paths}})
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--debug", action="store_true", help="raise on any NaN/Inf produced by an op")

    parser = argparse.ArgumentParser(prog="acvi", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model; extra --key=value flags override config")
    p.add_argument("--data", help="text corpus, one 'source<TAB>target' per line")
    p.add_argument("--features", help="feature corpus ('N f' header + rows per sequence)")
    p.add_argument("--targets", help="target token file for --features")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="decode a corpus and write a metric report")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--features")
    p.add_argument("--targets")
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--vocab-from-data", action="store_true",
                   help="rebuild the vocabulary from the data and insist it matches the checkpoint's")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", parents=[common], help="decode one source per line")
    p.add_argument("checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("gradcheck", parents=[common], help="run the registered finite-difference suites")
    p.add_argument("--scope", choices=("all",) + gradsuite.SUITES, default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("kind", choices=SYNTH_KINDS + ("features",))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=20)
    p.add_argument("--min-len", dest="min_len", type=int, default=3)
    p.add_argument("--max-len", dest="max_len", type=int, default=10)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=8)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; remap to the usage code
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        overrides = split_overrides(extra)
        if args.debug:
            T.set_debug(True)
        return args.func(args, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VocabMismatchError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (T.NumericError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        T.set_debug(False)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
