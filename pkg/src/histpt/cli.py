"""Command-line entry point: ``histpt <subcommand> [flags]``.

Every flag can also be given in a key-value config file (``--config``)::

    # comments are allowed
    method = histpt
    lr = 0.005
    no-global = true

Flags on the command line override the file.
"""

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import harness as H
from .errors import ConfigurationError, HisTPTError, StepError
from .gradcheck import check_gradients
from .stream import (
    DomainSpec,
    StreamConfig,
    load_embedding_stream,
    write_embedding_jsonl,
    write_embedding_stream,
)
from .tuner import ClassVocabulary, ToyEncoder, TunerConfig

log = logging.getLogger("histpt")

METHODS = {"zero-shot": "zero_shot", "tpt": "tpt_baseline", "histpt": "histpt"}


# ---------------------------------------------------------------------------
# argument parsing


def _order(text):
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated domain ids, got {text!r}")


def _steps(text):
    """``1-10`` or ``1,2,5``."""
    try:
        if "-" in text:
            lo, hi = (int(x) for x in text.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1-10 or a list like 1,2,5: {text!r}")


def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="key-value file with defaults for any flag")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--embeddings", metavar="FILE",
                   help="precomputed embedding stream (binary or JSON lines) instead of the synthetic benchmark")
    p.add_argument("--class-embeddings", metavar="FILE",
                   help="C x D class-name embeddings (.npy or JSON) for --embeddings streams")
    p.add_argument("--out", metavar="FILE", help="write results here (.csv or .json)")
    p.add_argument("--workers", type=int, default=1, help="process pool size for independent runs")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_tuner(p):
    p.add_argument("--method", choices=sorted(METHODS), default="histpt")
    p.add_argument("--local-size", type=int, default=32)
    p.add_argument("--hard-size", type=int, default=32)
    p.add_argument("--hard-k", type=int, default=16)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--opt-steps", type=int, default=1)
    p.add_argument("--tokens", type=int, default=4, metavar="M", help="number of prompt tokens")
    p.add_argument("--dim", type=int, metavar="D", help="token width (default: image feature width)")
    p.add_argument("--no-local", action="store_true")
    p.add_argument("--no-hard", action="store_true")
    p.add_argument("--no-global", action="store_true")
    p.add_argument("--no-adaptive", action="store_true", help="uniform fusion weights")
    p.add_argument("--init-tokens", metavar="FILE", help="initial tokens (.npy or JSON M x D)")
    p.add_argument("--order", type=_order, metavar="IDS",
                   help="fixed domain order, e.g. 0,1,2 (default: shuffled per run)")
    p.add_argument("--window", type=int, default=H.WINDOW, help="trailing window for curves")


def build_parser():
    parser = argparse.ArgumentParser(prog="histpt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-stream", help="write one synthetic stream as an embedding file")
    _add_common(p)
    p.add_argument("--run-index", type=int, default=0)
    p.add_argument("--order", type=_order, metavar="IDS")

    p = sub.add_parser("run", help="run one method over the benchmark")
    _add_common(p)
    _add_tuner(p)
    p.add_argument("--trace", metavar="FILE", help="per-sample JSON-lines trace")
    p.add_argument("--checkpoint", metavar="FILE",
                   help="with --stop-at: save a resumable checkpoint of run --run-index")
    p.add_argument("--stop-at", type=int, metavar="N", help="stop after N samples")
    p.add_argument("--resume", metavar="FILE", help="continue a run from a checkpoint")
    p.add_argument("--run-index", type=int, default=0, help="run used by --checkpoint/--resume")

    p = sub.add_parser("ablate", help="bank and retrieval ablation matrix")
    _add_common(p)
    _add_tuner(p)

    p = sub.add_parser("sweep-steps", help="accuracy versus inner optimization steps")
    _add_common(p)
    _add_tuner(p)
    p.add_argument("--steps", type=_steps, default=list(range(1, 11)), help="e.g. 1-10 or 1,2,5")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference token gradients")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=100, help="number of random problems")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("report", help="summarize metrics files")
    p.add_argument("metrics", nargs="+", metavar="FILE")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--out", metavar="FILE", help="JSON summary including curve data")
    p.add_argument("--window", type=int, default=H.WINDOW)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def read_config_file(path):
    """Parse ``key = value`` lines (no section header needed)."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        cp.read_string("[histpt]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return dict(cp["histpt"])


def _coerce(action, raw, path):
    key = action.option_strings[-1]
    if isinstance(action, argparse._StoreTrueAction):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{path}: {key} expects true/false, got {raw!r}")
    value = raw
    if action.type is not None:
        try:
            value = action.type(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigurationError(f"{path}: bad value for {key}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise ConfigurationError(f"{path}: {key} must be one of {sorted(action.choices)}")
    return value


def parse_args(argv=None):
    """Parse flags, filling unset ones from ``--config`` when given."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    sub = _subparser(parser, args.command)
    by_key = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_key[opt[2:]] = action
    values = {}
    for key, raw in read_config_file(args.config).items():
        action = by_key.get(key.replace("_", "-"))
        if action is None or action.dest in ("config", "help"):
            raise ConfigurationError(f"{args.config}: unknown setting {key!r} for '{args.command}'")
        values[action.dest] = _coerce(action, raw, args.config)
    sub.set_defaults(**values)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# shared setup


def method_from_args(args) -> H.MethodSpec:
    return H.MethodSpec(METHODS[args.method], not args.no_local, not args.no_hard,
                        not args.no_global, not args.no_adaptive)


def tuner_config(args, token_dim) -> TunerConfig:
    return TunerConfig(lr=args.lr, weight_decay=args.weight_decay, opt_steps=args.opt_steps,
                       n_tokens=args.tokens, dim=args.dim or token_dim,
                       local_size=args.local_size, hard_size=args.hard_size, hard_k=args.hard_k,
                       gamma=args.gamma, tau=args.tau)


class FileBenchmark(H.Benchmark):
    """A single recorded stream; every run replays it in file order."""

    def __init__(self, stream, encoder, vocab, seed):
        recorded = DomainSpec(np.eye(stream.dim), np.zeros(stream.dim), 0.0, name="recorded")
        sc = StreamConfig(stream.n_classes, stream.dim, max(1, len(stream)), [recorded], 1, seed)
        super().__init__(sc, encoder, vocab)
        self._stream = stream

    def stream(self, run_index=0, order=None):
        if order is not None:
            raise ConfigurationError("--order does not apply to --embeddings streams")
        return self._stream


def _load_class_embeddings(path):
    path = Path(path)
    try:
        arr = np.load(path) if path.suffix == ".npy" else np.array(json.loads(path.read_text()))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"{path}: cannot read class embeddings: {exc}") from None
    return np.asarray(arr, dtype=np.float64)


def build_benchmark(args) -> H.Benchmark:
    dim = getattr(args, "dim", None)
    if not args.embeddings:
        return H.Benchmark.reference(seed=args.seed, runs=args.runs, token_dim=dim)
    stream = load_embedding_stream(args.embeddings)
    if len(stream) == 0:
        raise ConfigurationError(f"{args.embeddings}: no records to run on")
    encoder = ToyEncoder.seeded(stream.dim, dim or stream.dim, args.seed)
    if args.class_embeddings:
        emb = _load_class_embeddings(args.class_embeddings)
        if emb.shape != (stream.n_classes, encoder.token_dim):
            raise ConfigurationError(
                f"class embeddings must be {stream.n_classes} x {encoder.token_dim}, got {emb.shape}")
        vocab = ClassVocabulary([f"class{c}" for c in range(len(emb))], emb)
    else:
        # Without text embeddings, anchor each class at its mean feature in the file.
        log.warning("no --class-embeddings given; anchoring classes at their mean features")
        unit = stream.features / np.linalg.norm(stream.features, axis=1, keepdims=True)
        anchors = np.stack([unit[stream.classes == c].mean(axis=0) if np.any(stream.classes == c)
                            else np.full(stream.dim, 1.0 / np.sqrt(stream.dim))
                            for c in range(stream.n_classes)])
        vocab = H.make_vocabulary(anchors, encoder, args.seed, gap=0.0, offset=0.0)
    return FileBenchmark(stream, encoder, vocab, args.seed)


def _meta(args, config, method=None):
    meta = {"seed": args.seed, "runs": args.runs, "config": asdict(config),
            "source": args.embeddings or "reference",
            "window_definition": f"trailing {args.window}-sample window (harness-defined)"}
    if method is not None:
        meta["method"] = method.label
    if getattr(args, "order", None) is not None:
        meta["order"] = args.order
    return meta


def _init_tokens(args):
    return H.load_tokens(args.init_tokens) if args.init_tokens else None


def _with_window(results, window):
    for r in results:
        r.metrics.window = window
    return results


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_stream(args):
    bench = H.Benchmark.reference(seed=args.seed, runs=args.runs)
    stream = bench.stream(args.run_index, args.order)
    if not args.out:
        raise ConfigurationError("gen-stream needs --out")
    if args.out.endswith(".jsonl"):
        write_embedding_jsonl(args.out, stream)
    else:
        write_embedding_stream(args.out, stream)
    print(f"wrote {len(stream)} samples ({stream.n_classes} classes, dim {stream.dim}) to {args.out}")
    return 0


def _run_checkpointed(args, bench, method, config):
    """Single run that stops at --stop-at and/or resumes from --resume."""
    if args.resume:
        ck = H.load_checkpoint(args.resume)
        if H.config_hash(ck["config"]) != H.config_hash(config):
            raise ConfigurationError(f"{args.resume}: checkpoint was written with a different config")
        method, run_index, start = ck["method"], ck["run_index"], ck["position"]
        state, banks = ck["state"], ck["banks"]
    else:
        run_index, start, state, banks = args.run_index, 0, None, None
    stream = bench.stream(run_index, args.order)
    result = H.run_stream(stream, method, config, bench.encoder, bench.vocab, bench.seed,
                          run_index, _init_tokens(args), bool(args.trace), state, banks,
                          start, args.stop_at, args.window)
    if args.checkpoint:
        position = start + len(result.metrics.per_sample_correct)
        H.save_checkpoint(args.checkpoint, result.state, result.banks, config, position,
                          run_index, bench.seed, method)
        print(f"checkpoint at sample {position} written to {args.checkpoint}")
    return [result]


def cmd_run(args):
    bench = build_benchmark(args)
    method = method_from_args(args)
    config = tuner_config(args, bench.encoder.token_dim)
    try:
        if args.checkpoint or args.resume or args.stop_at is not None:
            if args.checkpoint and args.stop_at is None:
                raise ConfigurationError("--checkpoint needs --stop-at")
            results = _run_checkpointed(args, bench, method, config)
        else:
            runs = 1 if args.embeddings else args.runs
            results = H.run_experiment(bench, method, config, runs, args.order, _init_tokens(args),
                                       bool(args.trace), args.workers)
    except StepError as exc:
        if args.out and exc.partial is not None:
            H.write_metrics(args.out, [exc.partial], {**_meta(args, config, method), "partial": True})
            log.error("partial metrics written to %s", args.out)
        raise
    _with_window(results, args.window)
    metrics = [r.metrics for r in results]
    if args.out:
        H.write_metrics(args.out, metrics, _meta(args, config, method))
    if args.trace:
        H.write_trace(args.trace, [rec for r in results for rec in r.trace])
    print(H.format_report(H.report([metrics]), args.window))
    return 0


def cmd_ablate(args):
    bench = build_benchmark(args)
    config = tuner_config(args, bench.encoder.token_dim)
    runs = 1 if args.embeddings else args.runs
    table = H.run_ablation_matrix(bench, config, runs, args.workers)
    width = max(len(k) for k in table)
    print(f"{'configuration':{width}s}  mean accuracy")
    for label, row in table.items():
        print(f"{label:{width}s}  {100 * row['mean_accuracy']:.2f}")
    if args.out:
        metrics = [m for row in table.values() for m in row["runs"]]
        H.write_metrics(args.out, metrics, _meta(args, config))
    return 0


def cmd_sweep_steps(args):
    bench = build_benchmark(args)
    config = tuner_config(args, bench.encoder.token_dim)
    runs = 1 if args.embeddings else args.runs
    rows = H.run_step_sweep(bench, config, args.steps, method_from_args(args), runs, args.workers)
    print("opt_steps  mean accuracy")
    for steps, acc in rows:
        print(f"{steps:9d}  {100 * acc:.2f}")
    if args.out:
        path = Path(args.out)
        if path.suffix == ".csv":
            path.write_text("opt_steps,mean_accuracy\n"
                            + "".join(f"{s},{a!r}\n" for s, a in rows))
        else:
            path.write_text(json.dumps({"meta": _meta(args, config),
                                        "rows": [{"opt_steps": s, "mean_accuracy": a}
                                                 for s, a in rows]}, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args):
    results = check_gradients(args.configs, args.seed, args.step, args.tau)
    worst_ce = max(r.ce_error for r in results)
    worst_ent = max(r.entropy_error for r in results)
    failed = [r for r in results if not r.passed(args.tol)]
    for r in failed:
        print(f"config {r.index} (C={r.n_classes}, D={r.dim}, M={r.n_tokens}): "
              f"ce {r.ce_error:.2e}, entropy {r.entropy_error:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} configurations within {args.tol:g}; "
          f"worst relative error: cross-entropy {worst_ce:.2e}, entropy {worst_ent:.2e}")
    return 1 if failed else 0


def cmd_report(args):
    summary = H.report(args.metrics)
    print(H.format_report(summary, args.window))
    if args.out:
        doc = {label: {**s, "per_domain_accuracy": {str(k): v for k, v in s["per_domain_accuracy"].items()},
                       **({"per_domain_delta": {str(k): v for k, v in s["per_domain_delta"].items()}}
                          if "per_domain_delta" in s else {})}
               for label, s in summary.items()}
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return 0


COMMANDS = {
    "gen-stream": cmd_gen_stream,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep-steps": cmd_sweep_steps,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except HisTPTError as exc:
        print(f"histpt: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except HisTPTError as exc:
        print(f"histpt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
