"""Experiment runner: methods, ablations, step sweeps, metrics, traces, checkpoints."""

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import rng
from .banks import SOURCES, KnowledgeBanks
from .errors import ConfigurationError, HisTPTError, ParseError, StepError
from .stream import Stream, StreamConfig, fixed_order_stream, generate_stream
from .tuner import (
    ClassVocabulary,
    PromptState,
    ToyEncoder,
    TunerConfig,
    predict,
    tpt_baseline_step,
    tune_step,
)

log = logging.getLogger(__name__)

__all__ = [
    "Benchmark",
    "MethodSpec",
    "RunMetrics",
    "RunResult",
    "ZERO_SHOT",
    "TPT",
    "HISTPT",
    "ABLATION_ROWS",
    "make_vocabulary",
    "run_stream",
    "run_experiment",
    "run_ablation_matrix",
    "run_step_sweep",
    "windowed_accuracy",
    "segment_accuracy",
    "windowed_segment_accuracy",
    "report",
    "format_delta",
    "save_checkpoint",
    "load_checkpoint",
    "load_tokens",
    "metrics_to_json",
    "metrics_to_csv",
    "load_metrics",
    "write_metrics",
    "write_trace",
    "format_report",
    "config_hash",
    "initial_state",
]

WINDOW = 50


@dataclass(frozen=True)
class MethodSpec:
    kind: str = "histpt"
    enable_local: bool = True
    enable_hard: bool = True
    enable_global: bool = True
    enable_adaptive_retrieval: bool = True

    KINDS = ("zero_shot", "tpt_baseline", "histpt")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown method {self.kind!r}; choose from {self.KINDS}")

    @property
    def enabled(self):
        flags = (self.enable_local, self.enable_hard, self.enable_global)
        return tuple(name for name, on in zip(SOURCES, flags) if on)

    @property
    def label(self) -> str:
        if self.kind != "histpt":
            return self.kind
        banks = "+".join(self.enabled) or "none"
        return f"histpt[{banks}{'' if self.enable_adaptive_retrieval else ',uniform'}]"

    def flags(self) -> dict:
        return {
            "local": self.enable_local,
            "hard": self.enable_hard,
            "global": self.enable_global,
            "adaptive": self.enable_adaptive_retrieval,
        }


ZERO_SHOT = MethodSpec("zero_shot")
TPT = MethodSpec("tpt_baseline")
HISTPT = MethodSpec("histpt")


def _histpt(local, hard, global_, adaptive):
    return MethodSpec("histpt", local, hard, global_, adaptive)


# Row structure of the bank ablation: baseline, singles, pairs, all three, all three + adaptive.
ABLATION_ROWS = (
    _histpt(False, False, False, False),
    _histpt(True, False, False, False),
    _histpt(False, True, False, False),
    _histpt(False, False, True, False),
    _histpt(True, True, False, False),
    _histpt(True, False, True, False),
    _histpt(False, True, True, False),
    _histpt(True, True, True, False),
    _histpt(True, True, True, True),
)


def make_vocabulary(prototypes, encoder: ToyEncoder, seed, gap=0.3, offset=2.0,
                    offset_classes=2, scale=1.0, names=None):
    """Class-name embeddings for a synthetic benchmark.

    With zero tokens the text feature of class c is ``scale * (mu_c + gap_c + o)``:
    ``gap_c`` is a random per-class offset of norm ``gap`` and ``o`` a shared
    offset of norm ``offset`` along the first ``offset_classes`` class centres.
    The shared part is what a good prompt can cancel. ``scale`` sets the
    embedding norm relative to the prompt tokens and therefore how far one
    optimizer step moves the prediction.
    """
    g = rng.generator(seed, "vocab.gap")
    target = prototypes + gap * _unit_rows(g.standard_normal(prototypes.shape))
    if offset:
        shared = prototypes[:offset_classes].sum(axis=0)
        target = target + offset * shared / np.linalg.norm(shared)
    # Least-squares preimage under the frozen text map.
    emb = np.linalg.lstsq(encoder.w_text, scale * target.T, rcond=None)[0].T
    names = names or [f"class{c}" for c in range(len(prototypes))]
    return ClassVocabulary(names, emb)


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class Benchmark:
    """Stream configuration plus the frozen model that reads it."""

    stream_config: StreamConfig
    encoder: ToyEncoder
    vocab: ClassVocabulary

    @classmethod
    def reference(cls, seed=42, n_classes=10, dim=32, samples_per_domain=200, runs=100,
                  token_dim=None, n_domains=3):
        from .stream import default_domain_specs, generate_class_prototypes

        protos = generate_class_prototypes(n_classes, dim, seed)
        sc = StreamConfig(n_classes, dim, samples_per_domain,
                          default_domain_specs(dim, seed, protos, n_domains), runs, seed)
        encoder = ToyEncoder.seeded(dim, token_dim or dim, seed)
        return cls(sc, encoder, make_vocabulary(sc.prototypes, encoder, seed))

    @property
    def seed(self):
        return self.stream_config.seed

    def stream(self, run_index=0, order=None) -> Stream:
        if order is None:
            return generate_stream(self.stream_config, run_index)
        return fixed_order_stream(self.stream_config, order, run_index)


@dataclass
class RunMetrics:
    """Per-run accuracy summary. ``mean_accuracy`` is the mean of ``per_sample_correct``."""

    per_sample_correct: np.ndarray
    domains: np.ndarray
    predictions: np.ndarray
    window: int = WINDOW
    run_index: int = 0
    seed: int = 0
    method: str = ""
    flags: dict = field(default_factory=dict)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.per_sample_correct)) if len(self.per_sample_correct) else 0.0

    @property
    def windowed_accuracy(self):
        return windowed_accuracy(self.per_sample_correct, self.window)

    @property
    def per_domain_accuracy(self) -> dict:
        return {int(d): float(np.mean(self.per_sample_correct[self.domains == d]))
                for d in np.unique(self.domains)}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "run_index": self.run_index,
            "method": self.method,
            "flags": self.flags,
            "mean_accuracy": self.mean_accuracy,
            "per_domain_accuracy": {str(k): v for k, v in self.per_domain_accuracy.items()},
            "window": self.window,
            "windowed_accuracy": self.windowed_accuracy.tolist(),
            "per_sample_correct": "".join("1" if c else "0" for c in self.per_sample_correct),
            "domains": self.domains.tolist(),
            "predictions": self.predictions.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        correct = np.array([ch == "1" for ch in d["per_sample_correct"]], dtype=bool)
        return cls(correct, np.array(d["domains"], dtype=np.int64),
                   np.array(d["predictions"], dtype=np.int64), d.get("window", WINDOW),
                   d.get("run_index", 0), d.get("seed", 0), d.get("method", ""),
                   d.get("flags", {}))


def windowed_accuracy(correct, window=WINDOW):
    """Trailing-window mean: entry i averages samples max(0, i - window + 1) .. i."""
    c = np.concatenate([[0.0], np.cumsum(np.asarray(correct, dtype=np.float64))])
    idx = np.arange(1, len(c))
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def windowed_segment_accuracy(correct, window=WINDOW, n_segments=3):
    """Mean of the trailing-window accuracy curve over each of ``n_segments`` slices."""
    curve = windowed_accuracy(correct, window)
    return np.array([p.mean() for p in np.array_split(curve, n_segments)])


def segment_accuracy(correct, n_segments=3):
    """Accuracy within each of ``n_segments`` equal consecutive slices of the stream."""
    parts = np.array_split(np.asarray(correct, dtype=np.float64), n_segments)
    return np.array([p.mean() for p in parts])


@dataclass
class RunResult:
    metrics: RunMetrics
    trace: list
    state: PromptState
    banks: Optional[KnowledgeBanks]


def load_tokens(path):
    """Initial prompt tokens from ``.npy`` or a JSON list of rows."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            tokens = np.load(path)
        else:
            tokens = np.array(json.loads(path.read_text()), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: cannot read tokens: {exc}") from None
    if tokens.ndim != 2 or not np.all(np.isfinite(tokens)):
        raise ParseError(f"{path}: tokens must be a finite M x D matrix, got shape {tokens.shape}")
    return tokens.astype(np.float64)


def initial_state(config: TunerConfig, seed, init_tokens=None, token_dim=None) -> PromptState:
    if init_tokens is not None:
        tokens = np.asarray(init_tokens, dtype=np.float64)
        if token_dim is not None and tokens.shape[1] != token_dim:
            raise ConfigurationError(
                f"initial tokens have dim {tokens.shape[1]}, encoder expects {token_dim}")
        return PromptState(tokens.copy())
    return PromptState.initial(config.n_tokens, token_dim or config.dim, seed)


def _trace_record(run_index, i, domain, true_class, bundle_summary, pred):
    return {"run": run_index, "index": i, "domain": domain, "true_class": true_class,
            "prediction": pred, "correct": pred == true_class, **bundle_summary}


def run_stream(stream: Stream, method: MethodSpec, config: TunerConfig, encoder: ToyEncoder,
               vocab: ClassVocabulary, seed=0, run_index=0, init_tokens=None, trace=False,
               state: Optional[PromptState] = None, banks: Optional[KnowledgeBanks] = None,
               start=0, stop=None, window=WINDOW) -> RunResult:
    """Run one method over ``stream`` in order with batch size 1.

    ``state``/``banks``/``start`` allow resuming from a checkpoint; ``stop``
    ends early (exclusive index).
    """
    if len(stream) == 0:
        raise ConfigurationError("cannot run on an empty stream")
    stop = len(stream) if stop is None else min(stop, len(stream))
    if state is None:
        state = initial_state(config, seed, init_tokens, encoder.token_dim)
    if method.kind == "histpt" and banks is None:
        banks = config.make_banks()
    images = stream.features @ encoder.w_image.T
    n = stop - start
    preds = np.empty(n, dtype=np.int64)
    records = []
    enabled = method.enabled
    for j, i in enumerate(range(start, stop)):
        v = images[i]
        try:
            if method.kind == "zero_shot":
                p = predict(encoder, state.tokens, vocab, v, config.tau)
                summary = None
            elif method.kind == "tpt_baseline":
                p = tpt_baseline_step(state, v, encoder, vocab, config)
                summary = None
            else:
                bundle = tune_step(state, banks, v, encoder, vocab, config, enabled,
                                   method.enable_adaptive_retrieval)
                p = bundle.fused
                summary = bundle.summary() if trace else None
        except HisTPTError as exc:
            done = stream.classes[start:i]
            partial = RunMetrics(preds[:j] == done, stream.domains[start:i].copy(), preds[:j].copy(),
                                 window, run_index, seed, method.label, method.flags())
            raise StepError(i, exc, partial) from exc
        preds[j] = int(np.argmax(p))
        if trace:
            if summary is None:
                summary = {"raw": p.tolist(), "fused": p.tolist(), "sources": [],
                           "weights": None, "entropy": {}}
            records.append(_trace_record(run_index, i, int(stream.domains[i]),
                                         int(stream.classes[i]), summary, int(preds[j])))
    truth = stream.classes[start:stop]
    metrics = RunMetrics(preds == truth, stream.domains[start:stop].copy(), preds, window,
                         run_index, seed, method.label, method.flags())
    return RunResult(metrics, records, state, banks)


def _run_one(args):
    bench, method, config, run_index, order, init_tokens, trace = args
    stream = bench.stream(run_index, order)
    return run_stream(stream, method, config, bench.encoder, bench.vocab, bench.seed,
                      run_index, init_tokens, trace)


def run_experiment(bench: Benchmark, method: MethodSpec, config: TunerConfig, runs=None,
                   order=None, init_tokens=None, trace=False, workers=1):
    """Run ``method`` on runs ``0 .. runs-1`` of ``bench``; results in run-index order."""
    runs = bench.stream_config.runs if runs is None else runs
    jobs = [(bench, method, config, r, order, init_tokens, trace) for r in range(runs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return results


def run_ablation_matrix(bench: Benchmark, config: TunerConfig, runs=None, workers=1):
    """Mean accuracy (over runs) of each bank/retrieval combination, keyed by method label."""
    table = {}
    for spec in ABLATION_ROWS:
        results = run_experiment(bench, spec, config, runs, workers=workers)
        table[spec.label] = {
            "flags": spec.flags(),
            "mean_accuracy": float(np.mean([r.metrics.mean_accuracy for r in results])),
            "runs": [r.metrics for r in results],
        }
    return table


def run_step_sweep(bench: Benchmark, config: TunerConfig, steps: Sequence[int],
                   method: MethodSpec = HISTPT, runs=None, workers=1):
    """(opt_steps, mean accuracy) for each requested number of inner steps."""
    if not steps:
        raise ConfigurationError("steps must be non-empty")
    out = []
    for s in steps:
        if int(s) < 1:
            raise ConfigurationError(f"opt_steps must be >= 1, got {s}")
        results = run_experiment(bench, method, config.replace(opt_steps=int(s)), runs,
                                 workers=workers)
        out.append((int(s), float(np.mean([r.metrics.mean_accuracy for r in results]))))
    return out


# ---------------------------------------------------------------------------
# metrics files and reports

METRICS_FORMAT = "histpt-metrics"


def metrics_to_json(metrics: Sequence[RunMetrics], meta=None) -> str:
    doc = {"format": METRICS_FORMAT, "version": 1, "meta": meta or {},
           "runs": [m.to_dict() for m in metrics]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def metrics_to_csv(metrics: Sequence[RunMetrics]) -> str:
    domains = sorted({d for m in metrics for d in m.per_domain_accuracy})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "run_index", "method", "flags", "mean_accuracy"]
               + [f"domain_{d}" for d in domains])
    for m in metrics:
        flags = ";".join(f"{k}={int(v)}" for k, v in m.flags.items())
        per = m.per_domain_accuracy
        w.writerow([m.seed, m.run_index, m.method, flags, repr(m.mean_accuracy)]
                   + [repr(per[d]) if d in per else "" for d in domains])
    return buf.getvalue()


def write_metrics(path, metrics, meta=None):
    """Write metrics as CSV or JSON depending on the file suffix (JSON by default)."""
    path = Path(path)
    text = metrics_to_csv(metrics) if path.suffix == ".csv" else metrics_to_json(metrics, meta)
    path.write_text(text)


def load_metrics(path):
    """Read a JSON metrics file; returns ``(list of RunMetrics, meta)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: not a readable metrics file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != METRICS_FORMAT or "runs" not in doc:
        raise ParseError(f"{path}: missing '{METRICS_FORMAT}' header or 'runs' list")
    try:
        runs = [RunMetrics.from_dict(r) for r in doc["runs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed run record: {exc}") from None
    return runs, doc.get("meta", {})


def write_trace(path, records):
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def format_delta(delta_points: float) -> str:
    """Signed one-decimal delta in accuracy points, e.g. ``(+2.3)`` or ``(-0.4)``."""
    value = round(delta_points, 1)
    if value == 0:
        value = 0.0  # no "-0.0"
    return f"({value:+.1f})"


def _summarize(runs: Sequence[RunMetrics]) -> dict:
    accs = np.array([m.mean_accuracy for m in runs])
    per_domain = {}
    for m in runs:
        for d, a in m.per_domain_accuracy.items():
            per_domain.setdefault(d, []).append(a)
    lengths = {len(m.per_sample_correct) for m in runs}
    curve = (np.mean([m.windowed_accuracy for m in runs], axis=0).tolist()
             if len(lengths) == 1 else None)
    return {
        "runs": len(runs),
        "mean_accuracy": float(accs.mean()),
        # unbiased (n - 1) estimator; a single run has no spread
        "std_accuracy": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
        "per_domain_accuracy": {d: float(np.mean(v)) for d, v in sorted(per_domain.items())},
        "windowed_accuracy": curve,
    }


def report(sources) -> dict:
    """Aggregate metrics across runs, grouped by method label.

    ``sources`` are metrics file paths or lists of :class:`RunMetrics`. When a
    zero-shot group is present every other group gets per-domain deltas
    against it, in accuracy points.
    """
    groups = {}
    for src in sources:
        runs = load_metrics(src)[0] if isinstance(src, (str, Path)) else list(src)
        for m in runs:
            groups.setdefault(m.method, []).append(m)
    if not groups:
        raise ConfigurationError("report needs at least one run")
    summary = {label: _summarize(runs) for label, runs in groups.items()}
    base = summary.get(ZERO_SHOT.label)
    if base is not None:
        for s in summary.values():
            s["per_domain_delta"] = {
                d: 100.0 * (a - base["per_domain_accuracy"][d])
                for d, a in s["per_domain_accuracy"].items()
                if d in base["per_domain_accuracy"]
            }
    return summary


def format_report(summary: dict, window=WINDOW) -> str:
    lines = []
    for label, s in summary.items():
        lines.append(f"{label}: {100 * s['mean_accuracy']:.1f} +/- {100 * s['std_accuracy']:.1f} "
                     f"over {s['runs']} run(s)")
        deltas = s.get("per_domain_delta", {})
        cells = []
        for d, a in s["per_domain_accuracy"].items():
            cell = f"d{d}={100 * a:.1f}"
            if d in deltas:
                cell += format_delta(deltas[d])
            cells.append(cell)
        lines.append("  per-domain: " + " ".join(cells))
    lines.append(f"(windowed accuracy: trailing {window}-sample window, harness-defined)")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "histpt-checkpoint"


def config_hash(config: TunerConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, state: PromptState, banks: Optional[KnowledgeBanks],
                    config: TunerConfig, position: int, run_index=0, seed=0, method=HISTPT):
    """Bundle everything needed to resume a run at stream index ``position``.

    Streams are pure functions of (seed, run index), so the stream position is
    the whole random-number cursor.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(config),
        "config_hash": config_hash(config),
        "method": asdict(method),
        "position": int(position),
        "run_index": int(run_index),
        "seed": int(seed),
        "step_count": int(state.step_count),
    }
    arrays = {
        "tokens": state.tokens,
        "exp_avg": state.exp_avg,
        "exp_avg_sq": state.exp_avg_sq,
    }
    if banks is not None:
        meta["has_banks"] = True
        arrays.update(banks.local.snapshot("local"))
        arrays.update(banks.hard.snapshot("hard"))
        if banks.global_.initialized:
            arrays["global_prototype"] = banks.global_.prototype
    with Path(path).open("wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> dict:
    """Inverse of :func:`save_checkpoint`.

    Returns a dict with ``state``, ``banks`` (or None), ``config``,
    ``method``, ``position``, ``run_index`` and ``seed``.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        meta = json.loads(bytes(data.pop("meta")).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: not a checkpoint: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: missing '{CHECKPOINT_FORMAT}' header")
    config = TunerConfig(**meta["config"])
    if config_hash(config) != meta["config_hash"]:
        raise ParseError(f"{path}: config hash mismatch")
    state = PromptState(data["tokens"], meta["step_count"], data["exp_avg"], data["exp_avg_sq"])
    banks = None
    if meta.get("has_banks"):
        banks = config.make_banks()
        try:
            banks.local.restore("local", data)
            banks.hard.restore("hard", data)
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: malformed bank snapshot: {exc}") from None
        if "global_prototype" in data:
            banks.global_.prototype = data["global_prototype"].copy()
    return {
        "state": state,
        "banks": banks,
        "config": config,
        "method": MethodSpec(**meta["method"]),
        "position": meta["position"],
        "run_index": meta["run_index"],
        "seed": meta["seed"],
    }
