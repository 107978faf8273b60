"""Synthetic domain-shift streams and precomputed-embedding files.

A sample from domain ``d`` with class ``c`` has raw feature::

    x = A_d @ mu_c + b_d + sigma_d * eps,   eps ~ N(0, I)

Within a run the domains appear in a seeded random order (or a caller-given
one), each contributing ``samples_per_domain`` shuffled samples.

Embedding files come in two flavours. The binary one is little-endian::

    b"HTPT"  u16 version  u32 C  u32 D_img  u64 count
    count x (u32 true_class, u32 domain_id, D_img x f32)

The JSON-lines one holds one ``{"class", "domain", "feature"}`` object per
line.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng
from .errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

__all__ = [
    "StreamSample",
    "Stream",
    "DomainSpec",
    "StreamConfig",
    "generate_class_prototypes",
    "default_domain_specs",
    "generate_stream",
    "fixed_order_stream",
    "write_embedding_stream",
    "write_embedding_jsonl",
    "load_embedding_stream",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = b"HTPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIQ")
_RECORD_HEAD = struct.Struct("<II")


@dataclass(frozen=True)
class StreamSample:
    raw_feature: np.ndarray
    domain_id: int
    true_class: int
    index: int


@dataclass
class Stream:
    """An ordered stream held column-wise; iterating yields :class:`StreamSample`."""

    features: np.ndarray
    domains: np.ndarray
    classes: np.ndarray
    n_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(self.domains), -1) if len(self.domains) else feats.reshape(0, 0)
        self.features = feats
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if not len(self.features) == len(self.domains) == len(self.classes):
            raise ConfigurationError("stream columns have different lengths")
        if len(self.classes) and (self.classes.min() < 0 or self.classes.max() >= self.n_classes):
            raise ConfigurationError(f"true classes must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.domains)

    def __getitem__(self, i) -> StreamSample:
        return StreamSample(self.features[i], int(self.domains[i]), int(self.classes[i]), int(i))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def domain_segments(self):
        """Domain id of each maximal run of equal domain ids, in stream order."""
        if not len(self):
            return []
        starts = np.flatnonzero(np.diff(self.domains)) + 1
        return [int(self.domains[0])] + [int(self.domains[s]) for s in starts]


@dataclass
class DomainSpec:
    transform: np.ndarray
    bias: np.ndarray
    noise_scale: float
    name: str = ""

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be non-negative")

    def check_conditioning(self, bound=100.0):
        cond = np.linalg.cond(self.transform)
        if not cond <= bound:
            raise ConfigurationError(
                f"domain {self.name or '?'} transform condition number {cond:.1f} exceeds {bound}"
            )


@dataclass
class StreamConfig:
    n_classes: int = 10
    dim: int = 32
    samples_per_domain: int = 200
    domain_specs: list = field(default_factory=list)
    runs: int = 100
    seed: int = 42
    prototype_cap: float = 0.5
    condition_bound: float = 100.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.runs < 1 or self.samples_per_domain < 1:
            raise ConfigurationError("runs and samples_per_domain must be >= 1")
        self._prototypes = None
        if not self.domain_specs:
            self.domain_specs = default_domain_specs(self.dim, self.seed, self.prototypes)
        for spec in self.domain_specs:
            if spec.transform.shape != (self.dim, self.dim) or spec.bias.shape != (self.dim,):
                raise ConfigurationError(f"domain {spec.name!r} does not match dim {self.dim}")
            spec.check_conditioning(self.condition_bound)

    @property
    def n_domains(self) -> int:
        return len(self.domain_specs)

    @property
    def prototypes(self):
        if self._prototypes is None:
            self._prototypes = generate_class_prototypes(
                self.n_classes, self.dim, self.seed, cap=self.prototype_cap)
        return self._prototypes


def generate_class_prototypes(n_classes, dim, seed, cap=0.5, max_tries=10_000):
    """Unit-norm class centres with every pairwise ``|cos|`` below ``cap``.

    Rows are drawn one at a time and rejected while too close to an accepted
    row.
    """
    if n_classes < 2:
        raise ConfigurationError("need at least two classes")
    g = rng.generator(seed, "stream.prototypes")
    rows = []
    tries = 0
    while len(rows) < n_classes:
        if tries >= max_tries:
            raise ConfigurationError(
                f"could not place {n_classes} prototypes with |cos| < {cap} in {dim} dims; "
                "try a larger D_img or a looser cap"
            )
        tries += 1
        cand = g.standard_normal(dim)
        cand /= np.linalg.norm(cand)
        if all(abs(cand @ r) < cap for r in rows):
            rows.append(cand)
    return np.array(rows)


def _random_rotation(g, dim, angle):
    """Orthogonal matrix exp(angle * S) for a random unit skew-symmetric S."""
    from scipy.linalg import expm

    a = g.standard_normal((dim, dim))
    s = a - a.T
    s /= np.linalg.norm(s, 2)
    return expm(angle * s)


def default_domain_specs(dim, seed, prototypes=None, n_domains=3, noise=0.2, angle=0.5,
                         bias=1.2, bias_classes=2, jitter=0.3, bias_start=0,
                         shift_noise=0.28):
    """One clean domain followed by ``n_domains - 1`` shifted ones.

    A shifted domain rotates the feature space slightly and adds a common
    offset. When ``prototypes`` is given the offset of domain ``d`` points
    mostly along the sum of ``bias_classes`` class centres (a different group
    per domain), so zero-shot predictions drift toward those classes.
    """
    specs = [DomainSpec(np.eye(dim), np.zeros(dim), noise, name="normal")]
    for d in range(1, n_domains):
        g = rng.generator(seed, "stream.domain", d)
        rot = _random_rotation(g, dim, angle)
        offset = jitter * g.standard_normal(dim) / np.sqrt(dim)
        if prototypes is not None:
            n_classes = len(prototypes)
            group = [(bias_start + (d - 1) * bias_classes + j) % n_classes for j in range(bias_classes)]
            offset = offset + prototypes[group].sum(axis=0)
        offset *= bias / np.linalg.norm(offset)
        specs.append(DomainSpec(rot, offset, noise if shift_noise is None else shift_noise,
                                name=f"shift{d}"))
    return specs


def _domain_block(config: StreamConfig, run_index, domain_id, occurrence):
    spec = config.domain_specs[domain_id]
    g = rng.generator(config.seed, "stream.samples", run_index, domain_id, occurrence)
    n = config.samples_per_domain
    classes = g.integers(0, config.n_classes, n)
    noise = g.standard_normal((n, config.dim))
    feats = config.prototypes[classes] @ spec.transform.T + spec.bias + spec.noise_scale * noise
    perm = g.permutation(n)
    return feats[perm], classes[perm]


def fixed_order_stream(config: StreamConfig, order: Sequence[int], run_index=0) -> Stream:
    """Stream visiting domains in ``order`` (repeats allowed)."""
    order = [int(d) for d in order]
    for d in order:
        if not 0 <= d < config.n_domains:
            raise ConfigurationError(f"unknown domain id {d}; have {config.n_domains} domains")
    feats, doms, classes = [], [], []
    seen = {}
    for d in order:
        occ = seen.get(d, 0)
        seen[d] = occ + 1
        f, c = _domain_block(config, run_index, d, occ)
        feats.append(f)
        classes.append(c)
        doms.append(np.full(len(c), d))
    if not order:
        return Stream(np.empty((0, config.dim)), [], [], config.n_classes)
    return Stream(np.concatenate(feats), np.concatenate(doms), np.concatenate(classes),
                  config.n_classes)


def domain_order(config: StreamConfig, run_index):
    return rng.generator(config.seed, "stream.order", run_index).permutation(config.n_domains)


def generate_stream(config: StreamConfig, run_index=0) -> Stream:
    """Stream for one run: seeded random domain order, shuffled samples within each domain."""
    return fixed_order_stream(config, domain_order(config, run_index), run_index)


def write_embedding_stream(path, stream: Stream):
    """Write ``stream`` in the binary format; features are stored as float32."""
    path = Path(path)
    n, d = len(stream), stream.dim
    rec = np.zeros(n, dtype=np.dtype([("cls", "<u4"), ("dom", "<u4"), ("feat", "<f4", (d,))]))
    rec["cls"] = stream.classes
    rec["dom"] = stream.domains
    rec["feat"] = stream.features
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, stream.n_classes, d, n))
        fh.write(rec.tobytes())


def write_embedding_jsonl(path, stream: Stream):
    with Path(path).open("w") as fh:
        for cls, dom, feat in zip(stream.classes, stream.domains, stream.features):
            fh.write(json.dumps({"class": int(cls), "domain": int(dom),
                                 "feature": [float(x) for x in feat]}) + "\n")


def _load_binary(data: bytes, path) -> Stream:
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: truncated header at byte offset {len(data)}")
    magic, version, n_classes, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format version {version} at byte offset 4")
    if dim < 1 or n_classes < 2:
        raise ParseError(f"{path}: invalid header (C={n_classes}, D_img={dim}) at byte offset 6")
    rec_size = _RECORD_HEAD.size + 4 * dim
    body = len(data) - _HEADER.size
    if body != count * rec_size:
        full = body // rec_size
        raise ParseError(
            f"{path}: header promises {count} records of {rec_size} bytes but record "
            f"{min(full, count)} is malformed at byte offset {_HEADER.size + min(full, count) * rec_size}"
        )
    if count == 0:
        log.warning("%s: embedding file holds no records", path)
    dt = np.dtype([("cls", "<u4"), ("dom", "<u4"), ("feat", "<f4", (dim,))])
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
    bad = np.flatnonzero(rec["cls"] >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise ConfigurationError(
            f"{path}: record {i} has class {rec['cls'][i]} but header declares C={n_classes}")
    feats = rec["feat"].astype(np.float64)
    if not np.all(np.isfinite(feats)):
        i = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0])
        raise ParseError(f"{path}: non-finite feature in record {i} at byte offset "
                         f"{_HEADER.size + i * rec_size}")
    return Stream(feats, rec["dom"].astype(np.int64), rec["cls"].astype(np.int64), n_classes)


def _load_jsonl(text: str, path, n_classes=None) -> Stream:
    feats, doms, classes = [], [], []
    offset = 0
    dim = None
    for line in text.splitlines(keepends=True):
        start = offset
        offset += len(line.encode("utf-8"))
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            feat = [float(x) for x in obj["feature"]]
            cls, dom = int(obj["class"]), int(obj["domain"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: malformed record at byte offset {start}: {exc}") from None
        if dim is None:
            dim = len(feat)
        elif len(feat) != dim:
            raise ConfigurationError(
                f"{path}: feature of length {len(feat)} at byte offset {start}, expected {dim}")
        feats.append(feat)
        classes.append(cls)
        doms.append(dom)
    if not feats:
        log.warning("%s: embedding file holds no records", path)
        return Stream(np.empty((0, 0)), [], [], n_classes or 2)
    if n_classes is None:
        n_classes = max(max(classes) + 1, 2)
    return Stream(np.array(feats), doms, classes, n_classes)


def load_embedding_stream(path, n_classes=None) -> Stream:
    """Read a binary (``HTPT``) or JSON-lines embedding file, keeping file order.

    The format is sniffed from the magic bytes. For JSON-lines files the
    class count is taken from ``n_classes`` if given, else from the largest
    label seen.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read embedding file: {exc.strerror}") from None
    if data[:4] == MAGIC:
        stream = _load_binary(data, path)
        if n_classes is not None and n_classes != stream.n_classes:
            raise ConfigurationError(
                f"{path}: file declares C={stream.n_classes}, expected {n_classes}")
        return stream
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: neither HTPT binary nor UTF-8 JSON lines "
                         f"(byte offset {exc.start})") from None
    return _load_jsonl(text, path, n_classes)
