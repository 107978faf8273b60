"""
Running on precomputed embeddings
=================================

Any encoder's output can be fed to the tuner through the binary embedding
format: a small header, then one (class, domain, float32 vector) record per
sample. Here we write a synthetic stream, read it back, and run the CLI on
it as an external tool would.
"""

import tempfile
from pathlib import Path

import numpy as np

from histpt import harness as H
from histpt.cli import main
from histpt.stream import load_embedding_stream, write_embedding_stream

work = Path(tempfile.mkdtemp())
bench = H.Benchmark.reference(runs=1)
stream = bench.stream(0)

# %%
# Features are stored as float32, so the in-memory stream is rounded first to
# show a bit-exact round trip.
stream.features = stream.features.astype(np.float32).astype(np.float64)
write_embedding_stream(work / "stream.bin", stream)
back = load_embedding_stream(work / "stream.bin")
print(f"{len(back)} records, {back.n_classes} classes, dim {back.dim}")
print("bit-exact:", back.features.tobytes() == stream.features.tobytes())

# %%
# The class-name embeddings are the other half of the model. Without them the
# CLI falls back to class-mean features as anchors and says so.
np.save(work / "classes.npy", bench.vocab.embeddings)
for method in ("zero-shot", "histpt"):
    main(["run", "--method", method, "--embeddings", str(work / "stream.bin"),
          "--class-embeddings", str(work / "classes.npy"), "--out", str(work / f"{method}.json")])

# %%
# The metrics files feed straight into ``report``, which adds per-domain
# deltas against the zero-shot run.
main(["report", str(work / "zero-shot.json"), str(work / "histpt.json")])
