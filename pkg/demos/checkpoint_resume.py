"""
Stopping and resuming a run
===========================

A checkpoint holds the tokens, the optimizer moments and the bank contents.
Streams are regenerated from (seed, run index), so the stream position is
all that is needed to pick up again. Resuming reproduces the uninterrupted
run exactly.
"""

import tempfile
from pathlib import Path

import numpy as np

from histpt import harness as H
from histpt.tuner import TunerConfig

bench = H.Benchmark.reference(runs=1)
config = TunerConfig(dim=32)
stream = bench.stream(0)
args = (H.HISTPT, config, bench.encoder, bench.vocab, bench.seed, 0)

full = H.run_stream(stream, *args)

# %%
# Stop a third of the way in, after the banks have wrapped around.
head = H.run_stream(stream, *args, stop=200)
path = Path(tempfile.mkdtemp()) / "run0.npz"
H.save_checkpoint(path, head.state, head.banks, config, 200, 0, bench.seed, H.HISTPT)
print(f"checkpoint: {path.stat().st_size} bytes")

# %%
# A fresh process would only need the file and the benchmark definition.
ck = H.load_checkpoint(path)
tail = H.run_stream(stream, ck["method"], ck["config"], bench.encoder, bench.vocab, ck["seed"],
                    ck["run_index"], state=ck["state"], banks=ck["banks"], start=ck["position"])

joined = np.concatenate([head.metrics.predictions, tail.metrics.predictions])
print("predictions identical:", np.array_equal(joined, full.metrics.predictions))
print("final tokens identical:", tail.state.tokens.tobytes() == full.state.tokens.tobytes())
