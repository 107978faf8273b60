"""
Inside the knowledge banks
==========================

Step a single stream through the tuner and watch the three banks fill:
the local FIFO, the hard-sample FIFO fed from its most uncertain entries,
and the momentum prototype that only appears once something is evicted.
"""

import numpy as np

from histpt import harness as H
from histpt.tuner import PromptState, TunerConfig, tune_step

bench = H.Benchmark.reference(runs=1)
config = TunerConfig(dim=32, local_size=8, hard_size=4, hard_k=3)
stream = bench.stream(0)
images = stream.features @ bench.encoder.w_image.T

state = PromptState.initial(config.n_tokens, config.dim, bench.seed)
banks = config.make_banks()

# %%
# Small banks make the transitions visible within a dozen samples. The first
# sample has nothing to retrieve from, so its fused prediction is the raw one.
print(" i  local hard global  sources               weights")
for i in range(14):
    bundle = tune_step(state, banks, images[i], bench.encoder, bench.vocab, config)
    weights = "-" if bundle.weights is None else np.array2string(bundle.weights, precision=3)
    print(f"{i:2d}  {len(banks.local):5d} {len(banks.hard):4d} {str(banks.global_.initialized):6s}  "
          f"{','.join(bundle.per_bank) or '(cold start)':20s}  {weights}")

# %%
# Lower entropy means a larger share of the fused target. Compare each bank's
# entropy with the weight it received on the last step.
summary = bundle.summary()
for name in bundle.per_bank:
    print(f"{name:7s} entropy {summary['entropy'][name]:.3e}  weight {bundle.weights[list(bundle.per_bank).index(name)]:.3f}")
print(f"raw     entropy {summary['entropy']['raw']:.3e}")

# %%
# The global prototype is a slow average: with gamma = 0.99 a single update
# moves it 1% of the way toward the newly evicted features.
before = banks.global_.prototype.copy()
for i in range(14, 40):
    tune_step(state, banks, images[i], bench.encoder, bench.vocab, config)
drift = np.linalg.norm(banks.global_.prototype - before) / np.linalg.norm(before)
print(f"relative drift of the global prototype over 26 steps: {drift:.4f}")
