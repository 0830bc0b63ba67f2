#!/usr/bin/env python3
"""Compare the two attention modes on cost.

Prints the closed-form FLOP model (the score-plus-aggregation ratio between
conventional local self-attention and the center-query mode is exactly k) and
times both implementations over a k sweep to show the measured growth.
"""

from pointmt import flop_count
from pointmt.analysis import complexity_bench, fit_scaling_exponent

n, c = 1024, 64
print(f"FLOP model at N={n}, C={c}:")
print(f"{'k':>4} {'linear s+a':>14} {'quadratic s+a':>14} {'ratio':>6}")
for k in (8, 16, 32, 64):
    lin = flop_count("linear", n, k, c)
    quad = flop_count("quadratic", n, k, c)
    print(f"{k:>4} {lin.score_aggregation:>14,} {quad.score_aggregation:>14,} "
          f"{quad.score_aggregation // lin.score_aggregation:>6}")

print("\ntiming the implementations (median of 3 runs each)...")
rows = complexity_bench([n], [8, 16, 32, 64], c=c, repeats=3)
print(f"{'mode':>10} {'k':>4} {'median ms':>10} {'model flops':>14}")
for r in rows:
    print(f"{r.mode:>10} {r.k:>4} {r.median_ms:>10.2f} {r.flops:>14,}")

for mode in ("linear", "quadratic"):
    ks = [r.k for r in rows if r.mode == mode]
    ts = [r.median_ms for r in rows if r.mode == mode]
    print(f"{mode}: measured time-vs-k exponent {fit_scaling_exponent(ks, ts):.2f}")
