"""Correct matches with and without ground-truth steering on four warp levels.

Runs the benchmark on both descriptor pipelines for a handful of seeds and
prints per-level totals.  The full 50-seed run is ``gl2steer steer-bench``.
"""
import sys

from gl2steer.descriptors import jet_steerer_spec
from gl2steer.pipelines import BENCH_ARMS, steer_bench, totals

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 5
spec = jet_steerer_spec()
for pipeline in ("jet", "moment"):
    rows = steer_bench(pipeline, spec, range(n_seeds))
    oracle, plain = totals(rows, "oracle"), totals(rows, "identity")
    print(f"{pipeline} descriptors, {n_seeds} seeds")
    for arm in BENCH_ARMS:
        print(f"  {arm.name:16s} steered {oracle[arm.name]:5d}   unsteered {plain[arm.name]:5d}")
