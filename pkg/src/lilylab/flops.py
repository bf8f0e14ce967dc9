"""Exact FLOPs accounting and wall-clock timing for the expert merge.

The naive path pushes the projected input through every expert and sums
the weighted outputs; the merged path forms the scalar-weighted expert
sum first and applies it with one matmul. Counts follow the standard
2NdC-per-matmul convention and are exact integers.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .adapters import RouteWeights, combine_experts, combine_experts_naive
from .linalg import matmul, seeded_gaussian, softmax_stable, derive_seed

__all__ = [
    "EquivalenceError", "FlopsReport",
    "flops_naive", "flops_efficient", "flops_report", "timed_compare",
    "save_flops_csv",
]

MERGE_TOL = 1e-9


class EquivalenceError(AssertionError):
    """The two merge paths disagreed beyond tolerance."""


def flops_naive(N: int, d: int, C: int, Ne: int) -> int:
    """Per-expert matmuls plus weighting plus summation: Ne (2NdC + dC + NC)."""
    _check_shape(N, d, C, Ne)
    return Ne * (2 * N * d * C + d * C + N * C)


def flops_efficient(N: int, d: int, C: int, Ne: int) -> int:
    """Weighted expert sum then one matmul: 2dC (N + Ne)."""
    _check_shape(N, d, C, Ne)
    return 2 * d * C * (N + Ne)


def _check_shape(N, d, C, Ne):
    for name, v in (("N", N), ("d", d), ("C", C), ("Ne", Ne)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")


@dataclass
class FlopsReport:
    N: int
    d: int
    C: int
    Ne: int
    naive_flops: int
    efficient_flops: int
    naive_ms: float = 0.0
    efficient_ms: float = 0.0

    @property
    def flops_ratio(self) -> float:
        return self.naive_flops / self.efficient_flops

    @property
    def time_ratio(self) -> float:
        return self.naive_ms / self.efficient_ms if self.efficient_ms else 0.0


def flops_report(N: int, d: int, C: int, Ne: int) -> FlopsReport:
    return FlopsReport(N, d, C, Ne, flops_naive(N, d, C, Ne),
                       flops_efficient(N, d, C, Ne))


def timed_compare(N: int, d: int, C: int, Ne: int, reps: int = 10,
                  seed: int = 0, warmup: int = 3) -> FlopsReport:
    """Median wall-clock of both merge paths on identical random data.

    Numerical agreement within 1e-9 max-abs is verified first; a
    disagreement is a correctness failure, not a benchmark artifact.
    """
    if reps < 10:
        raise ValueError("reps must be >= 10 for a usable median")
    report = flops_report(N, d, C, Ne)
    x = seeded_gaussian(N, d, 1.0, derive_seed(seed, "bench", "x"))
    experts = [seeded_gaussian(d, C, 1.0, derive_seed(seed, "bench", "expert", i))
               for i in range(Ne)]
    weights = RouteWeights(softmax_stable(
        seeded_gaussian(1, Ne, 1.0, derive_seed(seed, "bench", "logits"))[0]))

    naive_out = combine_experts_naive(x, weights, experts)
    merged_out = matmul(x, combine_experts(weights, experts))
    worst = float(np.max(np.abs(naive_out - merged_out)))
    if worst > MERGE_TOL:
        raise EquivalenceError(
            f"merge paths disagree by {worst:.3e} (> {MERGE_TOL})")

    def run_naive():
        return combine_experts_naive(x, weights, experts)

    def run_efficient():
        return matmul(x, combine_experts(weights, experts))

    report.naive_ms = _median_ms(run_naive, reps, warmup)
    report.efficient_ms = _median_ms(run_efficient, reps, warmup)
    return report


def _median_ms(fn, reps: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def save_flops_csv(path, reports) -> None:
    if isinstance(reports, FlopsReport):
        reports = [reports]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "d", "C", "Ne", "naive_flops", "efficient_flops",
                    "flops_ratio", "naive_ms", "efficient_ms", "time_ratio"])
        for r in reports:
            w.writerow([r.N, r.d, r.C, r.Ne, r.naive_flops, r.efficient_flops,
                        f"{r.flops_ratio:.17g}", f"{r.naive_ms:.17g}",
                        f"{r.efficient_ms:.17g}", f"{r.time_ratio:.17g}"])
