"""Tiling selection for the core-convolution kernel.

Two selectors over the same candidate set:

* ``select_tiling_analytical``: keep the ``top_frac`` fraction of tilings
  with the lowest modeled compute latency, then take the one with the least
  modeled memory latency among them.
* ``select_tiling_exhaustive``: score every candidate with an evaluator
  (the combined model, or wall-clock timing of the executable kernel) and
  take the argmin.
"""
from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .conv import ConvShape, TilingConfig, kernel_to_crsn, tiled_core_conv
from .perf import GpuSpec, LatencyEstimate, estimate_arrays

log = logging.getLogger(__name__)

FULL_ENUMERATION_LIMIT = 10**5


@dataclass
class TilingCandidate:
    config: TilingConfig
    estimate: LatencyEstimate
    measured: float | None = None


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def raw_tilings(shape: ConvShape, divisors_only: bool = False) -> np.ndarray:
    """All (TH, TW, TC) triples in lexicographic order, as an (n, 3) array."""
    if divisors_only:
        axes = [divisors(shape.H), divisors(shape.W), divisors(shape.C)]
    else:
        axes = [range(1, shape.H + 1), range(1, shape.W + 1), range(1, shape.C + 1)]
    grid = np.meshgrid(*[np.asarray(a, dtype=np.int64) for a in axes], indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def _resolve_divisors_only(shape: ConvShape, divisors_only: bool | None) -> bool:
    if divisors_only is not None:
        return divisors_only
    if shape.H * shape.W * shape.C > FULL_ENUMERATION_LIMIT:
        log.warning("%d raw tilings for %s; restricting to divisors "
                    "(pass divisors_only=False to enumerate all)",
                    shape.H * shape.W * shape.C, shape)
        return True
    return False


def valid_tiling_array(shape: ConvShape, g: GpuSpec,
                       divisors_only: bool | None = None) -> np.ndarray:
    tilings = raw_tilings(shape, _resolve_divisors_only(shape, divisors_only))
    return tilings[estimate_arrays(shape, tilings, g)["valid"]]


def enumerate_valid_tilings(shape: ConvShape, g: GpuSpec,
                            divisors_only: bool | None = None) -> list[TilingConfig]:
    """Tilings that fit the GPU's shared-memory and thread limits.

    ``divisors_only=None`` enumerates every triple unless there are more than
    ``FULL_ENUMERATION_LIMIT`` of them, in which case only divisors of H, W
    and C are used.
    """
    return [TilingConfig(*map(int, row)) for row in valid_tiling_array(shape, g, divisors_only)]


def _candidate(shape, row, est, i, measured=None) -> TilingCandidate:
    e = LatencyEstimate(
        comp_latency_blk=float(est["comp_latency_blk"][i]),
        occupancy=float(est["occupancy"][i]),
        comp_waves=int(est["comp_waves"][i]),
        comp_latency=float(est["comp_latency"][i]),
        volume_k=int(est["volume_k"][i]), volume_x=int(est["volume_x"][i]),
        volume_y=int(est["volume_y"][i]), volume_total=int(est["volume_total"][i]),
        mem_latency=float(est["mem_latency"][i]))
    return TilingCandidate(TilingConfig(*map(int, row)), e, measured)


def _order(primary: np.ndarray, tilings: np.ndarray) -> np.ndarray:
    # ascending primary key, ties broken lexicographically on (TH, TW, TC)
    return np.lexsort((tilings[:, 2], tilings[:, 1], tilings[:, 0], primary))


def stage_one_survivors(shape: ConvShape, g: GpuSpec, tilings: np.ndarray,
                        top_frac: float | None = None) -> np.ndarray:
    """Indices into ``tilings`` kept by the compute-latency filter."""
    frac = g.top_frac if top_frac is None else top_frac
    if not 0 < frac <= 1:
        raise ValueError("top_frac must lie in (0, 1]")
    est = estimate_arrays(shape, tilings, g)
    order = _order(est["comp_latency"], tilings)
    keep = max(1, math.ceil(frac * len(tilings)))
    return order[:keep]


def select_tiling_analytical(shape: ConvShape, g: GpuSpec, top_frac: float | None = None,
                             divisors_only: bool | None = None,
                             tilings: np.ndarray | None = None) -> TilingCandidate:
    if tilings is None:
        tilings = valid_tiling_array(shape, g, divisors_only)
    tilings = np.asarray(tilings, dtype=np.int64).reshape(-1, 3)
    if len(tilings) == 0:
        raise ValueError(f"no valid tiling for {shape} on {g.name}")
    est = estimate_arrays(shape, tilings, g)
    survivors = stage_one_survivors(shape, g, tilings, top_frac)
    sub = tilings[survivors]
    best = survivors[_order(est["mem_latency"][survivors], sub)[0]]
    return _candidate(shape, tilings[best], est, best)


def modeled_evaluator(shape: ConvShape, g: GpuSpec):
    def evaluate(tilings: np.ndarray) -> np.ndarray:
        return estimate_arrays(shape, tilings, g)["combined"]
    evaluate.kind = "modeled"
    return evaluate


def time_tiling(shape: ConvShape, t: TilingConfig, x: np.ndarray, k_crsn: np.ndarray,
                repeats: int = 5, workers: int = 1, warmup: bool = True) -> float:
    """Median wall-clock seconds of :func:`tiled_core_conv` over ``repeats``."""
    if warmup:
        tiled_core_conv(x, k_crsn, shape, t, workers=workers)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        tiled_core_conv(x, k_crsn, shape, t, workers=workers)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def measured_evaluator(shape: ConvShape, repeats: int = 5, workers: int = 1,
                       seed: int = 42, dtype=np.float32):
    """Times the CPU executable model; candidates are run one at a time."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((shape.C, shape.H, shape.W)).astype(dtype)
    k = kernel_to_crsn(rng.standard_normal((shape.C, shape.N, shape.R, shape.S)).astype(dtype))

    def evaluate(tilings: np.ndarray) -> np.ndarray:
        return np.array([time_tiling(shape, TilingConfig(*map(int, row)), x, k, repeats, workers)
                         for row in tilings])
    evaluate.kind = "measured"
    return evaluate


def select_tiling_exhaustive(shape: ConvShape, g: GpuSpec,
                             evaluator: str | Callable = "modeled", repeats: int = 5,
                             divisors_only: bool | None = None, workers: int = 1,
                             seed: int = 42, tilings: np.ndarray | None = None):
    """Score every valid tiling and return ``(best, ranking)``.

    ``ranking`` is the full candidate list sorted by score (ties
    lexicographic); for the measured evaluator each candidate carries its
    median time in ``measured``.
    """
    if tilings is None:
        tilings = valid_tiling_array(shape, g, divisors_only)
    tilings = np.asarray(tilings, dtype=np.int64).reshape(-1, 3)
    if len(tilings) == 0:
        raise ValueError(f"no valid tiling for {shape} on {g.name}")
    if evaluator == "modeled":
        evaluator = modeled_evaluator(shape, g)
    elif evaluator == "measured":
        evaluator = measured_evaluator(shape, repeats, workers, seed)
    elif not callable(evaluator):
        raise ValueError(f"unknown evaluator {evaluator!r}")
    scores = np.asarray(evaluator(tilings), dtype=np.float64)
    est = estimate_arrays(shape, tilings, g)
    is_measured = getattr(evaluator, "kind", "") == "measured"
    ranking = [_candidate(shape, tilings[i], est, i, float(scores[i]) if is_measured else None)
               for i in _order(scores, tilings)]
    return ranking[0], ranking
