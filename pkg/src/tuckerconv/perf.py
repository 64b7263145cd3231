"""Analytical latency model for the tiled core-convolution kernel.

Every function accepts scalar tile sizes or equal-length integer arrays of
them, so a whole candidate set can be scored in one call.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources

import numpy as np

from .conv import ConvShape, TilingConfig

BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class GpuSpec:
    name: str
    num_sms: int
    max_threads_per_sm: int
    max_threads_per_block: int
    smem_per_block_bytes: int
    smem_per_sm_bytes: int
    max_blocks_per_sm: int
    peak_flops: float
    mem_bandwidth: float
    bandwidth_efficiency: float = 0.8
    top_frac: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if f.name == "name":
                continue
            v = getattr(self, f.name)
            # smem_per_block_bytes = 0 is a legal "nothing fits" spec
            if v < 0 or (v == 0 and f.name != "smem_per_block_bytes"):
                raise ValueError(f"GpuSpec.{f.name} must be positive, got {v}")
        if self.bandwidth_efficiency > 1 or self.top_frac > 1:
            raise ValueError("bandwidth_efficiency and top_frac must be <= 1")

    @property
    def gpu_threads(self) -> int:
        return self.num_sms * self.max_threads_per_sm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GpuSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GpuSpec fields: {sorted(unknown)}")
        return cls(**d)

    def scaled(self, factor: float) -> "GpuSpec":
        """Same GPU with compute and bandwidth both scaled by ``factor``."""
        return replace(self, peak_flops=self.peak_flops * factor,
                       mem_bandwidth=self.mem_bandwidth * factor)


PRESETS = ("a100", "2080ti", "host")


def load_gpu(name_or_path: str) -> GpuSpec:
    """Load a bundled preset by name or a GpuSpec JSON file by path."""
    if name_or_path.lower() in PRESETS:
        text = (resources.files("tuckerconv") / "data" / "gpus"
                / f"{name_or_path.lower()}.json").read_text()
    else:
        with open(name_or_path) as fh:
            text = fh.read()
    d = json.loads(text)
    d.pop("_notes", None)
    return GpuSpec.from_dict(d)


def _tiles(t):
    if isinstance(t, TilingConfig) or (isinstance(t, tuple) and len(t) == 3):
        return (np.int64(t[0]), np.int64(t[1]), np.int64(t[2]))
    arr = np.asarray(t, dtype=np.int64)
    return arr[..., 0], arr[..., 1], arr[..., 2]


def _ceil_div(a, b):
    return -(-a // b)


def smem_per_block(shape: ConvShape, t):
    th, tw, tc = _tiles(t)
    return tc * (th + shape.R - 1) * (tw + shape.S - 1) * BYTES_PER_ELEMENT


def estimate_occupancy(shape: ConvShape, t, g: GpuSpec):
    """Steady-state occupancy from shared-memory and thread limits.

    Returns ``(occupancy, valid)``. Invalid tilings get occupancy 0.
    """
    smem = smem_per_block(shape, t)
    valid = (smem <= g.smem_per_block_bytes) & (shape.N <= g.max_threads_per_block)
    by_smem = g.smem_per_sm_bytes // np.maximum(smem, 1)
    blocks = np.minimum(np.minimum(by_smem, g.max_blocks_per_sm),
                        g.max_threads_per_sm // shape.N)
    occ = np.minimum(blocks * shape.N / g.max_threads_per_sm, 1.0)
    valid = valid & (occ > 0)
    occ = np.where(valid, occ, 0.0)
    if np.ndim(occ) == 0:
        return float(occ), bool(valid)
    return occ, valid


def comp_latency_block(shape: ConvShape, t, g: GpuSpec):
    """Seconds for one thread block; the per-block FLOPs and per-block peak
    share the factor N, which cancels."""
    th, tw, tc = _tiles(t)
    work = 2 * (th + shape.R - 1) * (tw + shape.S - 1) * tc * shape.R * shape.S
    return work * float(g.gpu_threads) / g.peak_flops


def num_threads(shape: ConvShape, t):
    th, tw, tc = _tiles(t)
    return _ceil_div(shape.H, th) * _ceil_div(shape.W, tw) * _ceil_div(shape.C, tc) * shape.N


def comp_waves(shape: ConvShape, t, g: GpuSpec, occupancy):
    occupancy = np.asarray(occupancy, dtype=np.float64)
    if np.any((occupancy <= 0) | (occupancy > 1)):
        raise ValueError("occupancy must lie in (0, 1]")
    resident = g.gpu_threads * occupancy
    waves = np.maximum(np.ceil(num_threads(shape, t) / resident), 1).astype(np.int64)
    return int(waves) if waves.ndim == 0 else waves


def comp_latency_total(shape: ConvShape, t, g: GpuSpec):
    occ, valid = estimate_occupancy(shape, t, g)
    if not np.all(valid):
        raise ValueError("comp_latency_total needs valid tilings")
    return comp_waves(shape, t, g, occ) * comp_latency_block(shape, t, g)


def data_volumes(shape: ConvShape, t):
    """Global-memory traffic in elements: (kernel, input, output, total)."""
    th, tw, tc = _tiles(t)
    spatial = _ceil_div(shape.H, th) * _ceil_div(shape.W, tw)
    vk = spatial * shape.C * shape.N
    vx = spatial * shape.C * (th + shape.R - 1) * (tw + shape.S - 1)
    vy = shape.H * shape.W * shape.N * _ceil_div(shape.C, tc)
    total = vx + vk + vy
    if np.ndim(total) == 0:
        return int(vk), int(vx), int(vy), int(total)
    return vk, vx, vy, total


def mem_latency(total_volume, g: GpuSpec):
    return (np.asarray(total_volume, dtype=np.float64) * BYTES_PER_ELEMENT
            / (g.mem_bandwidth * g.bandwidth_efficiency))


@dataclass(frozen=True)
class LatencyEstimate:
    comp_latency_blk: float
    occupancy: float
    comp_waves: int
    comp_latency: float
    volume_k: int
    volume_x: int
    volume_y: int
    volume_total: int
    mem_latency: float

    @property
    def combined(self) -> float:
        return self.comp_latency + self.mem_latency


def estimate_arrays(shape: ConvShape, tilings: np.ndarray, g: GpuSpec) -> dict:
    """Score an (n, 3) array of tilings; invalid rows get NaN latencies."""
    tilings = np.asarray(tilings, dtype=np.int64).reshape(-1, 3)
    occ, valid = estimate_occupancy(shape, tilings, g)
    occ = np.atleast_1d(occ)
    valid = np.atleast_1d(valid)
    blk = np.atleast_1d(comp_latency_block(shape, tilings, g)).astype(np.float64)
    waves = np.zeros(len(tilings), dtype=np.int64)
    if valid.any():
        waves[valid] = comp_waves(shape, tilings[valid], g, occ[valid])
    comp = np.where(valid, waves * blk, np.nan)
    vk, vx, vy, total = data_volumes(shape, tilings)
    mem = mem_latency(total, g)
    return dict(valid=valid, occupancy=occ, comp_latency_blk=blk, comp_waves=waves,
                comp_latency=comp, volume_k=vk, volume_x=vx, volume_y=vy,
                volume_total=total, mem_latency=mem, combined=comp + mem)


def estimate(shape: ConvShape, t, g: GpuSpec) -> LatencyEstimate:
    occ, valid = estimate_occupancy(shape, t, g)
    if not valid:
        raise ValueError(f"tiling {tuple(t)} is not valid on {g.name}")
    vk, vx, vy, total = data_volumes(shape, t)
    blk = float(comp_latency_block(shape, t, g))
    waves = comp_waves(shape, t, g, occ)
    return LatencyEstimate(blk, occ, waves, waves * blk, vk, vx, vy, total,
                           float(mem_latency(total, g)))
