"""Convolution engines.

``conv2d_ref`` is the plain cross-correlation used everywhere as ground
truth. ``tucker_conv`` runs the three-stage (1x1, RxS core, 1x1) pipeline of
a Tucker-2 layer. ``tiled_core_conv`` is an executable model of the tiled
GPU core-convolution kernel: one logical thread block per
(h-tile, w-tile, c-tile), N "threads" per block, CRSN kernel layout and an
HWN output.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import TuckerFactors

LAYOUTS = ("CHW", "HWC")


@dataclass(frozen=True)
class ConvShape:
    H: int
    W: int
    C: int
    N: int
    R: int = 3
    S: int = 3
    pad: int | None = None
    stride: int = 1

    def __post_init__(self):
        if self.pad is None:
            object.__setattr__(self, "pad", (self.R - 1) // 2)
        for name in ("H", "W", "C", "N", "R", "S", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pad < 0:
            raise ValueError("pad must be nonnegative")
        if self.R > self.H + 2 * self.pad or self.S > self.W + 2 * self.pad:
            raise ValueError("filter larger than padded input")

    @property
    def out_h(self) -> int:
        return (self.H + 2 * self.pad - self.R) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.W + 2 * self.pad - self.S) // self.stride + 1

    @property
    def tileable(self) -> bool:
        """Whether the tiled core-conv path accepts this shape ("same" conv)."""
        return (self.stride == 1 and self.R == self.S and self.R % 2 == 1
                and self.pad == (self.R - 1) // 2)

    def with_channels(self, c: int, n: int) -> "ConvShape":
        return ConvShape(self.H, self.W, c, n, self.R, self.S, self.pad, self.stride)

    @classmethod
    def parse(cls, text: str) -> "ConvShape":
        """Parse ``H,W,C,N,R,S[,pad[,stride]]``."""
        vals = [int(v) for v in text.split(",")]
        if len(vals) < 6 or len(vals) > 8:
            raise ValueError("shape must be H,W,C,N,R,S[,pad[,stride]]")
        return cls(*vals)


class TilingConfig(NamedTuple):
    TH: int
    TW: int
    TC: int

    @classmethod
    def parse(cls, text: str) -> "TilingConfig":
        vals = [int(v) for v in text.split(",")]
        if len(vals) != 3:
            raise ValueError("tiling must be TH,TW,TC")
        return cls(*vals)


def check_tiling(shape: ConvShape, t: TilingConfig) -> None:
    if min(t) < 1:
        raise ValueError(f"tiling {tuple(t)} must be positive")
    if t.TH > shape.H or t.TW > shape.W or t.TC > shape.C:
        raise ValueError(
            f"tiling {tuple(t)} exceeds problem (H={shape.H}, W={shape.W}, C={shape.C})")


@dataclass
class FeatureMap:
    """A single image's activations, tagged with its memory layout."""

    data: np.ndarray
    layout: str = "CHW"

    def __post_init__(self):
        self.layout = self.layout.upper()
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if np.ndim(self.data) != 3:
            raise ValueError("feature maps are 3-way")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(C, H, W) regardless of layout."""
        if self.layout == "CHW":
            return tuple(self.data.shape)
        h, w, c = self.data.shape
        return (c, h, w)

    def chw(self) -> np.ndarray:
        return layout_convert(self, "CHW").data


def layout_convert(x: FeatureMap, target: str) -> FeatureMap:
    target = target.upper()
    if target not in LAYOUTS:
        raise ValueError(f"unknown layout {target!r}")
    if target == x.layout:
        return FeatureMap(x.data.copy(), target)
    if target == "HWC":
        return FeatureMap(np.ascontiguousarray(x.data.transpose(1, 2, 0)), "HWC")
    return FeatureMap(np.ascontiguousarray(x.data.transpose(2, 0, 1)), "CHW")


def _as_chw(x) -> np.ndarray:
    return x.chw() if isinstance(x, FeatureMap) else np.asarray(x)


def _check_io(x: np.ndarray, k_shape, shape: ConvShape) -> None:
    if x.shape != (shape.C, shape.H, shape.W):
        raise ValueError(f"input {x.shape} does not match (C,H,W)=({shape.C},{shape.H},{shape.W})")
    if tuple(k_shape) != (shape.C, shape.N, shape.R, shape.S):
        raise ValueError(f"kernel {tuple(k_shape)} does not match (C,N,R,S)")


def conv2d_ref(x, k: np.ndarray, shape: ConvShape) -> np.ndarray:
    """Zero-padded cross-correlation; returns an (N, H', W') array."""
    x = _as_chw(x)
    k = np.asarray(k)
    _check_io(x, k.shape, shape)
    p, st = shape.pad, shape.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (shape.R, shape.S), axis=(1, 2))
    win = win[:, ::st, ::st][:, :shape.out_h, :shape.out_w]
    return np.einsum("chwrs,cnrs->nhw", win, k, optimize=True)


def _matmul_counted(a: np.ndarray, b: np.ndarray, counter: list | None) -> np.ndarray:
    if counter is not None:
        counter[0] += a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def tucker_conv(x, f: TuckerFactors, shape: ConvShape, counter: list | None = None) -> np.ndarray:
    """Three-stage Tucker-format convolution; returns (N, H', W').

    If ``counter`` is a one-element list, the number of scalar multiplies
    performed is added to ``counter[0]``.
    """
    x = _as_chw(x)
    c, n, r, s = f.kernel_shape
    if (c, n, r, s) != (shape.C, shape.N, shape.R, shape.S):
        raise ValueError(f"factors for {(c, n, r, s)} do not match shape")
    if x.shape != (shape.C, shape.H, shape.W):
        raise ValueError(f"input {x.shape} does not match shape")
    h, w = shape.H, shape.W
    # stage 1: C -> d1 pointwise projection
    xp = _matmul_counted(f.u1.T, x.reshape(c, h * w), counter).reshape(f.d1, h, w)
    # stage 2: d1 -> d2 RxS core convolution, lowered to one matmul
    p, st = shape.pad, shape.stride
    padded = np.pad(xp, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(padded, (r, s), axis=(1, 2))[:, ::st, ::st]
    win = win[:, :shape.out_h, :shape.out_w]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(shape.out_h * shape.out_w, -1)
    core = f.core.transpose(0, 2, 3, 1).reshape(-1, f.d2)
    z = _matmul_counted(cols, core, counter)
    # stage 3: d2 -> N pointwise expansion
    y = _matmul_counted(z, f.u2.T, counter)
    return y.T.reshape(n, shape.out_h, shape.out_w)


def tucker_conv_mults(shape: ConvShape, d1: int, d2: int) -> int:
    counter = [0]
    f = TuckerFactors(np.zeros((shape.C, d1)), np.zeros((shape.N, d2)),
                      np.zeros((d1, d2, shape.R, shape.S)))
    tucker_conv(np.zeros((shape.C, shape.H, shape.W)), f, shape, counter)
    return counter[0]


def kernel_to_crsn(k: np.ndarray) -> np.ndarray:
    """Flatten a (C, N, R, S) kernel into CRSN order (output channel fastest)."""
    return np.ascontiguousarray(np.asarray(k).transpose(0, 2, 3, 1)).ravel()


def crsn_to_kernel(flat: np.ndarray, c: int, n: int, r: int, s: int) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(flat).reshape(c, r, s, n).transpose(0, 3, 1, 2))


# thread blocks handed to one worker item; fixed so results never depend
# on the worker count
BLOCKS_PER_ITEM = 256


def tiled_core_conv(x, k_crsn: np.ndarray, shape: ConvShape, t: TilingConfig,
                    workers: int = 1, true_convolution: bool = False,
                    gpu=None) -> np.ndarray:
    """Executable model of the tiled core convolution.

    Thread blocks are numbered as on the GPU: ``tile_tc_id = blockId //
    (nh * nw)`` and the spatial tile is ``blockId % (nh * nw)``. Consecutive
    runs of ``BLOCKS_PER_ITEM`` blocks are dispatched to a thread pool; each
    block copies its halo-extended input tile and its CRSN kernel slice,
    accumulates a TH x TW scratch per output channel and writes it to the
    partial output of its c-tile.

    Parameters
    ----------
    x : FeatureMap or ndarray
        Input activations; bare arrays are taken as CHW.
    k_crsn : ndarray
        Kernel flattened in CRSN order (see :func:`kernel_to_crsn`).
    shape : ConvShape
        Must be a stride-1 "same" convolution with odd square filters.
    t : TilingConfig
        Tile sizes; ragged edge tiles are zero-padded.
    workers : int
        Size of the thread pool executing blocks.
    true_convolution : bool
        Use the kernel exactly as stored in the per-thread work equation
        (``I(c, th - r, tw - s) * K(n, c, r, s)``), i.e. true convolution.
        By default the kernel is flipped on load so that the result is the
        cross-correlation computed by :func:`conv2d_ref`.
    gpu : GpuSpec, optional
        If given, reject tilings whose shared-memory tile does not fit a block.

    Returns
    -------
    ndarray, shape (H, W, N)
        Output in HWN layout.
    """
    x = _as_chw(x)
    if not shape.tileable:
        raise ValueError("tiled path needs stride 1, odd square filter and same padding")
    t = TilingConfig(*t)
    check_tiling(shape, t)
    if workers < 1:
        raise ValueError("workers must be positive")
    H, W, C, N, R, S = shape.H, shape.W, shape.C, shape.N, shape.R, shape.S
    k_crsn = np.asarray(k_crsn)
    if k_crsn.size != C * R * S * N:
        raise ValueError("CRSN kernel size does not match shape")
    if x.shape != (C, H, W):
        raise ValueError(f"input {x.shape} does not match (C,H,W)")
    if gpu is not None:
        smem = t.TC * (t.TH + R - 1) * (t.TW + S - 1) * 4
        if smem > gpu.smem_per_block_bytes:
            raise ValueError(f"tile needs {smem} B shared memory, block limit is "
                             f"{gpu.smem_per_block_bytes} B")
    dtype = np.result_type(x.dtype, k_crsn.dtype)
    kern = k_crsn.astype(dtype, copy=False).reshape(C, R, S, N)
    if not true_convolution:
        kern = kern[:, ::-1, ::-1, :]

    nh, nw, nc = -(-H // t.TH), -(-W // t.TW), -(-C // t.TC)
    ext_h, ext_w = t.TH + R - 1, t.TW + S - 1
    # zero border: "same" halo on top/left, halo plus ragged fill bottom/right
    p = shape.pad
    xpad = np.zeros((nc * t.TC, nh * t.TH + R - 1, nw * t.TW + S - 1), dtype=dtype)
    xpad[:C, p:p + H, p:p + W] = x
    kpad = np.zeros((nc, t.TC, R, S, N), dtype=dtype)
    kpad.reshape(nc * t.TC, R, S, N)[:C] = kern

    # views indexed [tile_tc_id, tile_h_id, tile_w_id] -> block's tile
    win = sliding_window_view(xpad, (ext_h, ext_w), axis=(1, 2))[:, ::t.TH, ::t.TW][:, :nh, :nw]
    win = win.reshape(nc, t.TC, nh, nw, ext_h, ext_w)
    partials = np.zeros((nc, nh, nw, t.TH, t.TW, N), dtype=dtype)
    n_blocks = nc * nh * nw
    items = [(lo, min(lo + BLOCKS_PER_ITEM, n_blocks))
             for lo in range(0, n_blocks, BLOCKS_PER_ITEM)]

    def run(item):
        lo, hi = item
        ids = np.arange(lo, hi)
        tc_id, tile_id = np.divmod(ids, nh * nw)
        h_id, w_id = np.divmod(tile_id, nw)
        # shared input_tile[TC][(TH+R-1)*(TW+S-1)], one per block
        tiles = win[tc_id, :, h_id, w_id]
        # per-block kernel copy, contiguous thanks to the CRSN layout
        kblk = kpad[tc_id]
        # temp_result[TH][TW] for every thread n of every block
        acc = np.zeros((hi - lo, t.TH * t.TW, N), dtype=dtype)
        for r in range(R):
            for s in range(S):
                # input element (h, w) feeds output (h - r', w - s') with
                # r' = R-1-r; only in-tile outputs are kept
                v = tiles[:, :, R - 1 - r:R - 1 - r + t.TH, S - 1 - s:S - 1 - s + t.TW]
                v = v.reshape(hi - lo, t.TC, t.TH * t.TW).transpose(0, 2, 1)
                acc += np.matmul(v, kblk[:, :, r, s, :])
        partials[tc_id, h_id, w_id] = acc.reshape(hi - lo, t.TH, t.TW, N)

    if workers == 1 or len(items) == 1:
        for item in items:
            run(item)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, items))

    # stands in for atomicAdd across c-tiles: fixed ascending order
    out = partials[0].copy()
    for ci in range(1, nc):
        out += partials[ci]
    out = out.transpose(0, 2, 1, 3, 4).reshape(nh * t.TH, nw * t.TW, N)
    return np.ascontiguousarray(out[:H, :W])


def task_count(shape: ConvShape, t: TilingConfig) -> int:
    return math.ceil(shape.H / t.TH) * math.ceil(shape.W / t.TW) * math.ceil(shape.C / t.TC)
