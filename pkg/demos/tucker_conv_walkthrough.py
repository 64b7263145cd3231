"""Compress one conv layer with Tucker-2 and run it three ways.

A random kernel has no low-rank structure, so we build one that does
(low-rank core plus a little noise) and watch the error fall off as the
ranks grow while the multiply count shrinks.
"""
import numpy as np

from tuckerconv.conv import (ConvShape, TilingConfig, conv2d_ref, kernel_to_crsn,
                             tiled_core_conv, tucker_conv)
from tuckerconv.ranks import flops_counts
from tuckerconv.tensor import relative_error, tucker2_decompose, tucker2_reconstruct

rng = np.random.default_rng(0)
shape = ConvShape(14, 14, 64, 64)

# kernel with true Tucker ranks (12, 16) plus 1% noise
u1 = np.linalg.qr(rng.standard_normal((64, 12)))[0]
u2 = np.linalg.qr(rng.standard_normal((64, 16)))[0]
core = rng.standard_normal((12, 16, 3, 3))
k = np.einsum("ca,nb,abrs->cnrs", u1, u2, core)
k += 0.01 * np.linalg.norm(k) / np.sqrt(k.size) * rng.standard_normal(k.shape)
x = rng.standard_normal((64, 14, 14))
dense = conv2d_ref(x, k, shape)

print(f"{'d1,d2':>7} {'kernel err':>11} {'output err':>11} {'FLOPs kept':>11}")
for d1, d2 in [(4, 4), (8, 8), (12, 16), (32, 32), (64, 64)]:
    f = tucker2_decompose(k, d1, d2)
    y = tucker_conv(x, f, shape)
    orig, tucker = flops_counts(shape, d1, d2)
    print(f"{d1:>3},{d2:<3} {relative_error(k, tucker2_reconstruct(f)):11.2e} "
          f"{relative_error(dense, y):11.2e} {tucker / orig:11.1%}")

# the core convolution on its own, through the tiled executor
f = tucker2_decompose(k, 12, 16)
z = np.tensordot(f.u1.T, x, axes=1)                     # 1x1 projection to d1 channels
core_shape = ConvShape(14, 14, 12, 16)
tiled = tiled_core_conv(z, kernel_to_crsn(f.core), core_shape, TilingConfig(7, 7, 4))
ref = conv2d_ref(z, f.core, core_shape).transpose(1, 2, 0)   # executor writes HWN
print("tiled core conv vs reference:", f"{relative_error(ref, tiled):.1e}")
