"""Analytical tile choice against brute-force timing on this machine.

The host preset describes the CPU executor (one core standing in for one
SM). For each shape we print the model's pick, the fastest measured
tiling, and how much slower the pick was.
"""
from tuckerconv.conv import ConvShape
from tuckerconv.perf import load_gpu
from tuckerconv.tiling import (select_tiling_analytical, select_tiling_exhaustive,
                               valid_tiling_array)

host = load_gpu("host")
print(f"{'shape':>12} {'cands':>5} {'picked':>12} {'best':>12} {'slowdown':>8}")
for h, c in [(7, 32), (14, 32), (14, 64)]:
    shape = ConvShape(h, h, c, c)
    tilings = valid_tiling_array(shape, host, divisors_only=True)
    pick = select_tiling_analytical(shape, host, tilings=tilings)
    best, ranking = select_tiling_exhaustive(shape, host, "measured", repeats=3,
                                             tilings=tilings)
    t = {tuple(r.config): r.measured for r in ranking}
    name = f"{h}x{h}x{c}x{c}"
    print(f"{name:>12} {len(tilings):5d} {str(tuple(pick.config)):>12} "
          f"{str(tuple(best.config)):>12} {t[tuple(pick.config)] / best.measured:7.2f}x")

# the same shape under a GPU preset: far more candidates survive and the
# pick moves to small tiles with many blocks
a100 = load_gpu("a100")
shape = ConvShape(56, 56, 64, 64)
pick = select_tiling_analytical(shape, a100)
print("56x56x64x64 on a100:", tuple(pick.config),
      f"occupancy {pick.estimate.occupancy:.3f}, waves {pick.estimate.comp_waves}")
