"""ADMM training versus decompose-after-training on the toy bar task.

Two runs share the same initialisation and data: one trains normally and
is then truncated to ranks (3, 6) in conv2, the other trains with the
ADMM penalty pulling conv2 toward that rank set throughout.
"""
import sys

import numpy as np

from tuckerconv.admm import (ToyCnn, TrainConfig, admm_train, compressed, make_bar_dataset,
                             toy_flops)

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
ranks = {"conv2": (3, 6)}
cfg_kw = dict(epochs=60, rho=0.05)

orig, tucker = toy_flops(ToyCnn.init(np.random.default_rng(0)), ranks)
print(f"conv FLOPs reduction: {1 - tucker / orig:.1%}")
for seed in range(seeds):
    rng = np.random.default_rng(1000 + seed)
    train, test = make_bar_dataset(2000, rng, noise=0.3), make_bar_dataset(1000, rng, noise=0.3)
    init = ToyCnn.init(np.random.default_rng(seed))
    cfg = TrainConfig(seed=seed, **cfg_kw)
    plain, fp, _ = admm_train(init, train, ranks, cfg, test=test, admm=False)
    admm, fa, hist = admm_train(init, train, ranks, cfg, test=test, admm=True)
    res = hist.column("residual_norm")
    print(f"seed {seed}: dense {plain.accuracy(*test):.3f}  "
          f"direct {compressed(plain, fp).accuracy(*test):.3f}  "
          f"admm {compressed(admm, fa).accuracy(*test):.3f}  "
          f"residual {res[0]:.3f} -> {res[-1]:.3f}")
