"""ADMM training that pushes conv kernels toward low Tucker-2 rank.

The small CNN here is trained with hand-written backprop in numpy. For each
compressed layer the optimizer keeps the live kernel ``K``, a projected copy
``K_hat`` with the target channel ranks, and a scaled dual variable ``M``.
Between projections ``K`` takes SGD steps on the loss plus the proximal term
``rho/2 * ||K - K_hat + M||^2``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .conv import ConvShape
from .perf import GpuSpec
from .ranks import LayerDesc, build_rank_latency_table, flops_counts, select_ranks_under_budget
from .tensor import TuckerFactors, tucker2_decompose, tucker2_project, tucker2_reconstruct

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------- layers

def conv_forward(x, k, b):
    """Batched stride-1 "same" cross-correlation. x: (B,C,H,W), k: (C,N,R,S)."""
    r = k.shape[2]
    p = (r - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, k.shape[2:], axis=(2, 3))
    y = np.einsum("bchwrs,cnrs->bnhw", win, k, optimize=True) + b[None, :, None, None]
    return y, win


def conv_backward(dy, win, k):
    r = k.shape[2]
    q = r - 1 - (r - 1) // 2
    dk = np.einsum("bchwrs,bnhw->cnrs", win, dy, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    dyp = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q)))
    dwin = sliding_window_view(dyp, k.shape[2:], axis=(2, 3))
    dx = np.einsum("bnhwrs,cnrs->bchw", dwin, k[:, :, ::-1, ::-1], optimize=True)
    return dx, dk, db


def avgpool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


def softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


# ---------------------------------------------------------------- model

@dataclass
class ConvLayer:
    kernel: np.ndarray   # (C, N, R, S)
    bias: np.ndarray     # (N,)
    pool: bool = True


@dataclass
class ToyCnn:
    """conv -> relu -> [pool] -> ... -> flatten -> linear."""

    convs: dict[str, ConvLayer]
    fc_w: np.ndarray     # (features, classes)
    fc_b: np.ndarray
    input_shape: tuple[int, int, int] = (1, 8, 8)

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(1, 8, 16), num_classes: int = 4,
             size: int = 8) -> "ToyCnn":
        convs = {}
        h = size
        for i, (c, n) in enumerate(zip(channels[:-1], channels[1:]), start=1):
            std = math.sqrt(2.0 / (c * 9))
            convs[f"conv{i}"] = ConvLayer(rng.standard_normal((c, n, 3, 3)) * std, np.zeros(n))
            h //= 2
        feats = channels[-1] * h * h
        fc_w = rng.standard_normal((feats, num_classes)) * math.sqrt(1.0 / feats)
        return cls(convs, fc_w, np.zeros(num_classes), (channels[0], size, size))

    @property
    def num_classes(self) -> int:
        return self.fc_w.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        for name, layer in self.convs.items():
            p[f"{name}.kernel"] = layer.kernel
            p[f"{name}.bias"] = layer.bias
        p["fc.weight"] = self.fc_w
        p["fc.bias"] = self.fc_b
        return p

    def copy(self) -> "ToyCnn":
        convs = {k: ConvLayer(v.kernel.copy(), v.bias.copy(), v.pool) for k, v in self.convs.items()}
        return ToyCnn(convs, self.fc_w.copy(), self.fc_b.copy(), self.input_shape)

    def with_kernels(self, kernels: dict[str, np.ndarray]) -> "ToyCnn":
        m = self.copy()
        for name, k in kernels.items():
            m.convs[name].kernel = np.array(k, dtype=np.float64)
        return m

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x)[0]

    def _forward(self, x):
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"batch of shape {x.shape[1:]} does not match {self.input_shape}")
        cache = []
        h = x
        for layer in self.convs.values():
            y, win = conv_forward(h, layer.kernel, layer.bias)
            a = np.maximum(y, 0.0)
            out = avgpool2(a) if layer.pool else a
            cache.append((win, y))
            h = out
        flat = h.reshape(len(h), -1)
        return flat @ self.fc_w + self.fc_b, (cache, h.shape, flat)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) == y).mean())


def forward_backward(model: ToyCnn, x: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradient.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``model.params()``.
    """
    if len(x) != len(labels):
        raise ValueError("inputs and labels differ in length")
    logits, (cache, pooled_shape, flat) = model._forward(x)
    loss, dlogits = softmax_xent(logits, labels)
    grads = {"fc.weight": flat.T @ dlogits, "fc.bias": dlogits.sum(axis=0)}
    dh = (dlogits @ model.fc_w.T).reshape(pooled_shape)
    names = list(model.convs)
    for name, (win, y) in zip(reversed(names), reversed(cache)):
        layer = model.convs[name]
        da = avgpool2_backward(dh) if layer.pool else dh
        dy = da * (y > 0)
        dh, dk, db = conv_backward(dy, win, layer.kernel)
        grads[f"{name}.kernel"] = dk
        grads[f"{name}.bias"] = db
    return float(loss), grads


# ---------------------------------------------------------------- data

def make_bar_dataset(n: int, rng: np.random.Generator, size: int = 8, noise: float = 0.6,
                     num_classes: int = 4):
    """Oriented-bar images: horizontal, vertical, diagonal, anti-diagonal.

    Each image holds one bar of length 3-5 at a random position plus
    Gaussian pixel noise. Returns ``(x, y)`` with ``x`` of shape
    (n, 1, size, size).
    """
    if num_classes not in (2, 3, 4):
        raise ValueError("num_classes must be 2, 3 or 4")
    steps = [(0, 1), (1, 0), (1, 1), (1, -1)][:num_classes]
    x = np.zeros((n, 1, size, size))
    y = rng.integers(0, num_classes, size=n)
    for i in range(n):
        dr, dc = steps[y[i]]
        length = int(rng.integers(3, 6))
        r_lo, r_hi = 0, size - 1 - dr * (length - 1)
        c_lo = 0 if dc >= 0 else -dc * (length - 1)
        c_hi = size - 1 - max(dc, 0) * (length - 1)
        r0 = int(rng.integers(r_lo, r_hi + 1))
        c0 = int(rng.integers(c_lo, c_hi + 1))
        for j in range(length):
            x[i, 0, r0 + j * dr, c0 + j * dc] = 1.0
    x += noise * rng.standard_normal(x.shape)
    return x, y


# ---------------------------------------------------------------- ADMM

@dataclass
class TrainConfig:
    lr: float = 0.05
    rho: float = 0.01
    epochs: int = 30
    batch_size: int = 32
    admm_period: int | None = None   # steps between K_hat/M refreshes; None = once per epoch
    seed: int = 42
    lr_decay_at: float = 2 / 3
    lr_decay: float = 0.5

    def __post_init__(self):
        if not (self.lr > 0 and self.rho > 0) or not math.isfinite(self.lr * self.rho):
            raise ValueError("lr and rho must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.admm_period is not None and self.admm_period < 1:
            raise ValueError("admm_period must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdmmState:
    K: np.ndarray
    K_hat: np.ndarray
    M: np.ndarray
    rho: float
    ranks: tuple[int, int]

    @classmethod
    def start(cls, K: np.ndarray, ranks, rho: float) -> "AdmmState":
        d1, d2 = ranks
        return cls(K, tucker2_project(K, d1, d2), np.zeros_like(K), rho, (d1, d2))

    @property
    def residual(self) -> float:
        return float(np.linalg.norm(self.K - self.K_hat))


def admm_k_update(state: AdmmState, grad: np.ndarray, lr: float) -> np.ndarray:
    """One SGD step on loss + rho/2 ||K - K_hat + M||^2; updates ``state.K`` in place."""
    state.K -= lr * (grad + state.rho * (state.K - state.K_hat + state.M))
    return state.K


def admm_project(state: AdmmState) -> np.ndarray:
    state.K_hat = tucker2_project(state.K + state.M, *state.ranks)
    return state.K_hat


def admm_dual_update(state: AdmmState) -> np.ndarray:
    state.M = state.M + state.K - state.K_hat
    return state.M


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]


def _check_ranks(model: ToyCnn, ranks: dict) -> None:
    for name, (d1, d2) in ranks.items():
        if name not in model.convs:
            raise ValueError(f"no conv layer named {name!r}")
        c, n = model.convs[name].kernel.shape[:2]
        if not (1 <= d1 <= c and 1 <= d2 <= n):
            raise ValueError(f"ranks ({d1}, {d2}) out of bounds for {name} ({c}, {n})")


def admm_train(model: ToyCnn, data, ranks: dict, cfg: TrainConfig, test=None,
               admm: bool = True):
    """Train ``model`` (a copy is made) with ADMM rank constraints.

    Parameters
    ----------
    data : (x, y)
        Training set.
    ranks : dict
        Layer name -> target (d1, d2).
    test : (x, y), optional
        Held-out set for the per-epoch ``test_acc`` column.
    admm : bool
        ``False`` trains without the proximal term or projections (plain
        SGD), which is the "train then decompose" baseline.

    Returns
    -------
    (model, factors, history)
        ``factors`` maps layer name -> TuckerFactors of the final kernel at
        the target ranks.
    """
    x, y = data
    if len(x) == 0:
        raise ValueError("empty training set")
    _check_ranks(model, ranks)
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    period = cfg.admm_period or steps_per_epoch
    decay_epoch = int(math.floor(cfg.lr_decay_at * cfg.epochs))
    states = {}
    if admm:
        states = {name: AdmmState.start(model.convs[name].kernel, r, cfg.rho)
                  for name, r in ranks.items()}
    history = History()
    step = 0
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        if epoch - 1 == decay_epoch and decay_epoch > 0:
            lr *= cfg.lr_decay
        order = rng.permutation(len(x))
        losses = []
        for lo in range(0, len(x), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = forward_backward(model, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}; "
                                       f"try a smaller lr (now {lr})")
            losses.append(loss * len(idx))
            for pname, p in model.params().items():
                layer = pname.split(".")[0]
                if pname.endswith(".kernel") and layer in states:
                    admm_k_update(states[layer], grads[pname], lr)
                else:
                    p -= lr * grads[pname]
            step += 1
            if states and step % period == 0:
                for st in states.values():
                    admm_project(st)
                    admm_dual_update(st)
        row = dict(epoch=epoch, loss=sum(losses) / len(x), train_acc=model.accuracy(x, y),
                   test_acc=model.accuracy(*test) if test is not None else float("nan"))
        if states:
            row["residual_norm"] = sum(st.residual for st in states.values())
        else:
            row["residual_norm"] = sum(
                float(np.linalg.norm(model.convs[n].kernel
                                     - tucker2_project(model.convs[n].kernel, *r)))
                for n, r in ranks.items())
        history.add(**row)
        log.debug("epoch %d loss %.4f train %.3f", epoch, row["loss"], row["train_acc"])
    factors = {name: tucker2_decompose(model.convs[name].kernel, *r) for name, r in ranks.items()}
    return model, factors, history


def compressed(model: ToyCnn, factors: dict[str, TuckerFactors]) -> ToyCnn:
    """The model with each factored layer's kernel replaced by its reconstruction."""
    return model.with_kernels({n: tucker2_reconstruct(f) for n, f in factors.items()})


def toy_layers(model: ToyCnn) -> list[LayerDesc]:
    """The model's convolutions as rank-budget layers; the first one is the
    stem and stays dense."""
    h = model.input_shape[1]
    layers = []
    for i, (name, layer) in enumerate(model.convs.items()):
        c, n, r, s = layer.kernel.shape
        layers.append(LayerDesc(name, ConvShape(h, h, c, n, r, s), allowed=i > 0))
        if layer.pool:
            h //= 2
    return layers


def toy_flops(model: ToyCnn, ranks: dict) -> tuple[int, int]:
    """(dense, compressed) conv FLOPs of the whole model at batch size 1.

    Layers missing from ``ranks``, or at full ranks, count as dense.
    """
    orig = compressed_flops = 0
    for layer in toy_layers(model):
        o, t = flops_counts(layer.shape, *ranks.get(layer.id, (layer.shape.C, layer.shape.N)))
        full = ranks.get(layer.id, (layer.shape.C, layer.shape.N)) == (layer.shape.C, layer.shape.N)
        orig += o
        compressed_flops += o if full else t
    return orig, compressed_flops


def toy_ranks(model: ToyCnn, budget: float, g: GpuSpec) -> dict[str, tuple[int, int]]:
    """Per-layer target ranks from the budgeted rank selector."""
    layers = toy_layers(model)
    table = build_rank_latency_table(layers, g)
    return dict(select_ranks_under_budget(layers, budget, table).ranks)
