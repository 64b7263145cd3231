"""Hardware-aware Tucker rank selection under a FLOPs budget.

A rank-latency table is built once per architecture from the analytical
kernel model; ranks are then chosen per layer so that the whole network
sheds at least a fraction ``B`` of its FLOPs while the summed modeled
latency stays low. The greedy selector is the default; an exact
Pareto-front dynamic program is provided for small models as a reference.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .conv import ConvShape
from .perf import GpuSpec, mem_latency
from .tiling import measured_evaluator, select_tiling_analytical


class InfeasibleBudget(ValueError):
    def __init__(self, budget: float, max_reduction: float):
        super().__init__(f"budget {budget:.4f} is infeasible; the smallest ranks on the "
                         f"grid reach a FLOPs reduction of {max_reduction:.4f}")
        self.budget = budget
        self.max_reduction = max_reduction


@dataclass(frozen=True)
class LayerDesc:
    id: str
    shape: ConvShape
    allowed: bool = True

    def to_dict(self) -> dict:
        s = self.shape
        return {"id": self.id, "allowed": self.allowed,
                "shape": dict(H=s.H, W=s.W, C=s.C, N=s.N, R=s.R, S=s.S,
                              pad=s.pad, stride=s.stride)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerDesc":
        shape = ConvShape(**d["shape"])
        allowed = d.get("allowed", True)
        # pointwise convolutions are never decomposed
        if shape.R == 1 and shape.S == 1:
            allowed = False
        return cls(str(d["id"]), shape, bool(allowed))


def load_arch(name_or_path: str) -> tuple[str, list[LayerDesc]]:
    """Load a bundled architecture (``resnet18``, ``vgg16``, ``toy6``) or a JSON file."""
    bundled = resources.files("tuckerconv") / "data" / "archs" / f"{name_or_path}.json"
    if bundled.is_file():
        d = json.loads(bundled.read_text())
    else:
        with open(name_or_path) as fh:
            d = json.load(fh)
    return d.get("name", str(name_or_path)), [LayerDesc.from_dict(x) for x in d["layers"]]


def flops_counts(shape: ConvShape, d1: int, d2: int) -> tuple[int, int]:
    """FLOPs (2 per multiply-accumulate) of the dense layer and its Tucker-2 form."""
    if not (1 <= d1 <= shape.C and 1 <= d2 <= shape.N):
        raise ValueError(f"ranks ({d1}, {d2}) outside (1..{shape.C}, 1..{shape.N})")
    hw_in = shape.H * shape.W
    hw_out = shape.out_h * shape.out_w
    orig = 2 * hw_out * shape.C * shape.N * shape.R * shape.S
    tucker = (2 * hw_in * shape.C * d1 + 2 * hw_out * d1 * d2 * shape.R * shape.S
              + 2 * hw_out * d2 * shape.N)
    return orig, tucker


def default_rank_grid(n: int) -> list[int]:
    """Multiples of n/8, rounded up: ceil(n/8), ceil(2n/8), ..., n."""
    return sorted({max(1, math.ceil(i * n / 8)) for i in range(1, 9)})


@dataclass(frozen=True)
class RankCell:
    layer: str
    d1: int
    d2: int
    tiling: tuple[int, int, int]
    latency: float
    tucker_flops: int
    orig_flops: int


def core_shape(shape: ConvShape, d1: int, d2: int) -> ConvShape:
    """Core convolution as seen by the tiled kernel: d1 -> d2 channels over the
    output grid, "same" padded."""
    return ConvShape(shape.out_h, shape.out_w, d1, d2, shape.R, shape.S)


def pointwise_latency(shape: ConvShape, d1: int, d2: int, g: GpuSpec) -> float:
    """Modeled seconds for the two 1x1 stages around the core convolution."""
    hw_in = shape.H * shape.W
    hw_out = shape.out_h * shape.out_w
    vol = (hw_in * shape.C + shape.C * d1 + hw_in * d1
           + hw_out * d2 + d2 * shape.N + hw_out * shape.N)
    flops = 2 * hw_in * shape.C * d1 + 2 * hw_out * d2 * shape.N
    return float(mem_latency(vol, g)) + flops / g.peak_flops


def _grid_for(layer: LayerDesc, grid):
    if grid is None:
        return [(a, b) for a in default_rank_grid(layer.shape.C)
                for b in default_rank_grid(layer.shape.N)]
    if isinstance(grid, dict):
        return [tuple(p) for p in grid[layer.id]]
    return [tuple(p) for p in grid]


def build_rank_latency_table(layers: list[LayerDesc], g: GpuSpec, grid=None,
                             evaluator: str = "modeled", divisors_only: bool = True,
                             repeats: int = 5) -> list[RankCell]:
    """Benchmark every (layer, d1, d2) cell of the rank grid.

    ``grid`` is ``None`` for the default per-layer grid, a list of
    ``(d1, d2)`` pairs shared by all layers, or a dict keyed by layer id.
    Layers with ``allowed=False`` are skipped. The full-rank cell (C, N)
    stands for leaving the layer undecomposed, so it carries the dense FLOPs.
    """
    if evaluator not in ("modeled", "measured"):
        raise ValueError(f"unknown evaluator {evaluator!r}")
    cache: dict = {}
    table = []
    for layer in layers:
        if not layer.allowed:
            continue
        for d1, d2 in _grid_for(layer, grid):
            orig, tucker = flops_counts(layer.shape, d1, d2)
            core = core_shape(layer.shape, d1, d2)
            if core not in cache:
                cand = select_tiling_analytical(core, g, divisors_only=divisors_only)
                core_lat = cand.estimate.combined
                if evaluator == "measured":
                    core_lat = float(measured_evaluator(core, repeats)(
                        np.asarray([cand.config]))[0])
                cache[core] = (tuple(cand.config), core_lat)
            tiling, core_lat = cache[core]
            if (d1, d2) == (layer.shape.C, layer.shape.N):
                # full ranks buy nothing: the layer stays dense, run by the
                # same kernel without the two 1x1 stages
                table.append(RankCell(layer.id, d1, d2, tiling, core_lat, orig, orig))
                continue
            lat = core_lat + pointwise_latency(layer.shape, d1, d2, g)
            table.append(RankCell(layer.id, d1, d2, tiling, lat, tucker, orig))
    return table


@dataclass
class RankPlan:
    ranks: dict[str, tuple[int, int]]
    achieved_reduction: float
    latency: float
    budget: float
    orig_flops: int
    plan_flops: int
    method: str = "greedy"
    tilings: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"method": self.method, "budget": self.budget,
                "achieved_reduction": self.achieved_reduction,
                "modeled_latency_s": self.latency,
                "orig_flops": self.orig_flops, "plan_flops": self.plan_flops,
                "layers": [{"id": k, "d1": v[0], "d2": v[1],
                            "tiling": list(self.tilings.get(k, ()))}
                           for k, v in self.ranks.items()]}


class _Options:
    """Per-layer grid cells, sorted by (d1, d2)."""

    def __init__(self, layers: list[LayerDesc], table: list[RankCell]):
        self.ids = [layer.id for layer in layers if layer.allowed]
        self.fixed_flops = 0
        for layer in layers:
            if not layer.allowed:
                o = 2 * layer.shape.out_h * layer.shape.out_w * layer.shape.C \
                    * layer.shape.N * layer.shape.R * layer.shape.S
                self.fixed_flops += o
        self.cells: dict[str, dict[tuple[int, int], RankCell]] = {i: {} for i in self.ids}
        for cell in table:
            if cell.layer in self.cells:
                self.cells[cell.layer][(cell.d1, cell.d2)] = cell
        for i in self.ids:
            if not self.cells[i]:
                raise ValueError(f"rank table has no entries for layer {i}")
        self.orig = {i: next(iter(self.cells[i].values())).orig_flops for i in self.ids}
        self.total_orig = self.fixed_flops + sum(self.orig.values())

    def d1_values(self, i):
        return sorted({k[0] for k in self.cells[i]})

    def d2_values(self, i):
        return sorted({k[1] for k in self.cells[i]})


def _plan(opts: _Options, choice: dict, budget: float, method: str) -> RankPlan:
    flops = opts.fixed_flops + sum(opts.cells[i][choice[i]].tucker_flops for i in opts.ids)
    lat = sum(opts.cells[i][choice[i]].latency for i in opts.ids)
    return RankPlan({i: tuple(choice[i]) for i in opts.ids},
                    1.0 - flops / opts.total_orig, lat, budget, opts.total_orig, flops,
                    method, {i: opts.cells[i][choice[i]].tiling for i in opts.ids})


def _cap(opts: _Options, budget: float) -> float:
    return (1.0 - budget) * opts.total_orig


def _check_budget(budget: float) -> None:
    if not 0 < budget < 1:
        raise ValueError("budget must lie strictly between 0 and 1")


def _max_reduction(opts: _Options) -> float:
    least = opts.fixed_flops + sum(min(c.tucker_flops for c in opts.cells[i].values())
                                   for i in opts.ids)
    return 1.0 - least / opts.total_orig


def select_ranks_under_budget(layers: list[LayerDesc], budget: float,
                              table: list[RankCell], exact: bool = False) -> RankPlan:
    """Choose per-layer ranks whose total FLOPs meet the budget.

    Greedy: start every layer at its largest grid ranks and, while the
    network is over budget, apply the single-layer rank reduction (any
    lower-or-equal (d1, d2) cell of one layer) with the largest latency saved
    per FLOP removed. Then
    climb: apply any single-layer rank increase that stays within budget and
    strictly lowers total latency, until none is left.
    """
    _check_budget(budget)
    opts = _Options(layers, table)
    if exact:
        return _select_exact(opts, budget)
    cap = _cap(opts, budget)
    if _max_reduction(opts) < budget:
        raise InfeasibleBudget(budget, _max_reduction(opts))
    choice = {i: (opts.d1_values(i)[-1], opts.d2_values(i)[-1]) for i in opts.ids}
    flops = opts.fixed_flops + sum(opts.cells[i][choice[i]].tucker_flops for i in opts.ids)

    while flops > cap:
        best = None
        for i in opts.ids:
            cur = opts.cells[i][choice[i]]
            a, b = choice[i]
            for key, cell in sorted(opts.cells[i].items()):
                if key == (a, b) or key[0] > a or key[1] > b:
                    continue
                saved = cur.tucker_flops - cell.tucker_flops
                if saved <= 0:
                    continue
                score = (cur.latency - cell.latency) / saved
                if best is None or score > best[0]:
                    best = (score, i, key, saved)
        if best is None:
            raise InfeasibleBudget(budget, _max_reduction(opts))
        _, i, m, saved = best
        choice[i] = m
        flops -= saved

    _climb(opts, choice, cap)
    return _plan(opts, choice, budget, "greedy")


def _climb(opts: _Options, choice: dict, cap: float) -> None:
    flops = opts.fixed_flops + sum(opts.cells[i][choice[i]].tucker_flops for i in opts.ids)
    while True:
        best = None
        for i in opts.ids:
            cur = opts.cells[i][choice[i]]
            for key, cell in sorted(opts.cells[i].items()):
                if key == choice[i] or key[0] < choice[i][0] or key[1] < choice[i][1]:
                    continue
                new_flops = flops - cur.tucker_flops + cell.tucker_flops
                gain = cur.latency - cell.latency
                if new_flops <= cap and gain > 0 and (best is None or gain > best[0]):
                    best = (gain, i, key, new_flops)
        if best is None:
            return
        _, i, key, flops = best
        choice[i] = key


def _select_exact(opts: _Options, budget: float) -> RankPlan:
    """Minimum total latency subject to the budget, by merging Pareto fronts."""
    cap = _cap(opts, budget)
    if _max_reduction(opts) < budget:
        raise InfeasibleBudget(budget, _max_reduction(opts))
    # minimum flops still needed by the remaining layers, for pruning
    mins = [min(c.tucker_flops for c in opts.cells[i].values()) for i in opts.ids]
    rest = [sum(mins[j + 1:]) for j in range(len(mins))]
    front = [(opts.fixed_flops, 0.0, ())]
    for j, i in enumerate(opts.ids):
        merged = []
        for f, lat, picks in front:
            for key, cell in sorted(opts.cells[i].items()):
                nf = f + cell.tucker_flops
                if nf + rest[j] <= cap:
                    merged.append((nf, lat + cell.latency, picks + (key,)))
        merged.sort(key=lambda s: (s[0], s[1], s[2]))
        front = []
        for s in merged:
            if not front or s[1] < front[-1][1]:
                front.append(s)
    best = min(front, key=lambda s: (s[1], s[0], s[2]))
    return _plan(opts, dict(zip(opts.ids, best[2])), budget, "exact")


def save_table_csv(table: list[RankCell], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "d1", "d2", "TH", "TW", "TC", "latency_s", "tucker_flops",
                    "orig_flops"])
        for c in table:
            w.writerow([c.layer, c.d1, c.d2, *c.tiling, repr(c.latency), c.tucker_flops,
                        c.orig_flops])
