import csv
import json

import pytest
from hypothesis import given, strategies as st

from tuckerconv.conv import ConvShape
from tuckerconv.perf import load_gpu
from tuckerconv.ranks import (InfeasibleBudget, LayerDesc, RankCell, build_rank_latency_table,
                              core_shape, default_rank_grid, flops_counts, load_arch,
                              save_table_csv, select_ranks_under_budget)
from tuckerconv.tiling import select_tiling_analytical

import oracles

A100 = load_gpu("a100")


def resum_reduction(layers, plan):
    """Independent FLOPs re-summation: untouched and full-rank layers keep
    dense FLOPs."""
    orig = tucker = 0
    for layer in layers:
        s = layer.shape
        ho, wo = s.out_h, s.out_w
        dense = 2 * ho * wo * s.C * s.N * s.R * s.S
        orig += dense
        d1, d2 = plan.ranks.get(layer.id, (s.C, s.N))
        assert 1 <= d1 <= s.C and 1 <= d2 <= s.N
        if (d1, d2) != (s.C, s.N):
            tucker += sum(oracles.flops_tucker(s.H, s.W, ho, wo, s.C, s.N, s.R, s.S, d1, d2))
        else:
            tucker += dense
    return 1 - tucker / orig


def total_latency(table, ranks):
    idx = {(c.layer, c.d1, c.d2): c for c in table}
    return sum(idx[(i, *r)].latency for i, r in ranks.items())


def locally_optimal(layers, table, plan, budget):
    """No single-layer rank increase stays in budget and lowers latency."""
    orig = sum(flops_counts(l.shape, 1, 1)[0] for l in layers)
    fixed = sum(flops_counts(l.shape, 1, 1)[0] for l in layers if l.id not in plan.ranks)
    cells = {}
    for c in table:
        cells.setdefault(c.layer, {})[(c.d1, c.d2)] = c
    cur_flops = fixed + sum(cells[i][r].tucker_flops for i, r in plan.ranks.items())
    base = total_latency(table, plan.ranks)
    for i, (a, b) in plan.ranks.items():
        for (d1, d2), cell in cells[i].items():
            if (d1, d2) == (a, b) or d1 < a or d2 < b:
                continue
            f = cur_flops - cells[i][(a, b)].tucker_flops + cell.tucker_flops
            lat = base - cells[i][(a, b)].latency + cell.latency
            if f <= (1 - budget) * orig and lat < base:
                return False
    return True


# ---- FLOPs

def test_flops_hand_values():
    orig, tucker = flops_counts(ConvShape(14, 14, 256, 256), 64, 64)
    assert orig == 231_211_008
    assert tucker == 6_422_528 + 14_450_688 + 6_422_528 == 27_295_744
    assert 1 - tucker / orig == pytest.approx(0.882, abs=5e-4)


def test_pointwise_full_rank_overhead():
    orig, tucker = flops_counts(ConvShape(8, 8, 16, 16, 1, 1), 16, 16)
    assert tucker > orig


@pytest.mark.parametrize("d1,d2", [(0, 0), (0, 4), (4, 0), (17, 4)])
def test_flops_rank_bounds(d1, d2):
    with pytest.raises(ValueError):
        flops_counts(ConvShape(8, 8, 16, 16), d1, d2)


def test_default_grid():
    assert default_rank_grid(64) == [8, 16, 24, 32, 40, 48, 56, 64]
    assert default_rank_grid(3) == [1, 2, 3]


# ---- table

def test_table_size_one_grid():
    _, layers = load_arch("toy6")
    table = build_rank_latency_table(layers, A100, grid=[(4, 4)])
    assert len(table) == len(layers)


def test_table_monotone_spot_check_and_tiling():
    layer = LayerDesc("x", ConvShape(14, 14, 64, 64))
    table = build_rank_latency_table([layer], A100, grid=[(8, 8), (64, 64)])
    lat = {(c.d1, c.d2): c.latency for c in table}
    assert lat[(8, 8)] <= lat[(64, 64)]
    for c in table:
        sel = select_tiling_analytical(core_shape(layer.shape, c.d1, c.d2), A100,
                                       divisors_only=True)
        assert c.tiling == tuple(sel.config)


def test_table_skips_disallowed_and_csv(tmp_path):
    _, layers = load_arch("resnet18")
    assert not layers[0].allowed
    assert all(not l.allowed for l in layers if l.shape.R == 1)
    allowed = [l for l in layers if l.allowed]
    table = build_rank_latency_table(layers, A100, grid=[(8, 8)])
    assert {c.layer for c in table} == {l.id for l in allowed}
    save_table_csv(table, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == len(table) and rows[0]["layer"] == table[0].layer


def test_layer_desc_round_trip():
    d = LayerDesc("a", ConvShape(7, 7, 4, 8, stride=2))
    assert LayerDesc.from_dict(json.loads(json.dumps(d.to_dict()))) == d
    assert not LayerDesc.from_dict({"id": "p", "shape": {"H": 4, "W": 4, "C": 2, "N": 2,
                                                         "R": 1, "S": 1}}).allowed


# ---- selection

def test_tiny_budget_keeps_max_ranks():
    # any positive budget needs some reduction, so one layer must move; all
    # the others stay at their maximal (dense) ranks
    _, layers = load_arch("toy6")
    table = build_rank_latency_table(layers, A100)
    plan = select_ranks_under_budget(layers, 1e-9, table)
    moved = [l.id for l in layers if plan.ranks[l.id] != (l.shape.C, l.shape.N)]
    assert len(moved) == 1
    assert plan.achieved_reduction >= 1e-9


def test_forced_move_single_layer():
    layer = LayerDesc("only", ConvShape(8, 8, 8, 8))
    table = build_rank_latency_table([layer], A100, grid=[(2, 2), (4, 4)])
    _, t44 = flops_counts(layer.shape, 4, 4)
    orig, _ = flops_counts(layer.shape, 4, 4)
    budget = 1 - t44 / orig + 1e-3
    plan = select_ranks_under_budget([layer], budget, table)
    assert plan.ranks == {"only": (2, 2)}


def test_resnet18_budget_and_local_optimality():
    _, layers = load_arch("resnet18")
    table = build_rank_latency_table(layers, A100)
    plan = select_ranks_under_budget(layers, 0.63, table)
    red = resum_reduction(layers, plan)
    assert red >= 0.63
    assert red == pytest.approx(plan.achieved_reduction, abs=1e-12)
    assert locally_optimal(layers, table, plan, 0.63)
    assert select_ranks_under_budget(layers, 0.63, table) == plan


def test_infeasible_budget_reports_max():
    _, layers = load_arch("toy6")
    table = build_rank_latency_table(layers, A100)
    with pytest.raises(InfeasibleBudget) as info:
        select_ranks_under_budget(layers, 0.99, table)
    assert 0 < info.value.max_reduction < 0.99
    with pytest.raises(InfeasibleBudget):
        select_ranks_under_budget(layers, 0.99, table, exact=True)
    with pytest.raises(ValueError):
        select_ranks_under_budget(layers, 1.0, table)


def test_vgg16_loads():
    name, layers = load_arch("vgg16")
    assert name and len(layers) == 13 and not layers[0].allowed


@st.composite
def random_problem(draw):
    n_layers = draw(st.integers(1, 4))
    layers, table = [], []
    for j in range(n_layers):
        c = draw(st.sampled_from([4, 8, 16]))
        n = draw(st.sampled_from([4, 8, 16]))
        h = draw(st.sampled_from([4, 8]))
        layer = LayerDesc(f"L{j}", ConvShape(h, h, c, n))
        layers.append(layer)
        for d1 in default_rank_grid(c)[::2] + [c]:
            for d2 in default_rank_grid(n)[::2] + [n]:
                orig, tucker = flops_counts(layer.shape, d1, d2)
                if (d1, d2) == (c, n):
                    tucker = orig
                lat = draw(st.floats(1e-6, 1e-3))
                table.append(RankCell(layer.id, d1, d2, (1, 1, 1), lat, tucker, orig))
    table = list({(c.layer, c.d1, c.d2): c for c in table}.values())
    return layers, table, draw(st.floats(0.05, 0.6))


@given(random_problem())
def test_greedy_properties_random_tables(problem):
    layers, table, budget = problem
    try:
        plan = select_ranks_under_budget(layers, budget, table)
    except InfeasibleBudget:
        return
    assert resum_reduction(layers, plan) >= budget
    assert locally_optimal(layers, table, plan, budget)
    assert select_ranks_under_budget(layers, budget, table) == plan
    exact = select_ranks_under_budget(layers, budget, table, exact=True)
    assert resum_reduction(layers, exact) >= budget
    assert exact.latency <= plan.latency + 1e-15
