"""Pick per-layer Tucker ranks for a ResNet-18-like network under a FLOPs budget."""
from tuckerconv.perf import load_gpu
from tuckerconv.ranks import build_rank_latency_table, load_arch, select_ranks_under_budget

_, layers = load_arch("resnet18")
g = load_gpu("a100")
table = build_rank_latency_table(layers, g)

for budget in (0.5, 0.63, 0.75):
    plan = select_ranks_under_budget(layers, budget, table)
    print(f"budget {budget:.2f}: reduction {plan.achieved_reduction:.3f}, "
          f"modeled latency {plan.latency * 1e6:.1f} us")

plan = select_ranks_under_budget(layers, 0.63, table)
print("\nranks at B=0.63")
for layer in layers:
    s = layer.shape
    d1, d2 = plan.ranks.get(layer.id, (s.C, s.N))
    note = "" if layer.allowed else "  (kept dense)"
    print(f"  {layer.id:<20} {s.C:>3}->{s.N:<3} ranks {d1:>3},{d2:<3}{note}")

_, toy = load_arch("toy6")
toy_table = build_rank_latency_table(toy, g)
greedy = select_ranks_under_budget(toy, 0.63, toy_table)
exact = select_ranks_under_budget(toy, 0.63, toy_table, exact=True)
print(f"\ntoy6 greedy {greedy.latency * 1e6:.2f} us vs exact {exact.latency * 1e6:.2f} us")
