"""
Which transcript view helps retrieval?
======================================

Trains one model per cell on the same worlds and compares Recall@10. Two seeds
keep this under a minute; the acceptance suite uses five.
With two seeds the clip-length cells sit within noise of each other; the
views and frame-count gaps are large enough to show up anyway.
"""

from dualview import experiments as ex

run = ex.demo_config()
seeds = [0, 1]
cells = [
    ("both", "random", 4),
    ("a", "random", 4),
    ("w", "random", 4),
    ("both", 4.0, 4),
    ("both", "random", 1),
]

results = ex.run_ablation(run, seeds, cells)

print(f"{'views':>5} {'length':>7} {'T':>2}  R@10")
for views, length, T in cells:
    r10 = ex.mean_metric(results, "R@10", views=views, length=length, frames=T)
    print(f"{views:>5} {str(length):>7} {T:>2}  {r10:.3f}")
