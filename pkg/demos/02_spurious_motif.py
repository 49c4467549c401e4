"""
Spurious-Motif graphs
=====================

Each graph is a base (tree, ladder or wheel) with one motif (cycle, house
or crane) hung off it by a single edge.  The label is the motif; with
``bias`` the base agrees with the label that often, which is the shortcut a
classifier can learn instead of the motif.
"""
import numpy as np

from c2r.graphdata import BaseKind, MotifKind, build_motif, collate, gen_spurious_motif

for kind in MotifKind:
    n, edges = build_motif(kind)
    print(f"{kind.name:6s} {n} nodes, {len(edges)} edges")

train = gen_spurious_motif(2000, bias=0.9, seed=0)
test = gen_spurious_motif(2000, bias=1 / 3, seed=2, split="test")

# how often the base type matches the label
for name, ds in (("train", train), ("test", test)):
    agree = np.mean(ds.labels == ds.env_hints)
    print(f"{name}: P(base == label) = {agree:.3f}")

# the joint table shows the shortcut in the biased split
table = np.zeros((3, 3), int)
np.add.at(table, (train.labels, train.env_hints), 1)
print("rows = motif, cols = base")
print(table)

sizes = np.array([g.n_nodes for g in train])
edges = np.array([g.n_edges for g in train])
print(f"mean nodes {sizes.mean():.1f}, mean edges {edges.mean():.1f}")
print(f"motif fraction of nodes {np.mean([g.rationale_mask.mean() for g in train]):.3f}")

# a batch is the disjoint union of its graphs
batch = collate(train.graphs[:4])
print("batch nodes", batch.n_nodes, "segments", np.bincount(batch.segment_ids))
