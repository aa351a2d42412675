"""How one tile's cell graph grows from micro to macro.

Micro edges are k-NN links inside each of the 16 micro blocks. The meso and
macro stages score candidate pairs that share the coarser block but not the
finer one, and keep them through a relaxed Bernoulli draw. Lower Gumbel
temperatures push the draws toward hard 0/1 decisions.
"""
import numpy as np

from sigmma import numcore as nc
from sigmma import st_encoder as se
from sigmma.cell_graph import block_ids

rng = np.random.default_rng(0)
n, m, genes = 60, 64, 30
coords = rng.uniform(0, m, size=(n, 2))
expr = rng.normal(size=(n, genes))

tg = se.build_tile_graph(coords, m, k=6, c_max=8)
print("micro edges:", len(tg.graph.edges["micro"]))
for scale in ("meso", "macro"):
    print(f"{scale} candidates:", len(tg.candidates[scale]))

params = se.init_st_encoder(genes, 32, 32, 16, seed=0)
_, act = se.st_forward(expr, tg, params, nc.Rng(0), "infer", 0.5)
for scale in ("micro", "meso", "macro"):
    e = act.realized[scale]
    blk = block_ids(coords, scale, m)
    inside = np.all(blk[e[:, 0]] == blk[e[:, 1]]) if len(e) else True
    deg = np.bincount(e.ravel(), minlength=n).mean() if len(e) else 0.0
    print(f"{scale:>5}: {len(e):4d} edges, mean degree {deg:.1f}, all intra-block: {inside}")

scores = nc.tensor(np.full(20_000, 0.7))
for tau in (1.0, 0.5, 0.1, 0.05):
    p = se.gumbel_edge_select(scores, tau, "train", nc.Rng(1)).data
    print(f"tau {tau:<4}: mean weight {p.mean():.3f}, "
          f"share within 1e-3 of 0 or 1: {np.mean(np.minimum(p, 1 - p) < 1e-3):.3f}")
