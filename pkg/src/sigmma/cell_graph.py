"""Spatial cell graphs with per-scale block constraints.

Scales subdivide the m x m tile into b x b blocks per axis: b = 4 (micro),
2 (meso), 1 (macro). A cell at (x, y) sits in block (floor(x / (m/b)),
floor(y / (m/b))). Edges at a scale may only join cells of the same block.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

SCALES = ("micro", "meso", "macro")
SUBDIVISIONS = {"micro": 4, "meso": 2, "macro": 1}
PREDECESSOR = {"meso": "micro", "macro": "meso"}


def block_index(x, y, scale, m):
    """Block (bx, by) of a point at ``scale`` in an m x m tile."""
    if not (0 <= x < m and 0 <= y < m):
        raise ValueError(f"coordinate ({x}, {y}) lies outside the {m}x{m} tile")
    side = m / SUBDIVISIONS[scale]
    return int(x // side), int(y // side)


def block_ids(coords, scale, m):
    """Flat block id (by * b + bx) for every row of an (n, 2) coordinate array."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if np.any(coords < 0) or np.any(coords >= m):
        bad = int(np.argmax(np.any((coords < 0) | (coords >= m), axis=1)))
        raise ValueError(f"coordinate {tuple(coords[bad])} lies outside the {m}x{m} tile")
    b = SUBDIVISIONS[scale]
    side = m / b
    bxy = (coords // side).astype(np.int64)
    return bxy[:, 1] * b + bxy[:, 0]


def _canonical(pairs):
    """Deduplicated (E, 2) int array with u < v, sorted lexicographically."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        return pairs
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


@dataclass
class CellGraph:
    """Cells of one tile with the micro proximity graph and candidate sets.

    Realised meso / macro edge sets depend on the learned edge selection and
    live on the encoder's activations; ``edges`` here holds what is fixed by
    geometry (micro edges, plus expanded sets when set by ``with_edges``).
    """

    coords: np.ndarray
    m: float
    edges: dict = field(default_factory=dict)
    blocks: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return len(self.coords)

    def block_of(self, node, scale):
        b = SUBDIVISIONS[scale]
        flat = int(self.blocks[scale][node])
        return flat % b, flat // b

    def neighbors(self, scale):
        nbrs = [set() for _ in range(self.n_nodes)]
        for u, v in self.edges.get(scale, np.zeros((0, 2), dtype=np.int64)):
            nbrs[u].add(int(v))
            nbrs[v].add(int(u))
        return nbrs

    def with_edges(self, scale, added):
        """Copy whose ``scale`` edge set is the predecessor set plus ``added``."""
        base = self.edges[PREDECESSOR[scale]]
        edges = dict(self.edges)
        edges[scale] = _canonical(np.concatenate([base, np.asarray(added, dtype=np.int64).reshape(-1, 2)]))
        return CellGraph(self.coords, self.m, edges, self.blocks)


def build_micro_graph(coords, m, k=6):
    """Symmetric k-NN graph built separately inside every micro block.

    Distance ties go to the lower node index. A pair is an edge if either
    endpoint lists the other among its k nearest.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    blocks = {s: block_ids(coords, s, m) for s in SCALES}
    pairs = []
    micro = blocks["micro"]
    for blk in np.unique(micro):
        members = np.flatnonzero(micro == blk)
        if len(members) < 2:
            continue
        diff = coords[members, None, :] - coords[None, members, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        kk = min(k, len(members) - 1)
        order = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        for row, nn in enumerate(order):
            for j in nn:
                pairs.append((members[row], members[j]))
    edges = {"micro": _canonical(pairs)}
    return CellGraph(coords, m, edges, blocks)


def candidate_pairs(g, scale, c_max=None):
    """Pairs that share a block at ``scale`` but not at its finer predecessor.

    Pairs already joined in the predecessor edge set are dropped. With
    ``c_max`` only pairs among the c_max closest candidates of either endpoint
    are kept (distance-ascending, ties to lower index).
    """
    if scale not in PREDECESSOR:
        raise ValueError(f"no candidate set for scale {scale!r}")
    prev = PREDECESSOR[scale]
    n = g.n_nodes
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    iu, iv = np.triu_indices(n, k=1)
    same = g.blocks[scale][iu] == g.blocks[scale][iv]
    finer = g.blocks[prev][iu] == g.blocks[prev][iv]
    keep = same & ~finer
    pairs = np.stack([iu[keep], iv[keep]], axis=1)
    existing = g.edges.get(prev)
    if existing is not None and len(existing) and len(pairs):
        ex = set(map(tuple, existing.tolist()))
        pairs = np.array([p for p in pairs.tolist() if tuple(p) not in ex],
                         dtype=np.int64).reshape(-1, 2)
    if c_max is None or not len(pairs):
        return pairs
    dist = np.linalg.norm(g.coords[pairs[:, 0]] - g.coords[pairs[:, 1]], axis=1)
    # every pair appears once per endpoint; rank each node's pairs by (distance, other end)
    node = np.concatenate([pairs[:, 0], pairs[:, 1]])
    other = np.concatenate([pairs[:, 1], pairs[:, 0]])
    pair_idx = np.tile(np.arange(len(pairs)), 2)
    order = np.lexsort((other, np.tile(dist, 2), node))
    sorted_node = node[order]
    rank = np.arange(len(order)) - np.searchsorted(sorted_node, sorted_node, side="left")
    chosen = np.zeros(len(pairs), dtype=bool)
    chosen[pair_idx[order[rank < c_max]]] = True
    return pairs[chosen]


def export_edges_csv(path, edge_sets):
    """Write ``scale,u,v`` rows for each scale's edge array."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "u", "v"])
        for scale in SCALES:
            for u, v in np.asarray(edge_sets.get(scale, []), dtype=np.int64).reshape(-1, 2):
                w.writerow([scale, int(u), int(v)])
