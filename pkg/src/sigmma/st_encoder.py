"""Hierarchical graph encoder for the cell side of a tile.

Pipeline per tile: project normalised expression to ``d_h`` -> GNN layers on
the micro proximity graph -> pool z_micro -> score the meso candidate pairs,
add edges through a relaxed Bernoulli draw -> GNN -> pool z_meso -> same for
macro. Each scale's pooled vector is an attention readout per block of that
scale, averaged over the non-empty blocks of the tile.

Tiles of a batch are packed into one disjoint graph so every operation is a
single vectorised call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .cell_graph import SCALES, SUBDIVISIONS, build_micro_graph, candidate_pairs

DEFAULT_DEPTHS = {"micro": 2, "meso": 1, "macro": 1}
EXPANSIONS = ("meso", "macro")


@dataclass
class StEncoderParams:
    weights: dict
    n_genes: int
    d_h: int
    d: int
    depths: dict = field(default_factory=lambda: dict(DEFAULT_DEPTHS))

    def parameters(self):
        return dict(self.weights)


def init_st_encoder(n_genes, d_h=64, d=64, d_score=32, depths=None, seed=0):
    depths = dict(DEFAULT_DEPTHS if depths is None else depths)
    rng = np.random.default_rng(seed)
    w = {
        "proj.w": rng.normal(0, 1.0 / np.sqrt(n_genes), (n_genes, d_h)),
        "proj.b": np.zeros(d_h),
    }
    for scale in SCALES:
        for layer in range(depths[scale]):
            w[f"gnn.{scale}.{layer}.w"] = rng.normal(0, np.sqrt(2.0 / (2 * d_h)), (2 * d_h, d_h))
        w[f"pool.{scale}.gate.w"] = rng.normal(0, 1.0 / np.sqrt(d_h), (d_h, 1))
        w[f"pool.{scale}.gate.b"] = np.zeros(1)
        w[f"pool.{scale}.tf.w"] = rng.normal(0, 1.0 / np.sqrt(d_h), (d_h, d))
        w[f"pool.{scale}.tf.b"] = np.zeros(d)
    for scale in EXPANSIONS:
        w[f"scorer.{scale}.w1"] = rng.normal(0, np.sqrt(2.0 / (2 * d_h)), (2 * d_h, d_score))
        w[f"scorer.{scale}.b1"] = np.zeros(d_score)
        w[f"scorer.{scale}.w2"] = rng.normal(0, 1.0 / np.sqrt(d_score), (d_score, 1))
        w[f"scorer.{scale}.b2"] = np.zeros(1)
    weights = {k: nc.tensor(v, requires_grad=True) for k, v in w.items()}
    return StEncoderParams(weights, n_genes, d_h, d, depths)


def init_nograph_encoder(n_genes, d_h=64, d=64, seed=0):
    """Parameters of the set encoder used when the cell graph is ablated."""
    rng = np.random.default_rng(seed)
    w = {
        "nograph.gene_emb": rng.normal(0, 1.0 / np.sqrt(n_genes), (n_genes, d_h)),
        "nograph.proj.w": rng.normal(0, 1.0 / np.sqrt(d_h), (d_h, d)),
        "nograph.proj.b": np.zeros(d),
    }
    weights = {k: nc.tensor(v, requires_grad=True) for k, v in w.items()}
    return StEncoderParams(weights, n_genes, d_h, d, {})


# ------------------------------------------------------------------ layers

def gnn_layer(h, src, dst, weight, W):
    """relu(W . [h_v, weighted mean of neighbour embeddings]).

    ``src``/``dst`` list directed messages (both directions for an undirected
    edge), ``weight`` gives one scalar per message. A node whose incoming
    weights sum below 1e-12 aggregates the zero vector.
    """
    h = nc.as_tensor(h)
    n = h.shape[0]
    if len(src):
        wcol = nc.reshape(weight, (-1, 1))
        num = nc.segment_sum(nc.take_rows(h, src) * wcol, dst, n)
        den = nc.segment_sum(wcol, dst, n)
        agg = num * nc.safe_reciprocal(den)
    else:
        agg = nc.tensor(np.zeros(h.shape))
    return nc.relu(nc.matmul(nc.concat([h, agg], axis=1), W))


def directed(pairs, weight):
    """Expand undirected (E, 2) pairs with per-edge weights to message lists."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return src, dst, nc.concat([weight, weight], axis=0)


def pair_logits(hu, hv, weights, scale):
    w = weights
    hid = nc.relu(nc.matmul(nc.concat([hu, hv], axis=1), w[f"scorer.{scale}.w1"]) + w[f"scorer.{scale}.b1"])
    return nc.reshape(nc.matmul(hid, w[f"scorer.{scale}.w2"]) + w[f"scorer.{scale}.b2"], (-1,))


def edge_score(hu, hv, weights, scale):
    """Symmetrised edge probability (phi(u, v) + phi(v, u)) / 2, phi = sigmoid(MLP)."""
    hu, hv = nc.as_tensor(hu), nc.as_tensor(hv)
    if hu.ndim == 1:
        hu, hv = nc.reshape(hu, (1, -1)), nc.reshape(hv, (1, -1))
    if hu.shape != hv.shape:
        raise nc.ShapeError(f"edge_score: incompatible shapes {hu.shape} and {hv.shape}")
    fwd = nc.sigmoid(pair_logits(hu, hv, weights, scale))
    rev = nc.sigmoid(pair_logits(hv, hu, weights, scale))
    return (fwd + rev) * 0.5


def gumbel_edge_select(s, tau, mode="train", rng=None, noise=None):
    """Relaxed Bernoulli edge weight.

    train: sigmoid((log(s / (1 - s)) + g1 - g0) / tau) with Gumbel g1, g0 drawn
    from ``rng`` (or given as ``noise = (g1, g0)``). infer: 1 where s >= 0.5.
    """
    if tau <= 0:
        raise ValueError(f"Gumbel temperature must be positive, got {tau}")
    s = nc.as_tensor(s)
    if mode == "infer":
        return nc.tensor((s.data >= 0.5).astype(np.float64))
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if noise is None:
        n = s.size
        g = nc.gumbel_from_uniform(rng.uniform(size=2 * n)) if n else np.zeros(0)
        g1, g0 = g[:n].reshape(s.shape), g[n:].reshape(s.shape)
    else:
        g1, g0 = noise
    sc = nc.clip(s, 1e-12, 1.0 - 1e-12)
    logit = nc.log(sc) - nc.log(1.0 - sc)
    return nc.sigmoid((logit + (np.asarray(g1) - np.asarray(g0))) * (1.0 / tau))


def attention_pool(h, weights, scale, segment=None, n_segments=1):
    """Gated attention readout: softmax(gate(h)) weighted sum of transform(h).

    With ``segment`` the readout is taken per segment and returns
    (n_segments, d); otherwise over all rows, returning (d,).
    """
    h = nc.as_tensor(h)
    if h.shape[0] == 0:
        raise ValueError("attention_pool: empty graph")
    w = weights
    gate = nc.reshape(nc.matmul(h, w[f"pool.{scale}.gate.w"]) + w[f"pool.{scale}.gate.b"], (-1,))
    tf = nc.matmul(h, w[f"pool.{scale}.tf.w"]) + w[f"pool.{scale}.tf.b"]
    if segment is None:
        att = nc.softmax(gate)
        return nc.sum(tf * nc.reshape(att, (-1, 1)), axis=0)
    att = nc.segment_softmax(gate, segment, n_segments)
    return nc.segment_sum(tf * nc.reshape(att, (-1, 1)), segment, n_segments)


# ------------------------------------------------------------------ batching

@dataclass
class TileGraph:
    """Geometry of one tile: proximity graph plus candidate pairs per expansion."""

    graph: object
    candidates: dict


def build_tile_graph(coords, m, k=6, c_max=8):
    g = build_micro_graph(coords, m, k)
    cands = {"meso": candidate_pairs(g, "meso", c_max)}
    # meso edges never leave a meso block, so macro candidates do not depend on them
    cands["macro"] = candidate_pairs(g, "macro", c_max)
    return TileGraph(g, cands)


@dataclass
class GraphBatch:
    x: np.ndarray                 # (N, G) normalised expression
    node_tile: np.ndarray         # (N,)
    n_tiles: int
    micro_edges: np.ndarray       # (E, 2) global node ids
    candidates: dict              # scale -> (C, 2)
    block_segment: dict           # scale -> (N,) compact block id
    block_tile: dict              # scale -> (S,) tile of each compact block
    offsets: np.ndarray           # (n_tiles + 1,)


def pack_graphs(features, tile_graphs):
    """Pack per-tile (x, TileGraph) into one disjoint GraphBatch."""
    offsets = np.concatenate([[0], np.cumsum([len(f) for f in features])]).astype(np.int64)
    if np.any(np.diff(offsets) == 0):
        raise ValueError("every tile in a graph batch needs at least one cell")
    x = np.concatenate(features, axis=0)
    node_tile = np.repeat(np.arange(len(features)), np.diff(offsets))
    micro = np.concatenate([tg.graph.edges["micro"] + o for tg, o in zip(tile_graphs, offsets)])
    cands = {s: np.concatenate([tg.candidates[s] + o for tg, o in zip(tile_graphs, offsets)])
             for s in EXPANSIONS}
    seg, seg_tile = {}, {}
    for scale in SCALES:
        nb = SUBDIVISIONS[scale] ** 2
        raw = np.concatenate([tg.graph.blocks[scale] + nb * t for t, tg in enumerate(tile_graphs)])
        uniq, compact = np.unique(raw, return_inverse=True)
        seg[scale] = compact.reshape(-1)
        seg_tile[scale] = uniq // nb
    return GraphBatch(x, node_tile, len(features), micro.reshape(-1, 2).astype(np.int64),
                      {s: c.reshape(-1, 2).astype(np.int64) for s, c in cands.items()},
                      seg, seg_tile, offsets)


@dataclass
class ScaleActivations:
    h: dict = field(default_factory=dict)          # scale -> stage-final node embeddings
    scores: dict = field(default_factory=dict)     # scale -> s_uv per candidate
    weights: dict = field(default_factory=dict)    # scale -> p_hat per candidate
    realized: dict = field(default_factory=dict)   # scale -> (E, 2) realised edge set


def _pool_scale(h, batch, weights, scale):
    seg = batch.block_segment[scale]
    seg_tile = batch.block_tile[scale]
    per_block = attention_pool(h, weights, scale, seg, len(seg_tile))
    counts = np.bincount(seg_tile, minlength=batch.n_tiles).astype(np.float64)
    summed = nc.segment_sum(per_block, seg_tile, batch.n_tiles)
    return summed * (1.0 / counts)[:, None]


def st_forward_batch(params, batch, rng=None, mode="train", tau_g=0.5,
                     sparsify=True):
    """Per-scale (n_tiles, d) embeddings and the activations that produced them.

    ``sparsify=False`` adds every candidate pair with weight 1 (no scoring).
    """
    w = params.weights
    h = nc.matmul(nc.tensor(batch.x), w["proj.w"]) + w["proj.b"]
    act = ScaleActivations()
    z = {}

    pairs = batch.micro_edges
    edge_w = nc.tensor(np.ones(len(pairs)))
    realized = pairs
    for scale in SCALES:
        if scale in EXPANSIONS:
            cand = batch.candidates[scale]
            if len(cand) == 0:
                phat = nc.tensor(np.zeros(0))
                add_pairs, add_w, hard = cand, phat, cand
            elif not sparsify:
                phat = nc.tensor(np.ones(len(cand)))
                add_pairs, add_w, hard = cand, phat, cand
            else:
                s = edge_score(nc.take_rows(h, cand[:, 0]), nc.take_rows(h, cand[:, 1]), w, scale)
                act.scores[scale] = s
                phat = gumbel_edge_select(s, tau_g, mode, rng)
                keep = phat.data >= 0.5
                hard = cand[keep]
                if mode == "infer":
                    add_pairs, add_w = hard, nc.tensor(np.ones(len(hard)))
                else:
                    add_pairs, add_w = cand, phat
            act.weights[scale] = phat
            pairs = np.concatenate([pairs, add_pairs]) if len(add_pairs) else pairs
            edge_w = nc.concat([edge_w, add_w], axis=0) if len(add_pairs) else edge_w
            realized = np.concatenate([realized, hard]) if len(hard) else realized
        src, dst, msg_w = directed(pairs, edge_w)
        for layer in range(params.depths[scale]):
            h = gnn_layer(h, src, dst, msg_w, w[f"gnn.{scale}.{layer}.w"])
        act.h[scale] = h
        act.realized[scale] = realized
        z[scale] = _pool_scale(h, batch, w, scale)
    return z, act


def nograph_forward_batch(params, x_list):
    """Set encoder: expression-weighted gene embeddings, mean over cells, projection.

    The same vector is returned for every scale.
    """
    w = params.weights
    rows = []
    for x in x_list:
        cell = nc.matmul(nc.tensor(x), w["nograph.gene_emb"])
        rows.append(nc.reshape(nc.mean(cell, axis=0), (1, -1)))
    pooled = nc.concat(rows, axis=0)
    out = nc.matmul(pooled, w["nograph.proj.w"]) + w["nograph.proj.b"]
    return {scale: out for scale in SCALES}


def st_forward(x, tile_graph, params, rng=None, mode="train", tau_g=0.5, sparsify=True):
    """Single-tile convenience wrapper around :func:`st_forward_batch`.

    Returns ({scale: (d,) tensor}, ScaleActivations).
    """
    batch = pack_graphs([np.asarray(x, dtype=np.float64)], [tile_graph])
    z, act = st_forward_batch(params, batch, rng, mode, tau_g, sparsify)
    return {s: nc.reshape(v, (-1,)) for s, v in z.items()}, act
