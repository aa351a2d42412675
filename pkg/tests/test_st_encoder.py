import math

import numpy as np
import pytest
from scipy import integrate

from sigmma import numcore as nc
from sigmma import st_encoder as se
from sigmma.cell_graph import block_ids

G, DH, D = 12, 6, 5


def params(seed=0, depths=None):
    return se.init_st_encoder(G, DH, D, 4, depths, seed=seed)


def tile(n, seed, m=64, c_max=None):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, m, (n, 2))
    x = rng.normal(size=(n, G))
    return coords, x, se.build_tile_graph(coords, m, 6, c_max)


def as_set(arr):
    return {tuple(sorted(p)) for p in np.asarray(arr).tolist()}


# ------------------------------------------------------------------ gnn layer

def test_isolated_node_identity_self_half():
    h = nc.tensor([[1.0, -2.0]])
    W = nc.tensor(np.vstack([np.eye(2), np.zeros((2, 2))]))
    out = se.gnn_layer(h, np.array([], int), np.array([], int), nc.tensor(np.zeros(0)), W)
    np.testing.assert_array_equal(out.data, [[1.0, 0.0]])


def test_single_neighbour_hand_example():
    h = nc.tensor([[1.0, 0.0], [3.0, 2.0]])
    W = nc.tensor(np.vstack([np.eye(2), np.eye(2)]))
    src, dst, w = se.directed(np.array([[0, 1]]), nc.tensor([1.0]))
    out = se.gnn_layer(h, src, dst, w, W)
    np.testing.assert_array_equal(out.data[0], [4.0, 2.0])


def test_zero_weight_edge_equals_isolated():
    h = nc.tensor([[1.0, -2.0], [5.0, 7.0]])
    W = nc.tensor(np.random.default_rng(0).normal(size=(4, 2)))
    src, dst, w = se.directed(np.array([[0, 1]]), nc.tensor([0.0]))
    with_edge = se.gnn_layer(h, src, dst, w, W)
    alone = se.gnn_layer(h, np.array([], int), np.array([], int), nc.tensor(np.zeros(0)), W)
    np.testing.assert_array_equal(with_edge.data, alone.data)


def test_weighted_mean_aggregate():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(4, 3))
    pairs = np.array([[0, 1], [0, 2], [2, 3]])
    ew = np.array([0.2, 0.6, 0.9])
    W = np.vstack([np.zeros((3, 3)), np.eye(3)])     # output = relu(aggregate)
    src, dst, w = se.directed(pairs, nc.tensor(ew))
    out = se.gnn_layer(nc.tensor(h), src, dst, w, nc.tensor(W)).data
    agg0 = (0.2 * h[1] + 0.6 * h[2]) / 0.8
    np.testing.assert_allclose(out[0], np.maximum(agg0, 0), atol=1e-14)
    agg2 = (0.6 * h[0] + 0.9 * h[3]) / 1.5
    np.testing.assert_allclose(out[2], np.maximum(agg2, 0), atol=1e-14)


# ------------------------------------------------------------------ scorer

def test_zero_scorer_gives_half():
    p = params()
    for k, t in p.weights.items():
        if k.startswith("scorer."):
            t.data[...] = 0.0
    hu = np.random.default_rng(2).normal(size=(7, DH))
    s = se.edge_score(hu, hu[::-1], p.weights, "meso")
    np.testing.assert_array_equal(s.data, 0.5)


def test_score_symmetrised():
    p = params(3)
    rng = np.random.default_rng(3)
    hu, hv = rng.normal(size=(9, DH)), rng.normal(size=(9, DH))
    fwd = nc.sigmoid(se.pair_logits(nc.tensor(hu), nc.tensor(hv), p.weights, "macro")).data
    rev = nc.sigmoid(se.pair_logits(nc.tensor(hv), nc.tensor(hu), p.weights, "macro")).data
    assert not np.allclose(fwd, rev)
    s = se.edge_score(hu, hv, p.weights, "macro").data
    np.testing.assert_allclose(s, (fwd + rev) / 2, atol=1e-15)
    np.testing.assert_allclose(se.edge_score(hv, hu, p.weights, "macro").data, s, atol=1e-15)
    assert np.all((s > 0) & (s < 1))


def test_large_bias_monotone_to_one():
    p = params(4)
    hu = np.random.default_rng(4).normal(size=(3, DH))
    prev = -1.0
    for b in (0.0, 2.0, 5.0, 20.0, 40.0):
        p.weights["scorer.meso.b2"].data[...] = b
        s = float(se.edge_score(hu[:1], hu[1:2], p.weights, "meso").data[0])
        assert s > prev
        prev = s
    assert prev == pytest.approx(1.0, abs=1e-12)


# ------------------------------------------------------------------ gumbel

def test_equal_noise_half_at_half():
    g = np.array([0.3, -1.2])
    out = se.gumbel_edge_select(nc.tensor([0.5, 0.5]), 0.7, "train", noise=(g, g))
    np.testing.assert_allclose(out.data, 0.5, atol=1e-15)


def test_tau_nonpositive_raises():
    with pytest.raises(ValueError):
        se.gumbel_edge_select(nc.tensor([0.5]), 0.0, "train", nc.Rng(0))


def test_infer_mode_is_hard_threshold():
    out = se.gumbel_edge_select(nc.tensor([0.2, 0.5, 0.49999, 0.9]), 0.5, "infer")
    np.testing.assert_array_equal(out.data, [0.0, 1.0, 0.0, 1.0])


def _expected_phat(s, tau):
    # g1 - g0 ~ standard logistic; integrate sigmoid((logit s + l)/tau) against its density
    c = math.log(s / (1 - s))

    def f(l):
        dens = math.exp(-abs(l)) / (1 + math.exp(-abs(l))) ** 2
        return dens / (1 + math.exp(-(c + l) / tau))

    val, _ = integrate.quad(f, -60, 60, limit=400, epsabs=1e-12)
    return val


def test_mean_phat_matches_oracle():
    p = se.gumbel_edge_select(nc.tensor(np.full(1_000_000, 0.7)), 1.0, "train", nc.Rng(11)).data
    assert abs(p.mean() - _expected_phat(0.7, 1.0)) < 0.005


def test_hard_limit_is_bernoulli_s():
    # P(p_hat > 1/2) = P(L > -logit s) = s for any tau
    p = se.gumbel_edge_select(nc.tensor(np.full(200_000, 0.7)), 0.3, "train", nc.Rng(12)).data
    assert abs(np.mean(p > 0.5) - 0.7) < 0.005


def test_phat_in_unit_interval():
    s = nc.tensor(np.random.default_rng(5).uniform(1e-6, 1 - 1e-6, 10_000))
    p = se.gumbel_edge_select(s, 0.1, "train", nc.Rng(5)).data
    assert np.all((p >= 0) & (p <= 1))


def test_gumbel_replay_is_deterministic():
    s = nc.tensor(np.full(50, 0.4))
    a = se.gumbel_edge_select(s, 0.5, "train", nc.Rng([1, 2])).data
    b = se.gumbel_edge_select(s, 0.5, "train", nc.Rng([1, 2])).data
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------ pooling

def test_attention_pool_single_node():
    p = params(6)
    h = np.random.default_rng(6).normal(size=(1, DH))
    z = se.attention_pool(h, p.weights, "micro").data
    tf = h @ p.weights["pool.micro.tf.w"].data + p.weights["pool.micro.tf.b"].data
    np.testing.assert_allclose(z, tf[0], atol=1e-14)


def test_attention_pool_identical_nodes():
    p = params(7)
    h = np.random.default_rng(7).normal(size=(1, DH))
    one = se.attention_pool(h, p.weights, "meso").data
    two = se.attention_pool(np.vstack([h, h]), p.weights, "meso").data
    np.testing.assert_allclose(two, one, atol=1e-14)


def brute_pool(h, w, scale):
    gate = [float(row @ w[f"pool.{scale}.gate.w"].data[:, 0] + w[f"pool.{scale}.gate.b"].data[0])
            for row in h]
    mx = max(gate)
    e = [math.exp(g - mx) for g in gate]
    tot = sum(e)
    out = np.zeros(D)
    for row, ei in zip(h, e):
        out += (ei / tot) * (row @ w[f"pool.{scale}.tf.w"].data + w[f"pool.{scale}.tf.b"].data)
    return out


def test_attention_pool_matches_brute_force():
    p = params(8)
    h = np.random.default_rng(8).normal(size=(5, DH))
    np.testing.assert_allclose(se.attention_pool(h, p.weights, "macro").data,
                               brute_pool(h, p.weights, "macro"), atol=1e-12)


def test_attention_pool_segments_match_separate_calls():
    p = params(9)
    h = np.random.default_rng(9).normal(size=(7, DH))
    seg = np.array([0, 1, 0, 2, 1, 2, 2])
    out = se.attention_pool(h, p.weights, "micro", seg, 3).data
    for k in range(3):
        np.testing.assert_allclose(out[k], brute_pool(h[seg == k], p.weights, "micro"), atol=1e-12)


def test_attention_pool_empty_raises():
    with pytest.raises(ValueError):
        se.attention_pool(np.zeros((0, DH)), params().weights, "micro")


# ------------------------------------------------------------------ full forward

@pytest.mark.parametrize("seed", range(6))
def test_realized_edges_sound_and_nested(seed):
    coords, x, tg = tile(45, seed)
    p = params(seed)
    for mode in ("train", "infer"):
        _, act = se.st_forward(x, tg, p, nc.Rng([seed, 1]), mode, 0.5)
        prev = set()
        for scale in se.SCALES:
            e = act.realized[scale]
            blk = block_ids(coords, scale, 64)
            assert np.all(blk[e[:, 0]] == blk[e[:, 1]])
            cur = as_set(e)
            assert prev <= cur
            prev = cur


def test_no_sparsification_realizes_all_candidates():
    coords, x, tg = tile(40, 1)
    _, act = se.st_forward(x, tg, params(1), nc.Rng(0), "train", 0.5, sparsify=False)
    micro = as_set(tg.graph.edges["micro"])
    meso = micro | as_set(tg.candidates["meso"])
    assert as_set(act.realized["meso"]) == meso
    assert as_set(act.realized["macro"]) == meso | as_set(tg.candidates["macro"])


def test_forced_scores_equal_fully_connected_ablation():
    coords, x, tg = tile(40, 2)
    p = params(2)
    for s in se.EXPANSIONS:
        p.weights[f"scorer.{s}.b2"].data[...] = 60.0
    z_sel, act = se.st_forward(x, tg, p, None, "infer", 0.5)
    z_full, act_full = se.st_forward(x, tg, p, None, "infer", 0.5, sparsify=False)
    for s in se.SCALES:
        np.testing.assert_allclose(z_sel[s].data, z_full[s].data, atol=1e-12)
        assert as_set(act.realized[s]) == as_set(act_full.realized[s])


def test_empty_candidates_leave_edges_unchanged():
    coords = np.array([[3.0, 3.0], [5.0, 4.0], [8.0, 9.0]])       # one micro block
    tg = se.build_tile_graph(coords, 64, 6, None)
    assert len(tg.candidates["meso"]) == 0 and len(tg.candidates["macro"]) == 0
    x = np.random.default_rng(0).normal(size=(3, G))
    _, act = se.st_forward(x, tg, params(), nc.Rng(0), "train", 0.5)
    for s in se.SCALES:
        assert as_set(act.realized[s]) == as_set(tg.graph.edges["micro"])


def test_one_cell_scales_differ_only_by_depth():
    coords = np.array([[10.0, 50.0]])
    tg = se.build_tile_graph(coords, 64, 6, None)
    p = params(3)
    x = np.random.default_rng(3).normal(size=(1, G))
    z, _ = se.st_forward(x, tg, p, nc.Rng(0), "train", 0.5)
    w = {k: v.data for k, v in p.weights.items()}
    h = x @ w["proj.w"] + w["proj.b"]
    for scale in se.SCALES:
        for layer in range(p.depths[scale]):
            h = np.maximum(np.hstack([h, np.zeros_like(h)]) @ w[f"gnn.{scale}.{layer}.w"], 0)
        expect = h[0] @ w[f"pool.{scale}.tf.w"] + w[f"pool.{scale}.tf.b"]
        np.testing.assert_allclose(z[scale].data, expect, atol=1e-12)


def test_zero_gnn_weights_give_transform_bias():
    coords, x, tg = tile(30, 4)
    p = params(4)
    for k, t in p.weights.items():
        if k.startswith("gnn."):
            t.data[...] = 0.0
        if k.endswith("tf.b"):
            t.data[...] = np.arange(D) + 0.5
    z, _ = se.st_forward(x, tg, p, nc.Rng(0), "train", 0.5)
    for s in se.SCALES:
        np.testing.assert_allclose(z[s].data, np.arange(D) + 0.5, atol=1e-13)


@pytest.mark.parametrize("seed", range(4))
def test_node_permutation(seed):
    coords, x, tg = tile(35, 10 + seed)
    perm = np.random.default_rng(seed).permutation(35)
    tg_p = se.build_tile_graph(coords[perm], 64, 6, None)
    p = params(seed)
    z, act = se.st_forward(x, tg, p, None, "infer", 0.5)
    zp, actp = se.st_forward(x[perm], tg_p, p, None, "infer", 0.5)
    for s in se.SCALES:
        np.testing.assert_allclose(zp[s].data, z[s].data, atol=1e-12)
        np.testing.assert_allclose(actp.h[s].data, act.h[s].data[perm], atol=1e-12)


def test_infer_mode_deterministic():
    coords, x, tg = tile(30, 5)
    p = params(5)
    a, _ = se.st_forward(x, tg, p, nc.Rng(1), "infer", 0.5)
    b, _ = se.st_forward(x, tg, p, nc.Rng(2), "infer", 0.5)
    for s in se.SCALES:
        np.testing.assert_array_equal(a[s].data, b[s].data)


def test_batch_equals_single_tiles():
    p = params(6)
    tiles = [tile(n, 20 + n) for n in (12, 30, 7)]
    batch = se.pack_graphs([t[1] for t in tiles], [t[2] for t in tiles])
    zb, _ = se.st_forward_batch(p, batch, None, "infer", 0.5)
    for i, (_, x, tg) in enumerate(tiles):
        z, _ = se.st_forward(x, tg, p, None, "infer", 0.5)
        for s in se.SCALES:
            np.testing.assert_allclose(zb[s].data[i], z[s].data, atol=1e-12)


def _fd_check(p, loss_fn, h=1e-6, n_entries=4, seed=0):
    nc.zero_grad(p.weights.values())
    nc.backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = {}
    for name, t in p.weights.items():
        idx = rng.choice(t.size, size=min(n_entries, t.size), replace=False).tolist()
        fd = nc.finite_difference_grad(loss_fn, t, h, idx)
        a = np.array([t.grad.reshape(-1)[i] for i in idx])
        b = np.array([fd[i] for i in idx])
        # floor: softmax gate biases have an identically zero gradient, so near
        # zero this is an absolute check (error < 1e-7)
        worst[name] = np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-3)
    return worst


def test_gradients_all_groups_train_mode():
    coords, x, tg = tile(20, 7)
    p = params(7)
    r = np.random.default_rng(7).normal(size=(3, D))

    def loss():
        z, _ = se.st_forward(x, tg, p, nc.Rng([7, 7]), "train", 0.5)
        return nc.sum(z["micro"] * r[0]) + nc.sum(z["meso"] * r[1]) + nc.sum(z["macro"] * r[2])

    worst = _fd_check(p, loss)
    assert max(worst.values()) < 1e-4, worst


def test_scorer_gradient_nonzero_train_mode():
    coords, x, tg = tile(20, 8)
    p = params(8)

    def loss():
        z, _ = se.st_forward(x, tg, p, nc.Rng([8, 1]), "train", 0.5)
        return nc.sum(z["macro"] * z["macro"])

    nc.zero_grad(p.weights.values())
    nc.backward(loss())
    for s in se.EXPANSIONS:
        assert np.abs(p.weights[f"scorer.{s}.w1"].grad).max() > 0
    t = p.weights["scorer.meso.b2"]
    fd = nc.finite_difference_grad(loss, t, 1e-6, [0])[0]
    assert fd != 0 and abs(fd - t.grad[0]) < 1e-6 * max(1.0, abs(fd))


# ------------------------------------------------------------------ no-graph encoder

def test_nograph_one_hot_selects_gene_embedding():
    p = se.init_nograph_encoder(G, DH, D, seed=1)
    w = {k: v.data for k, v in p.weights.items()}
    x = np.zeros((1, G))
    x[0, 4] = 1.0
    z = se.nograph_forward_batch(p, [x])["macro"].data[0]
    np.testing.assert_allclose(z, w["nograph.gene_emb"][4] @ w["nograph.proj.w"] + w["nograph.proj.b"],
                               atol=1e-14)


def test_nograph_equal_cells_equal_single():
    p = se.init_nograph_encoder(G, DH, D, seed=2)
    x = np.random.default_rng(2).normal(size=(1, G))
    one = se.nograph_forward_batch(p, [x])["meso"].data
    three = se.nograph_forward_batch(p, [np.repeat(x, 3, axis=0)])["meso"].data
    np.testing.assert_allclose(three, one, atol=1e-14)


def test_nograph_gene_permutation():
    p = se.init_nograph_encoder(G, DH, D, seed=3)
    x = np.random.default_rng(3).normal(size=(5, G))
    base = se.nograph_forward_batch(p, [x])["micro"].data
    perm = np.random.default_rng(4).permutation(G)
    p.weights["nograph.gene_emb"].data[...] = p.weights["nograph.gene_emb"].data[perm]
    np.testing.assert_allclose(se.nograph_forward_batch(p, [x[:, perm]])["micro"].data, base, atol=1e-13)
