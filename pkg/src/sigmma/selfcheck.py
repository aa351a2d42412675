"""Quick runtime invariant checks behind ``sigmma selfcheck``.

Each check returns ``(ok, detail)``. They are small versions of the test
suite, meant to catch a broken install or numeric environment in seconds.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import numcore as nc
from . import st_encoder as se
from .alignment import infonce_symmetric
from .cell_graph import block_ids, build_micro_graph
from .datagen import GenConfig, generate_dataset
from .evaluation import recall_at_percent, ridge_solve
from .training import SCALES, SigmmaModel, TrainConfig


def _tiny_dataset(seed=3):
    cfg = GenConfig(H=128, W=128, n_genes=50, cells_min=12, cells_max=24, split=(1.0, 0.0, 0.0))
    return generate_dataset(cfg, seed)


def check_gradients(n_entries=3, seed=0):
    """Central differences vs backward on a 4-tile batch, Gumbel draws replayed.

    h = 1e-6 rather than 1e-5: a conv bias step of 1e-5 can push ReLU inputs
    across zero, and the two one-sided slopes then differ by ~1e-3.
    """
    ds = _tiny_dataset()
    cfg = TrainConfig(seed=seed, d=8, d_h=8, d_score=4, r=16)
    model = SigmmaModel.init(ds, cfg)
    tiles = ds.tiles[:4]
    params = model.parameters()

    def loss_fn():
        return model.batch_loss(tiles, nc.Rng([seed, 99]), "train", 0.5)[0]

    nc.zero_grad(params.values())
    nc.backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = rng.choice(p.data.size, size=min(n_entries, p.data.size), replace=False)
        fd = nc.finite_difference_grad(loss_fn, p, 1e-6, flat.tolist())
        for i, g_fd in fd.items():
            g = p.grad.reshape(-1)[i]
            worst = max(worst, abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-6))
    return worst < 1e-3, f"max relative error {worst:.2e}"


def check_infonce():
    z = np.ones((4, 3))
    got = float(infonce_symmetric(z, z, 0.07).data)
    return abs(got - math.log(4)) < 1e-9, f"uniform batch loss {got:.12f} (ln 4 = {math.log(4):.12f})"


def check_constraints(n_tiles=40, seed=0):
    rng = np.random.default_rng(seed)
    params = se.init_st_encoder(10, 8, 8, 4, seed=seed)
    bad = 0
    for t in range(n_tiles):
        n = int(rng.integers(5, 60))
        coords = rng.uniform(0, 64, size=(n, 2))
        tg = se.build_tile_graph(coords, 64, 6, None)
        _, act = se.st_forward(rng.normal(size=(n, 10)), tg, params, nc.Rng([seed, t]), "train", 0.5)
        prev = set()
        for scale in SCALES:
            edges = act.realized[scale]
            blk = block_ids(coords, scale, 64)
            bad += int(np.sum(blk[edges[:, 0]] != blk[edges[:, 1]])) if len(edges) else 0
            cur = {tuple(e) for e in np.sort(edges, axis=1).tolist()}
            bad += len(prev - cur)
            prev = cur
    return bad == 0, f"{bad} violations over {n_tiles} tiles"


def check_gumbel(n=100_000, s=0.7, tau=0.05, seed=0):
    """Share of near-binary draws vs its closed form.

    g1 - g0 is standard logistic, so p_hat misses {0,1} by more than 1e-3
    exactly when logit(s) + L falls in (-a, a), a = tau * log(999).
    """
    rng = nc.Rng(seed)
    p = se.gumbel_edge_select(nc.tensor(np.full(n, s)), tau, "train", rng).data
    frac = float(np.mean(np.minimum(p, 1.0 - p) < 1e-3))
    a, c = tau * math.log(999.0), math.log(s / (1 - s))
    expected = 1.0 - (1 / (1 + math.exp(-(a - c))) - 1 / (1 + math.exp(-(-a - c))))
    return abs(frac - expected) < 0.005, f"{100 * frac:.2f}% near-binary (closed form {100 * expected:.2f}%)"


def check_oracles(seed=0):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(30, 5)), rng.normal(size=30)
    w = ridge_solve(x, y, 1.0)
    w_ne = np.linalg.solve(x.T @ x + np.eye(5), x.T @ y)
    err = float(np.max(np.abs(w - w_ne)))
    coords = rng.uniform(0, 64, size=(40, 2))
    g = build_micro_graph(coords, 64, 6)
    blk = block_ids(coords, "micro", 64)
    ok_knn = bool(np.all(blk[g.edges["micro"][:, 0]] == blk[g.edges["micro"][:, 1]]))
    return err < 1e-8 and ok_knn, f"ridge max |diff| {err:.1e}; knn intra-block {ok_knn}"


def check_recall(seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(50, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    rec = recall_at_percent(z @ z.T, (10,))
    return rec[10] == 1.0, f"self-retrieval Recall@10% = {rec[10]:.2f}"


CHECKS = (
    ("gradients", check_gradients),
    ("infonce", check_infonce),
    ("constraints", check_constraints),
    ("gumbel", check_gumbel),
    ("oracles", check_oracles),
    ("recall", check_recall),
)


def run_all():
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"check": name, "ok": bool(ok), "detail": detail,
                        "seconds": time.perf_counter() - t0})
    return results
