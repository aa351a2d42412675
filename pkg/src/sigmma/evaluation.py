"""Gene-expression linear probing, cross-modal retrieval, ablations, export."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from .datagen import hvg_select, tile_mean_log1p
from .training import SCALES, TrainState, train

log = logging.getLogger(__name__)

RECALL_PERCENTS = (5, 10, 15)


# ------------------------------------------------------------------ metrics

def pearson(pred, target):
    """Pearson correlation of two vectors; (0.0, True) if either is constant."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    pc, tc = pred - pred.mean(), target - target.mean()
    denom = math.sqrt(float(pc @ pc) * float(tc @ tc))
    if denom < 1e-12 * max(len(pred), 1):
        return 0.0, True
    return float(np.clip((pc @ tc) / denom, -1.0, 1.0)), False


def pca_fit(x, n_components):
    """Mean and top principal axes (columns) of x via SVD."""
    mu = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mu, full_matrices=False)
    return mu, vt[:n_components].T


def ridge_solve(x, y, lam):
    """argmin_w ||x w - y||^2 + lam ||w||^2 through the SVD of x (y may be 1-D or 2-D)."""
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = s.max(initial=0.0) * max(x.shape) * np.finfo(float).eps
    shrink = np.where(s > tol, s / (s * s + lam), 0.0)
    uty = u.T @ y
    return vt.T @ (shrink.reshape((-1,) + (1,) * (uty.ndim - 1)) * uty)


@dataclass
class RidgeProbe:
    """PCA to ``n_components`` then ridge with an unpenalised intercept."""

    n_components: int = 256
    lam: float = 1.0
    pca_mean: np.ndarray = None
    pca_axes: np.ndarray = None
    x_mean: np.ndarray = None
    y_mean: np.ndarray = None
    coef: np.ndarray = None

    def fit(self, x, y):
        k = min(self.n_components, x.shape[1], x.shape[0])
        self.pca_mean, self.pca_axes = pca_fit(x, k)
        p = (x - self.pca_mean) @ self.pca_axes
        self.x_mean, self.y_mean = p.mean(axis=0), y.mean(axis=0)
        self.coef = ridge_solve(p - self.x_mean, y - self.y_mean, self.lam)
        return self

    def predict(self, x):
        p = (x - self.pca_mean) @ self.pca_axes
        return (p - self.x_mean) @ self.coef + self.y_mean


@dataclass
class ProbeReport:
    genes: list
    mse: np.ndarray
    pcc: np.ndarray
    pcc_flagged: list
    k: int
    pca_dims: int
    ridge_lambda: float
    aggregate: str = "per_gene"

    @property
    def mse_mean(self):
        return float(np.mean(self.mse))

    @property
    def mse_std(self):
        return float(np.std(self.mse))

    @property
    def pcc_mean(self):
        return float(np.mean(self.pcc))

    @property
    def pcc_std(self):
        return float(np.std(self.pcc))

    def to_dict(self):
        return {"genes": list(self.genes), "mse": self.mse.tolist(), "pcc": self.pcc.tolist(),
                "pcc_flagged": list(self.pcc_flagged), "k": self.k, "pca_dims": self.pca_dims,
                "ridge_lambda": self.ridge_lambda, "aggregate": self.aggregate,
                "mse_mean": self.mse_mean, "mse_std": self.mse_std,
                "pcc_mean": self.pcc_mean, "pcc_std": self.pcc_std}


@dataclass
class RetrievalReport:
    he_to_st: dict
    st_to_he: dict
    n_test: int
    scale: str

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ embeddings

def image_embeddings(model, tiles, batch_size=64):
    """(n, d) un-normalised image embeddings per scale."""
    out = {s: [] for s in SCALES}
    for i in range(0, len(tiles), batch_size):
        z = model.embed_image(tiles[i:i + batch_size])
        for s in SCALES:
            out[s].append(z[s].data)
    return {s: np.concatenate(v) if v else np.zeros((0, model.cfg.d)) for s, v in out.items()}


def st_embeddings(model, tiles, batch_size=64, return_nodes=False):
    """(n, d) cell-side embeddings per scale in infer mode (tiles need >= 1 cell)."""
    out = {s: [] for s in SCALES}
    nodes = []
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i:i + batch_size]
        z, act = model.embed_st(chunk, mode="infer")
        for s in SCALES:
            out[s].append(z[s].data)
        if return_nodes:
            nodes.append((chunk, act))
    emb = {s: np.concatenate(v) if v else np.zeros((0, model.cfg.d)) for s, v in out.items()}
    return (emb, nodes) if return_nodes else emb


def _model(source):
    return source.model if isinstance(source, TrainState) else source


# ------------------------------------------------------------------ task 1

def probe_targets(ds, tiles, genes):
    """Tile-mean log1p expression of ``genes``, standardised with train-tile statistics."""
    train = tile_mean_log1p(ds.tiles_in("train"), ds.n_genes)[:, genes]
    mu, sd = train.mean(axis=0), train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (tile_mean_log1p(tiles, ds.n_genes)[:, genes] - mu) / sd


def evaluate_probe(x_train, y_train, x_test, y_test, genes, pca_dims=256, lam=1.0,
                   per_tile=False):
    probe = RidgeProbe(pca_dims, lam).fit(x_train, y_train)
    pred = probe.predict(x_test)
    mse = ((pred - y_test) ** 2).mean(axis=0)
    if per_tile:
        pairs = [pearson(pred[i], y_test[i]) for i in range(len(pred))]
        flagged = [i for i, (_, f) in enumerate(pairs) if f]
        mse = ((pred - y_test) ** 2).mean(axis=1)
    else:
        pairs = [pearson(pred[:, g], y_test[:, g]) for g in range(y_test.shape[1])]
        flagged = [genes[g] for g, (_, f) in enumerate(pairs) if f]
    pcc = np.array([p for p, _ in pairs])
    return ProbeReport(list(genes), mse, pcc, flagged, len(genes),
                       probe.pca_axes.shape[1], lam, "per_tile" if per_tile else "per_gene")


def linear_probe_gex(source, ds, k=50, pca_dims=256, ridge_lambda=1.0, per_tile=False):
    """Predict top-k HVG expression from frozen macro image embeddings."""
    model = _model(source)
    test = [t for t in ds.tiles_in("test") if t.n_cells]
    if not test:
        raise ValueError("linear probe needs a non-empty test split")
    if k > ds.n_genes:
        warnings.warn(f"only {ds.n_genes} genes available; probing all of them", stacklevel=2)
        k = ds.n_genes
    genes = hvg_select(ds, k)
    train = [t for t in ds.tiles_in("train") if t.n_cells]
    x_train = image_embeddings(model, train)["macro"]
    x_test = image_embeddings(model, test)["macro"]
    return evaluate_probe(x_train, probe_targets(ds, train, genes),
                          x_test, probe_targets(ds, test, genes),
                          genes, min(model.cfg.d, pca_dims), ridge_lambda, per_tile)


# ------------------------------------------------------------------ task 2

def counterpart_ranks(sim):
    """0-based rank of the diagonal entry within each row (ties: lower index first)."""
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    diag = np.diag(sim)[:, None]
    cols = np.arange(n)[None, :]
    rows = np.arange(n)[:, None]
    ahead = (sim > diag) | ((sim == diag) & (cols < rows))
    return ahead.sum(axis=1)


def recall_at_percent(sim, percents=RECALL_PERCENTS):
    """Fraction of rows whose diagonal entry ranks within the top ceil(p*N/100)."""
    n = sim.shape[0]
    ranks = counterpart_ranks(sim)
    return {p: float(np.mean(ranks < math.ceil(p * n / 100 - 1e-9))) for p in percents}


def retrieval_from_embeddings(zi, zs, scale="macro", percents=RECALL_PERCENTS):
    zi = zi / np.linalg.norm(zi, axis=1, keepdims=True)
    zs = zs / np.linalg.norm(zs, axis=1, keepdims=True)
    sim = zi @ zs.T
    return RetrievalReport(recall_at_percent(sim, percents), recall_at_percent(sim.T, percents),
                           len(zi), scale)


def retrieval(source, ds, scale="macro", percents=RECALL_PERCENTS):
    """Bidirectional Recall@p% between image and cell embeddings of test tiles."""
    model = _model(source)
    test = [t for t in ds.tiles_in("test") if t.n_cells]
    if len(test) < 2:
        raise ValueError("retrieval needs at least two test tiles")
    zi = image_embeddings(model, test)[scale]
    zs = st_embeddings(model, test)[scale]
    return retrieval_from_embeddings(zi, zs, scale, percents)


# ------------------------------------------------------------------ ablations

ABLATION_ROWS = (
    ("none", {"no_graph": True, "single_scale": True, "no_sparsification": True}),
    ("+graph", {"no_graph": False, "single_scale": True, "no_sparsification": True}),
    ("+multi-scale", {"no_graph": False, "single_scale": False, "no_sparsification": True}),
    ("+sparsification", {"no_graph": False, "single_scale": False, "no_sparsification": False}),
)


def run_ablation_suite(ds, base_cfg, rows=ABLATION_ROWS, scale="macro"):
    """Train and evaluate each component configuration with a shared seed."""
    table = []
    for name, flags in rows:
        cfg = replace(base_cfg, **flags)
        log.info("ablation %s: training", name)
        state = train(ds, cfg)
        probe = linear_probe_gex(state, ds)
        ret = retrieval(state, ds, scale)
        table.append({
            "variant": name,
            "cell_graph": int(not cfg.no_graph),
            "multi_scale": int(not cfg.single_scale),
            "sparsification": int(not cfg.no_sparsification),
            "mse": probe.mse_mean, "pcc": probe.pcc_mean,
            **{f"he2st_r{p}": ret.he_to_st[p] for p in ret.he_to_st},
            **{f"st2he_r{p}": ret.st_to_he[p] for p in ret.st_to_he},
            "split_hash": ds.split_hash(),
        })
    return table


def write_table_csv(rows, path):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ------------------------------------------------------------------ export

def _fmt(v):
    return repr(float(v))


def export_embeddings(source, ds, path, level="tile", modality="image"):
    """CSV of infer-mode embeddings: ``id,scale,e0..``.

    Tile level writes one row per tile and scale for ``modality`` ("image" or
    "st"); cell level writes the stage-final node embedding of every cell at
    every scale, with id ``tile_id/cell_id``.
    """
    model = _model(source)
    tiles = [t for t in ds.tiles if t.n_cells or (level == "tile" and modality == "image")]
    rows = []
    if level == "tile":
        emb = image_embeddings(model, tiles) if modality == "image" else st_embeddings(model, tiles)
        for i, t in enumerate(tiles):
            for s in SCALES:
                rows.append([t.tile_id, s, *map(_fmt, emb[s][i])])
    elif level == "cell":
        if model.cfg.no_graph:
            raise ValueError("cell-level export needs the graph encoder")
        _, chunks = st_embeddings(model, tiles, return_nodes=True)
        for chunk, act in chunks:
            offset = 0
            for t in chunk:
                for j, cid in enumerate(t.cell_ids):
                    for s in SCALES:
                        rows.append([f"{t.tile_id}/{cid}", s, *map(_fmt, act.h[s].data[offset + j])])
                offset += t.n_cells
    else:
        raise ValueError(f"unknown export level {level!r}")
    width = len(rows[0]) - 2 if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "scale", *(f"e{i}" for i in range(width))])
        w.writerows(rows)
    return len(rows)
