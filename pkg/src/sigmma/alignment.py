"""Symmetric InfoNCE between image and cell-graph embeddings, per scale."""
from __future__ import annotations

import warnings

import numpy as np

from . import numcore as nc

SCALES = ("micro", "meso", "macro")
TAU_MIN, TAU_MAX = 0.01, 1.0


def similarity_matrix(zi, zs):
    """Cosine similarities: entry (i, j) = <zi_i, zs_j> of row-normalised inputs."""
    zi, zs = nc.as_tensor(zi), nc.as_tensor(zs)
    if zi.ndim != 2 or zs.ndim != 2 or zi.shape[1] != zs.shape[1]:
        raise nc.ShapeError(f"similarity_matrix: incompatible shapes {zi.shape} and {zs.shape}")
    return nc.matmul(nc.l2_normalize(zi, axis=1), nc.transpose(nc.l2_normalize(zs, axis=1)))


def _temperature(tau):
    if isinstance(tau, nc.Tensor):
        if np.any(tau.data <= 0):
            raise ValueError(f"InfoNCE temperature must be positive, got {tau.data}")
        return tau
    if tau <= 0:
        raise ValueError(f"InfoNCE temperature must be positive, got {tau}")
    return nc.tensor(float(tau))


def infonce_symmetric(zi, zs, tau=0.07):
    """0.5 * (image->cell + cell->image) cross-entropy over the batch.

    Rows are L2-normalised here; a row with norm < 1e-12 raises ValueError.
    A batch of one returns 0 with a warning.
    """
    t = _temperature(tau)
    sim = similarity_matrix(zi, zs)
    n = sim.shape[0]
    if n == 1:
        warnings.warn("InfoNCE on a batch of one sample has no negatives; returning 0",
                      stacklevel=2)
        return nc.sum(sim * 0.0)
    logits = sim / t
    diag = np.arange(n)
    i2s = nc.log_softmax(logits, axis=1)[diag, diag]
    s2i = nc.log_softmax(logits, axis=0)[diag, diag]
    return -(nc.mean(i2s) + nc.mean(s2i)) * 0.5


def total_loss(pairs, tau=0.07, single_scale=False):
    """Unweighted sum of per-scale losses; returns (total, {scale: loss}).

    ``pairs`` maps scale -> (z_image, z_cell). With ``single_scale`` only the
    macro term enters (and is the only one required).
    """
    scales = ("macro",) if single_scale else SCALES
    parts = {}
    for scale in scales:
        if scale not in pairs:
            raise KeyError(f"total_loss: missing embeddings for scale {scale!r}")
        zi, zs = pairs[scale]
        parts[scale] = infonce_symmetric(zi, zs, tau)
    total = parts[scales[0]]
    for scale in scales[1:]:
        total = total + parts[scale]
    return total, parts


def learnable_temperature(init=0.07):
    """Log-parameterised temperature; use :func:`temperature_from_log` to read it."""
    return nc.tensor(np.log(init), requires_grad=True)


def temperature_from_log(log_tau):
    return nc.clip(nc.exp(log_tau), TAU_MIN, TAU_MAX)
