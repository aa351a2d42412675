"""Multi-crop image branch.

A tile is cut into 4x4 (micro), 2x2 (meso) and 1x1 (macro) grids; every patch
is resized to ``r x r`` and sent through one shared backbone, and the patch
vectors of each grid are mean-pooled into that scale's tile embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc

SCALES = ("micro", "meso", "macro")
GRID = {"micro": 4, "meso": 2, "macro": 1}


@dataclass
class PatchGrid:
    """Patches of one tile at one scale, row-major over the grid.

    ``kind`` is "pixels" (each patch an (h, w, 3) block) or "features" (each
    patch a vector composed from the stored micro features; ``None`` marks an
    empty patch).
    """

    scale: str
    patches: list
    grid: tuple
    kind: str = "pixels"


def partition_tile(image, scale):
    image = np.asarray(image)
    m = image.shape[0]
    if image.shape[0] != image.shape[1] or m % 4:
        raise ValueError(f"tile must be square with side divisible by 4, got {image.shape[:2]}")
    g = GRID[scale]
    side = m // g
    patches = [image[i * side:(i + 1) * side, j * side:(j + 1) * side]
               for i in range(g) for j in range(g)]
    return PatchGrid(scale, patches, (g, g), "pixels")


def feature_grid(patch_features, scale):
    """Compose stored micro-patch features into the grid of ``scale``.

    Rows that are entirely NaN count as empty patches and are left out of the
    composition.
    """
    if patch_features is None:
        raise ValueError(f"passthrough backbone needs micro patch features to build {scale} patches")
    feats = np.asarray(patch_features, dtype=np.float64).reshape(4, 4, -1)
    g = GRID[scale]
    k = 4 // g
    patches = []
    for i in range(g):
        for j in range(g):
            block = feats[i * k:(i + 1) * k, j * k:(j + 1) * k].reshape(k * k, -1)
            block = block[~np.all(np.isnan(block), axis=1)]
            patches.append(block.mean(axis=0) if len(block) else None)
    return PatchGrid(scale, patches, (g, g), "features")


def _interp_matrix(n_in, n_out):
    # align-corners sampling: output ends map onto input ends
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1.0 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def bilinear_resize(img, size):
    """Bilinear resize of an (h, w[, c]) array to (size, size[, c]); corners are kept."""
    img = np.asarray(img, dtype=np.float64)
    ry = _interp_matrix(img.shape[0], size)
    rx = _interp_matrix(img.shape[1], size)
    return np.einsum("ih,hw...,jw->ij...", ry, img, rx)


@dataclass
class ImageEncoderParams:
    backbone: str
    r: int
    d: int
    weights: dict

    def parameters(self):
        return dict(self.weights)


def init_image_encoder(backbone="toy_conv", d=64, r=32, feature_dim=None, seed=0,
                       channels=(16, 32)):
    rng = np.random.default_rng(seed)
    w = {}
    if backbone == "toy_conv":
        c1, c2 = channels
        w["conv1.w"] = rng.normal(0, np.sqrt(2.0 / (16 * 3)), (4, 4, 3, c1))
        w["conv1.b"] = np.zeros(c1)
        w["conv2.w"] = rng.normal(0, np.sqrt(2.0 / (9 * c1)), (3, 3, c1, c2))
        w["conv2.b"] = np.zeros(c2)
        w["head.w"] = rng.normal(0, 1.0 / np.sqrt(c2), (c2, d))
        w["head.b"] = np.zeros(d)
        if _conv_out(_conv_out(r, 4), 3) < 1:
            raise ValueError(f"unified size r={r} too small for the toy backbone")
    elif backbone == "passthrough":
        if not feature_dim:
            raise ValueError("passthrough backbone needs feature_dim")
        w["head.w"] = rng.normal(0, 1.0 / np.sqrt(feature_dim), (feature_dim, d))
        w["head.b"] = np.zeros(d)
    else:
        raise ValueError(f"unknown image backbone {backbone!r}")
    weights = {k: nc.tensor(v, requires_grad=True) for k, v in w.items()}
    return ImageEncoderParams(backbone, r, d, weights)


def _conv_out(n, k, s=2):
    return (n - k) // s + 1


def backbone_forward(x, params):
    """Map a batch of patches to d-vectors.

    toy_conv: x is (B, r, r, 3) pixels in [0, 1]. passthrough: x is (B, F).
    """
    w = params.weights
    if params.backbone == "passthrough":
        return nc.matmul(nc.as_tensor(x), w["head.w"]) + w["head.b"]
    x = nc.as_tensor(np.asarray(x, dtype=np.float64) - 0.5)
    h = nc.relu(nc.conv2d(x, w["conv1.w"], w["conv1.b"], stride=2))
    h = nc.relu(nc.conv2d(h, w["conv2.w"], w["conv2.b"], stride=2))
    B, oh, ow, c = h.shape
    h = nc.mean(nc.reshape(h, (B, oh * ow, c)), axis=1)
    return nc.matmul(h, w["head.w"]) + w["head.b"]


def encode_patches(pg, params):
    """Backbone vectors for the patches of one grid; empty patches come back as None."""
    if params.backbone == "passthrough":
        if pg.kind != "features":
            raise ValueError("passthrough backbone requires stored micro patch features")
        keep = [i for i, p in enumerate(pg.patches) if p is not None]
        out = [None] * len(pg.patches)
        if keep:
            vecs = backbone_forward(np.stack([pg.patches[i] for i in keep]), params)
            for row, i in enumerate(keep):
                out[i] = vecs[row]
        return out
    if pg.kind != "pixels":
        raise ValueError("toy_conv backbone requires pixel patches")
    batch = np.stack([bilinear_resize(p, params.r) for p in pg.patches])
    vecs = backbone_forward(batch, params)
    return [vecs[i] for i in range(len(pg.patches))]


def pool_image_scale(vectors):
    """Mean of the non-empty patch vectors."""
    present = [v for v in vectors if v is not None]
    if not present:
        raise ValueError("pool_image_scale: every patch is empty")
    acc = present[0]
    for v in present[1:]:
        acc = acc + v
    return acc * (1.0 / len(present))


def encode_tile(tile, params):
    """Un-normalised z_micro, z_meso, z_macro (as tensors) for one tile."""
    out = {}
    for scale in SCALES:
        if params.backbone == "passthrough":
            pg = feature_grid(tile.patch_features, scale)
        else:
            if tile.image is None:
                raise ValueError(f"tile {tile.tile_id} has no pixel image")
            pg = partition_tile(tile.image, scale)
        out[scale] = pool_image_scale(encode_patches(pg, params))
    return out


# ------------------------------------------------------------------ batching

@dataclass
class PreparedImages:
    """Backbone-ready inputs for a list of tiles, all scales stacked.

    ``inputs`` rows are grouped tile-major, then scale, then patch.
    ``segment`` maps each row to ``tile * 3 + scale_index``; ``valid`` marks
    non-empty patches.
    """

    inputs: np.ndarray
    segment: np.ndarray
    valid: np.ndarray
    n_tiles: int


def prepare_tile(tile, params):
    rows, seg, valid = [], [], []
    for si, scale in enumerate(SCALES):
        if params.backbone == "passthrough":
            pg = feature_grid(tile.patch_features, scale)
            for p in pg.patches:
                rows.append(np.zeros(params.weights["head.w"].shape[0]) if p is None else p)
                valid.append(p is not None)
                seg.append(si)
        else:
            if tile.image is None:
                raise ValueError(f"tile {tile.tile_id} has no pixel image")
            for p in partition_tile(tile.image, scale).patches:
                rows.append(bilinear_resize(p, params.r))
                valid.append(True)
                seg.append(si)
    return np.stack(rows), np.array(seg), np.array(valid)


def stack_prepared(prepared):
    """Combine per-tile ``prepare_tile`` outputs into one PreparedImages."""
    inputs = np.concatenate([p[0] for p in prepared])
    segment = np.concatenate([p[1] + 3 * i for i, p in enumerate(prepared)])
    valid = np.concatenate([p[2] for p in prepared])
    return PreparedImages(inputs, segment, valid, len(prepared))


def encode_batch(prep, params):
    """Per-scale (n_tiles, d) tensors of un-normalised image embeddings."""
    vecs = backbone_forward(prep.inputs, params)
    mask = prep.valid.astype(np.float64)
    counts = np.zeros(3 * prep.n_tiles)
    np.add.at(counts, prep.segment, mask)
    if np.any(counts == 0):
        raise ValueError("pool_image_scale: every patch is empty")
    sums = nc.segment_sum(vecs * mask[:, None], prep.segment, 3 * prep.n_tiles)
    pooled = sums * (1.0 / counts)[:, None]
    return {scale: nc.take_rows(pooled, np.arange(prep.n_tiles) * 3 + si)
            for si, scale in enumerate(SCALES)}
