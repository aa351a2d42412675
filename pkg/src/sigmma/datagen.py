"""Synthetic paired HE/ST tiles and the on-disk dataset format.

A section of ``H x W`` pixels is cut into ``m x m`` tiles, and every tile into
a 4 x 4 grid of micro regions. Each micro region carries a latent vector;
latents are spatially smoothed so neighbouring regions resemble each other.
The image side (pixels or precomputed patch features) and the cell
expressions are different noisy maps of the same latents, so the pairing is
learnable from either side.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MICRO_GRID = 4
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    cell_id: str
    x: float
    y: float
    expression: np.ndarray


@dataclass(eq=False)
class TilePair:
    """One m x m tile: image side plus the cell table of the ST side.

    ``coords`` holds (x, y) pixel positions inside the tile, ``expression`` is
    (n_cells, G). Exactly one of ``image`` (m, m, 3) and ``patch_features``
    (16, dim) is normally set.
    """

    tile_id: str
    m: int
    cell_ids: list
    coords: np.ndarray
    expression: np.ndarray
    image: np.ndarray | None = None
    patch_features: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.expression = np.asarray(self.expression, dtype=np.float64)
        if self.expression.ndim == 1:
            self.expression = self.expression.reshape(len(self.cell_ids), -1)

    @property
    def n_cells(self):
        return len(self.cell_ids)

    @property
    def cells(self):
        return [Cell(c, float(x), float(y), e)
                for c, (x, y), e in zip(self.cell_ids, self.coords, self.expression)]

    def __eq__(self, other):
        if not isinstance(other, TilePair):
            return NotImplemented
        return (self.tile_id == other.tile_id and self.m == other.m
                and list(self.cell_ids) == list(other.cell_ids)
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.expression, other.expression)
                and _opt_equal(self.image, other.image)
                and _opt_equal(self.patch_features, other.patch_features))


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return a.dtype == b.dtype and np.array_equal(a, b, equal_nan=True)


@dataclass(eq=False)
class Dataset:
    tiles: list
    gene_names: list
    split: dict
    H: int
    W: int
    m: int

    @property
    def n_genes(self):
        return len(self.gene_names)

    def tiles_in(self, split):
        return [t for t in self.tiles if self.split[t.tile_id] == split]

    def split_hash(self):
        payload = json.dumps(sorted(self.split.items())).encode()
        return hashlib.sha256(payload).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return ((self.H, self.W, self.m) == (other.H, other.W, other.m)
                and list(self.gene_names) == list(other.gene_names)
                and self.split == other.split
                and len(self.tiles) == len(other.tiles)
                and all(a == b for a, b in zip(self.tiles, other.tiles)))


@dataclass
class GenConfig:
    H: int = 512
    W: int = 512
    m: int = 64
    n_genes: int = 60
    cells_min: int = 40
    cells_max: int = 120
    d_lat: int = 8
    noise: float = 0.1
    image: str = "pixels"            # "pixels" or "features"
    feature_dim: int = 32
    smoothing: float = 0.6           # share of latent variance that is spatially smoothed
    stain: float = 0.05              # per-tile colour nuisance unrelated to expression
    density_gain: float = 0.7
    split: tuple = field(default=(0.7, 0.1, 0.2))


def section_shape_for(n_tiles, m):
    """Pick (H, W) so that exactly ``n_tiles`` tiles fit, as square as possible."""
    rows = int(np.floor(np.sqrt(n_tiles)))
    while n_tiles % rows:
        rows -= 1
    return rows * m, (n_tiles // rows) * m


def assign_split(tile_id, seed, ratios=(0.7, 0.1, 0.2)):
    """Deterministic split label from (tile_id, seed, ratios) alone."""
    digest = hashlib.sha256(f"{seed}:{tile_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0**64
    total = float(np.sum(ratios))
    edges = np.cumsum(ratios) / total
    for name, edge in zip(SPLITS, edges):
        if u < edge:
            return name
    return SPLITS[-1]


@dataclass
class GenerativeMaps:
    """Parameters of the planted latent -> modality maps (shared by all tiles)."""

    gene_base: np.ndarray          # (G,)
    gene_loadings: np.ndarray      # (G, d_lat)
    gene_nonlin: np.ndarray        # (G,)
    color_w: np.ndarray            # (3, d_lat)
    color_b: np.ndarray            # (3,)
    texture_w: np.ndarray          # (3, d_lat)
    texture2_w: np.ndarray         # (3, d_lat)
    feature_w: np.ndarray          # (F, d_lat)

    @classmethod
    def draw(cls, cfg, rng):
        G, d = cfg.n_genes, cfg.d_lat
        loadings = rng.normal(0.0, 0.6, (G, d))
        housekeeping = rng.uniform(size=G) < 0.15
        loadings[housekeeping] = 0.0
        return cls(
            gene_base=rng.uniform(0.0, 1.5, G),
            gene_loadings=loadings,
            gene_nonlin=np.where(housekeeping, 0.0, rng.normal(0.0, 0.5, G)),
            color_w=rng.normal(0.0, 0.3, (3, d)),
            color_b=rng.normal(0.0, 0.3, 3),
            texture_w=rng.normal(0.0, 0.3, (3, d)),
            texture2_w=rng.normal(0.0, 0.3, (3, d)),
            feature_w=rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.feature_dim, d)),
        )


def expression_map(latent, size_factor, maps, noise_eps=None):
    """Noise-free (or noisy) expression of cells given their region latents.

    latent: (n, d_lat), size_factor: (n,), noise_eps: (n, G) multiplicative
    log-noise already scaled by the noise level.
    """
    latent = np.atleast_2d(latent)
    lograte = (maps.gene_base + latent @ maps.gene_loadings.T
               + np.tanh(latent[:, :1] * latent[:, 1:2]) * maps.gene_nonlin)
    if noise_eps is not None:
        lograte = lograte + noise_eps
    return np.asarray(size_factor).reshape(-1, 1) * np.exp(lograte)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _draw_latents(cfg, rng, rows, cols):
    shape = (rows * MICRO_GRID, cols * MICRO_GRID, cfg.d_lat)
    raw = rng.normal(size=shape)
    smooth = uniform_filter(raw, size=(3, 3, 1), mode="reflect")
    smooth = (smooth - smooth.mean(axis=(0, 1))) / smooth.std(axis=(0, 1))
    rho = cfg.smoothing
    return np.sqrt(1.0 - rho) * raw + np.sqrt(rho) * smooth


def _render_tile(tile_lat, coords, cfg, maps, rng):
    m = cfg.m
    ps = m // MICRO_GRID
    # weights are small enough that the sigmoids stay close to linear in z
    color = 0.1 + 0.8 * _sigmoid(tile_lat @ maps.color_w.T + maps.color_b)  # (4, 4, 3)
    amp_h = 0.25 * _sigmoid(tile_lat @ maps.texture_w.T)                    # (4, 4, 3)
    amp_v = 0.25 * _sigmoid(tile_lat @ maps.texture2_w.T)                   # (4, 4, 3)

    yy, xx = np.mgrid[0:m, 0:m].astype(np.float64)
    ry, rx = (yy // ps).astype(int), (xx // ps).astype(int)
    stripes_h = np.sin(2.0 * np.pi * yy / (m / 8.0))[..., None]
    stripes_v = np.sin(2.0 * np.pi * xx / (m / 6.0))[..., None]
    img = color[ry, rx] + amp_h[ry, rx] * stripes_h + amp_v[ry, rx] * stripes_v

    nucleus = np.array([0.25, 0.10, 0.35])
    for x, y in coords:
        cx, cy = int(x), int(y)
        ys, xs = slice(max(cy - 1, 0), cy + 2), slice(max(cx - 1, 0), cx + 2)
        img[ys, xs] = 0.6 * img[ys, xs] + 0.4 * nucleus

    gamma = np.exp(rng.normal(0.0, cfg.stain / 2.0))
    beta = rng.normal(0.0, cfg.stain, 3)
    img = gamma * (img - 0.5) + 0.5 + beta
    img = img + 0.2 * cfg.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _tile_features(tile_lat, cfg, maps, rng):
    lat = tile_lat.reshape(MICRO_GRID * MICRO_GRID, -1)
    feats = np.tanh(lat @ maps.feature_w.T + 0.5 * np.tanh(lat[:, :1] * lat[:, 1:2]))
    feats = feats + rng.normal(0.0, cfg.stain, cfg.feature_dim)
    feats = feats + cfg.noise * rng.normal(size=feats.shape)
    return feats.astype(np.float32)


@dataclass
class GroundTruth:
    """Planted quantities behind a generated dataset, for verification."""

    maps: GenerativeMaps
    latents: np.ndarray                             # (4*rows, 4*cols, d_lat)
    cell_region: dict = field(default_factory=dict)  # tile_id -> (n, 2) of (by, bx)
    size_factor: dict = field(default_factory=dict)  # tile_id -> (n,)

    def tile_latents(self, tile_id):
        r, c = (int(v) for v in tile_id[1:].split("_"))
        return self.latents[r * MICRO_GRID:(r + 1) * MICRO_GRID,
                            c * MICRO_GRID:(c + 1) * MICRO_GRID]


def generate_dataset(cfg, seed):
    """Generate a synthetic dataset with planted HE <-> ST correspondence."""
    return generate_with_truth(cfg, seed)[0]


def generate_with_truth(cfg, seed):
    if cfg.m % MICRO_GRID:
        raise DatasetError(f"tile side m={cfg.m} is not divisible by {MICRO_GRID}")
    if cfg.image not in ("pixels", "features"):
        raise DatasetError(f"unknown image mode {cfg.image!r}")
    if cfg.n_genes < 50:
        warnings.warn(f"only {cfg.n_genes} genes; gene-expression probing expects 50 HVGs",
                      stacklevel=2)
    if not 1 <= cfg.cells_min <= cfg.cells_max:
        raise DatasetError("need 1 <= cells_min <= cells_max")

    rng = np.random.default_rng(seed)
    maps = GenerativeMaps.draw(cfg, rng)
    rows, cols = cfg.H // cfg.m, cfg.W // cfg.m
    latents = _draw_latents(cfg, rng, rows, cols) if rows * cols else None
    ps = cfg.m / MICRO_GRID
    gene_names = [f"gene_{g:03d}" for g in range(cfg.n_genes)]

    truth = GroundTruth(maps=maps, latents=latents)
    tiles, split = [], {}
    for r in range(rows):
        for c in range(cols):
            tile_id = f"t{r:03d}_{c:03d}"
            tile_lat = latents[r * MICRO_GRID:(r + 1) * MICRO_GRID,
                               c * MICRO_GRID:(c + 1) * MICRO_GRID]
            n = int(rng.integers(cfg.cells_min, cfg.cells_max + 1))
            weight = np.exp(cfg.density_gain * tile_lat[..., 0]).reshape(-1)
            region = rng.choice(weight.size, size=n, p=weight / weight.sum())
            by, bx = np.divmod(region, MICRO_GRID)
            offs = rng.uniform(0.0, ps, (n, 2))
            coords = np.stack([bx * ps + offs[:, 0], by * ps + offs[:, 1]], axis=1)
            coords = np.minimum(coords, np.nextafter(cfg.m, 0))
            size = rng.lognormal(0.0, 0.3, n)
            eps = cfg.noise * rng.normal(size=(n, cfg.n_genes))
            expr = expression_map(tile_lat[by, bx], size, maps, eps)

            tile = TilePair(tile_id=tile_id, m=cfg.m,
                            cell_ids=[f"c{i:04d}" for i in range(n)],
                            coords=coords, expression=expr)
            if cfg.image == "pixels":
                tile.image = _render_tile(tile_lat, coords, cfg, maps, rng)
            else:
                tile.patch_features = _tile_features(tile_lat, cfg, maps, rng)
            tiles.append(tile)
            split[tile_id] = assign_split(tile_id, seed, cfg.split)
            truth.cell_region[tile_id] = np.stack([by, bx], axis=1)
            truth.size_factor[tile_id] = size

    ds = Dataset(tiles=tiles, gene_names=gene_names, split=split,
                 H=cfg.H, W=cfg.W, m=cfg.m)
    return ds, truth


# ----------------------------------------------------------------- disk format

def _write_array(path, magic, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    dims = arr.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(arr.tobytes())


def _read_array(path, magic, ndim, tile_id):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise DatasetError(f"tile {tile_id}: {Path(path).name} has bad magic {raw[:4]!r}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 4)
    body = raw[4 + 4 * ndim:]
    if len(body) != 4 * int(np.prod(dims)):
        raise DatasetError(f"tile {tile_id}: {Path(path).name} truncated")
    return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)


def save_dataset(ds, path):
    path = Path(path)
    (path / "tiles").mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "m": ds.m,
        "H": ds.H,
        "W": ds.W,
        "gene_names": list(ds.gene_names),
        "tiles": [{"tile_id": t.tile_id, "split": ds.split[t.tile_id]} for t in ds.tiles],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    for t in ds.tiles:
        tdir = path / "tiles" / t.tile_id
        tdir.mkdir(exist_ok=True)
        with open(tdir / "cells.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell_id", "x", "y", *ds.gene_names])
            for cid, (x, y), e in zip(t.cell_ids, t.coords, t.expression):
                w.writerow([cid, repr(float(x)), repr(float(y)), *(repr(float(v)) for v in e)])
        if t.image is not None:
            _write_array(tdir / "image.bin", b"SIGI", t.image)
        if t.patch_features is not None:
            _write_array(tdir / "patch_features.bin", b"SIGF", t.patch_features)


def load_dataset(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest.json in {path}")
    manifest = json.loads(mpath.read_text())
    m = int(manifest["m"])
    genes = list(manifest["gene_names"])
    tiles, split = [], {}
    for entry in manifest["tiles"]:
        tid = entry["tile_id"]
        if entry["split"] not in SPLITS:
            raise DatasetError(f"tile {tid}: unknown split {entry['split']!r}")
        tdir = path / "tiles" / tid
        cell_ids, coords, expr = [], [], []
        with open(tdir / "cells.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if len(header) - 3 != len(genes):
                raise DatasetError(
                    f"tile {tid}: cells.csv has {len(header) - 3} expression columns, "
                    f"manifest lists {len(genes)} genes")
            for row in reader:
                if len(row) != len(header):
                    raise DatasetError(f"tile {tid}: ragged row for cell {row[0]}")
                cell_ids.append(row[0])
                coords.append((float(row[1]), float(row[2])))
                expr.append([float(v) for v in row[3:]])
        coords = np.array(coords, dtype=np.float64).reshape(-1, 2)
        bad = (coords < 0) | (coords >= m)
        if bad.any():
            i = int(np.argmax(bad.any(axis=1)))
            raise DatasetError(f"tile {tid}: cell {cell_ids[i]} at {tuple(coords[i])} "
                               f"outside the {m}x{m} tile")
        tile = TilePair(tid, m, cell_ids, coords,
                        np.array(expr, dtype=np.float64).reshape(len(cell_ids), len(genes)))
        if (tdir / "image.bin").exists():
            tile.image = _read_array(tdir / "image.bin", b"SIGI", 3, tid)
        if (tdir / "patch_features.bin").exists():
            tile.patch_features = _read_array(tdir / "patch_features.bin", b"SIGF", 2, tid)
            if tile.patch_features.shape[0] != MICRO_GRID * MICRO_GRID:
                raise DatasetError(f"tile {tid}: patch_features must hold 16 patches")
        tiles.append(tile)
        split[tid] = entry["split"]
    return Dataset(tiles=tiles, gene_names=genes, split=split,
                   H=int(manifest["H"]), W=int(manifest["W"]), m=m)


# ----------------------------------------------------------------- expression

def tile_mean_log1p(tiles, n_genes):
    """(n_tiles, G) tile-aggregated log1p expression; empty tiles give zeros."""
    out = np.zeros((len(tiles), n_genes))
    for i, t in enumerate(tiles):
        if t.n_cells:
            out[i] = np.log1p(t.expression).mean(axis=0)
    return out


def hvg_select(ds, k=50):
    """Indices of the k genes with the largest variance of tile-mean log1p
    expression over the training split. Ties go to the lower index."""
    train = [t for t in ds.tiles_in("train") if t.n_cells]
    if not train:
        raise DatasetError("hvg_select: training split is empty")
    if k > ds.n_genes:
        raise DatasetError(f"hvg_select: k={k} exceeds the {ds.n_genes} available genes")
    var = tile_mean_log1p(train, ds.n_genes).var(axis=0)
    order = np.lexsort((np.arange(var.size), -var))
    return [int(i) for i in order[:k]]


@dataclass
class ExpressionNormalizer:
    """log1p followed by per-gene standardisation with training statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, tiles):
        mats = [np.log1p(t.expression) for t in tiles if t.n_cells]
        if not mats:
            raise DatasetError("cannot fit expression normaliser on zero cells")
        allc = np.concatenate(mats, axis=0)
        std = allc.std(axis=0)
        return cls(mean=allc.mean(axis=0), std=np.where(std > 1e-12, std, 1.0))

    def __call__(self, expression):
        return (np.log1p(expression) - self.mean) / self.std
