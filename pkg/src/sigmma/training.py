"""Joint training of both encoders under the multi-scale InfoNCE objective."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import image_encoder as ie
from . import st_encoder as se
from .alignment import learnable_temperature, temperature_from_log, total_loss
from .datagen import ExpressionNormalizer

log = logging.getLogger(__name__)

SCALES = ("micro", "meso", "macro")
CHECKPOINT_MAGIC = b"SIGC"
CHECKPOINT_VERSION = 1
LOG_HEADER = ["epoch", "L_micro", "L_meso", "L_macro", "L_total", "wall_seconds"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    tau_c: float = 0.07
    learn_tau: bool = False
    tau_g_start: float = 0.5
    tau_g_end: float = 0.1
    seed: int = 0
    no_graph: bool = False
    single_scale: bool = False
    no_sparsification: bool = False
    d: int = 64
    d_h: int = 64
    d_score: int = 32
    depth_micro: int = 2
    depth_meso: int = 1
    depth_macro: int = 1
    knn_k: int = 6
    c_max: int = 8                  # 0 = no truncation
    image_backbone: str = "auto"    # auto | toy_conv | passthrough
    r: int = 32

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def tau_g(self, epoch):
        if self.epochs <= 1:
            return self.tau_g_start
        frac = min(epoch / (self.epochs - 1), 1.0)
        return self.tau_g_start + (self.tau_g_end - self.tau_g_start) * frac


# ------------------------------------------------------------------ model

class SigmmaModel:
    """Image encoder + cell encoder + (optional) learnable temperature.

    Preprocessed image inputs and tile graphs are cached per tile id; they
    depend only on geometry and config, never on parameters.
    """

    def __init__(self, cfg, image, st, normalizer, log_tau=None):
        self.cfg = cfg
        self.image = image
        self.st = st
        self.normalizer = normalizer
        self.log_tau = log_tau
        self._img_cache = {}
        self._graph_cache = {}

    @classmethod
    def init(cls, ds, cfg):
        train = ds.tiles_in("train")
        normalizer = ExpressionNormalizer.fit(train)
        backbone = cfg.image_backbone
        if backbone == "auto":
            backbone = "passthrough" if ds.tiles and ds.tiles[0].image is None else "toy_conv"
        fdim = None
        if backbone == "passthrough":
            fdim = next(t.patch_features.shape[1] for t in ds.tiles if t.patch_features is not None)
        image = ie.init_image_encoder(backbone, d=cfg.d, r=cfg.r, feature_dim=fdim,
                                      seed=[cfg.seed, 1])
        if cfg.no_graph:
            st = se.init_nograph_encoder(ds.n_genes, cfg.d_h, cfg.d, seed=[cfg.seed, 2])
        else:
            depths = {"micro": cfg.depth_micro, "meso": cfg.depth_meso, "macro": cfg.depth_macro}
            st = se.init_st_encoder(ds.n_genes, cfg.d_h, cfg.d, cfg.d_score, depths,
                                    seed=[cfg.seed, 2])
        log_tau = learnable_temperature(cfg.tau_c) if cfg.learn_tau else None
        return cls(cfg, image, st, normalizer, log_tau)

    def parameters(self):
        out = {f"image.{k}": v for k, v in self.image.weights.items()}
        out.update({f"st.{k}": v for k, v in self.st.weights.items()})
        if self.log_tau is not None:
            out["log_tau"] = self.log_tau
        return out

    def temperature(self):
        if self.log_tau is None:
            return self.cfg.tau_c
        return temperature_from_log(self.log_tau)

    def tile_graph(self, tile):
        tg = self._graph_cache.get(tile.tile_id)
        if tg is None:
            c_max = self.cfg.c_max or None
            tg = se.build_tile_graph(tile.coords, tile.m, self.cfg.knn_k, c_max)
            self._graph_cache[tile.tile_id] = tg
        return tg

    def _prepared(self, tile):
        p = self._img_cache.get(tile.tile_id)
        if p is None:
            p = ie.prepare_tile(tile, self.image)
            self._img_cache[tile.tile_id] = p
        return p

    def embed_image(self, tiles):
        prep = ie.stack_prepared([self._prepared(t) for t in tiles])
        return ie.encode_batch(prep, self.image)

    def embed_st(self, tiles, mode="train", rng=None, tau_g=0.5):
        feats = [self.normalizer(t.expression) for t in tiles]
        if self.cfg.no_graph:
            return se.nograph_forward_batch(self.st, feats), None
        batch = se.pack_graphs(feats, [self.tile_graph(t) for t in tiles])
        return se.st_forward_batch(self.st, batch, rng, mode, tau_g,
                                   sparsify=not self.cfg.no_sparsification)

    def batch_loss(self, tiles, rng=None, mode="train", tau_g=0.5):
        zi = self.embed_image(tiles)
        zs, _ = self.embed_st(tiles, mode, rng, tau_g)
        _, parts = total_loss({s: (zi[s], zs[s]) for s in SCALES}, self.temperature())
        total = parts["macro"] if self.cfg.single_scale else parts["micro"] + parts["meso"] + parts["macro"]
        return total, parts


# ------------------------------------------------------------------ optimiser

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * p.grad * p.grad
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ------------------------------------------------------------------ state

@dataclass
class TrainState:
    model: SigmmaModel
    optimizer: Adam
    epoch: int = 0                          # number of completed epochs
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, ds, cfg):
        model = SigmmaModel.init(ds, cfg)
        opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        return cls(model, opt)

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.model.parameters().items()}

    def restore(self, snap):
        for k, p in self.model.parameters().items():
            p.data[...] = snap[k]


def epoch_rng(seed, epoch):
    return nc.Rng([int(seed), int(epoch)])


def train_batches(n_train, batch_size, rng):
    order = rng.permutation(n_train)
    batches = [order[i:i + batch_size] for i in range(0, n_train, batch_size)]
    return [b for b in batches if len(b) >= 2]


def train(ds, cfg, state=None, until_epoch=None, log_path=None, checkpoint_path=None):
    """Run epochs ``state.epoch .. until_epoch`` (default ``cfg.epochs``).

    Returns the updated TrainState; ``state.history`` collects one dict per
    epoch with the mean per-scale losses. Raises TrainingDiverged (carrying
    the state restored to the last finite epoch) on a non-finite loss.
    """
    train_tiles = ds.tiles_in("train")
    if not train_tiles:
        raise ValueError("training split is empty")
    empty = [t.tile_id for t in train_tiles if t.n_cells == 0]
    if empty:
        raise ValueError(f"training tiles without cells: {', '.join(empty[:5])}")
    if state is None:
        state = TrainState.fresh(ds, cfg)
    until = cfg.epochs if until_epoch is None else until_epoch
    params = state.model.parameters()

    for epoch in range(state.epoch, until):
        t0 = time.perf_counter()
        good = state.snapshot()
        good_opt = (state.optimizer.t, {k: v.copy() for k, v in state.optimizer.m.items()},
                    {k: v.copy() for k, v in state.optimizer.v.items()})
        rng = epoch_rng(cfg.seed, epoch)
        tau_g = cfg.tau_g(epoch)
        sums = dict.fromkeys(SCALES, 0.0)
        n_batches = 0
        for idx in train_batches(len(train_tiles), cfg.batch_size, rng):
            tiles = [train_tiles[i] for i in idx]
            loss, parts = state.model.batch_loss(tiles, rng, "train", tau_g)
            if not np.isfinite(loss.data):
                state.restore(good)
                state.optimizer.t, state.optimizer.m, state.optimizer.v = good_opt
                if checkpoint_path:
                    save_checkpoint(state, checkpoint_path)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}", state)
            nc.zero_grad(params.values())
            nc.backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            state.optimizer.step()
            for s in SCALES:
                sums[s] += float(parts[s].data)
            n_batches += 1
        row = {"epoch": epoch + 1}
        for s in SCALES:
            row[f"L_{s}"] = sums[s] / max(n_batches, 1)
        row["L_total"] = (row["L_macro"] if cfg.single_scale
                          else row["L_micro"] + row["L_meso"] + row["L_macro"])
        row["wall_seconds"] = time.perf_counter() - t0
        state.history.append(row)
        state.epoch = epoch + 1
        log.info("epoch %d  L_total %.4f  (micro %.4f meso %.4f macro %.4f)", row["epoch"],
                 row["L_total"], row["L_micro"], row["L_meso"], row["L_macro"])
        if log_path:
            write_metrics_log(state.history, log_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


def write_metrics_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_HEADER[1:]])


def read_metrics_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


# ------------------------------------------------------------------ checkpoints

def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def checkpoint_tensors(state):
    model, opt = state.model, state.optimizer
    out = {}
    for k, p in model.parameters().items():
        out[f"param/{k}"] = p.data
        out[f"adam.m/{k}"] = opt.m[k]
        out[f"adam.v/{k}"] = opt.v[k]
    out["adam.t"] = np.array(float(opt.t))
    out["epoch"] = np.array(float(state.epoch))
    out["norm.mean"] = model.normalizer.mean
    out["norm.std"] = model.normalizer.std
    return out


def save_checkpoint(state, path):
    """Binary checkpoint: magic, version, config hash, config JSON, named float64 tensors.

    The metrics history is kept as a JSON blob after the tensors so a resumed
    run can continue its log.
    """
    cfg = state.model.cfg
    meta = {"config": cfg.to_dict(), "backbone": state.model.image.backbone,
            "n_genes": state.model.st.n_genes, "history": state.history}
    tensors = checkpoint_tensors(state)
    digest = cfg.hash().encode()
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(digest)), digest,
              struct.pack("<I", len(meta_raw)), meta_raw,
              struct.pack("<I", len(tensors))]
    chunks += [_pack_tensor(k, v) for k, v in tensors.items()]
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    """Return (config hash, meta dict, {name: array})."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    (n,) = struct.unpack_from("<I", raw, pos)
    digest = raw[pos + 4:pos + 4 + n].decode()
    pos += 4 + n
    (n,) = struct.unpack_from("<I", raw, pos)
    meta = json.loads(raw[pos + 4:pos + 4 + n])
    pos += 4 + n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + ln].decode()
        pos += 4 + ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 4)
        pos += 4 + 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return digest, meta, tensors


def load_checkpoint(path, ds):
    """Rebuild a TrainState from disk; ``ds`` supplies data shapes for encoder init."""
    digest, meta, tensors = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    if cfg.hash() != digest:
        raise ValueError(f"{path}: config hash mismatch")
    if ds.n_genes != meta["n_genes"]:
        raise ValueError(f"{path}: checkpoint expects {meta['n_genes']} genes, dataset has {ds.n_genes}")
    state = TrainState.fresh(ds, cfg)
    state.model.normalizer = ExpressionNormalizer(tensors["norm.mean"], tensors["norm.std"])
    for k, p in state.model.parameters().items():
        p.data[...] = tensors[f"param/{k}"]
        state.optimizer.m[k] = tensors[f"adam.m/{k}"]
        state.optimizer.v[k] = tensors[f"adam.v/{k}"]
    state.optimizer.t = int(tensors["adam.t"].item())
    state.epoch = int(tensors["epoch"].item())
    state.history = list(meta.get("history", []))
    return state
