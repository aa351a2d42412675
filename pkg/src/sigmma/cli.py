"""Command-line entry point: ``sigmma <subcommand> [flags]``.

Subcommands: generate, train, eval, retrieve, ablate, export, selfcheck.
Config files are flat ``key = value`` text with ``#`` comments; keys are
GenConfig / TrainConfig field names and flags override file values. Every
run writes the fully resolved config as ``config.txt`` next to its outputs.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs), 2 runtime
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import evaluation as ev
from .datagen import DatasetError, GenConfig, generate_dataset, load_dataset, save_dataset, section_shape_for
from .training import TrainConfig, TrainingDiverged, load_checkpoint, train

log = logging.getLogger("sigmma")

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.sigc"
METRICS_NAME = "metrics.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ config files

def _coerce(text, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.replace(",", " ").split())
    return text.strip()


def read_config(path):
    """Parse a flat ``key = value`` file into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_config(path, sections):
    lines = ["# resolved configuration, written by sigmma"]
    for title, d in sections.items():
        lines.append(f"# {title}")
        for k, v in d.items():
            if isinstance(v, (tuple, list)):
                v = " ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _build(cls, file_values, overrides):
    """Instantiate a config dataclass: defaults < file values < explicit flags."""
    base = cls()
    kw = {}
    for f in fields(cls):
        default = getattr(base, f.name)
        if overrides.get(f.name) is not None:
            kw[f.name] = overrides[f.name]
        elif f.name in file_values:
            try:
                kw[f.name] = _coerce(file_values[f.name], default)
            except ValueError as exc:
                raise UsageError(f"config key {f.name}: {exc}") from None
    return replace(base, **kw)


def _add_fields(parser, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        default = getattr(cls(), f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=f.name, default=None,
                                type=lambda t, d=default: _coerce(t, d), metavar="{true,false}")
        elif isinstance(default, tuple):
            parser.add_argument(flag, dest=f.name, default=None, type=float, nargs=len(default))
        else:
            parser.add_argument(flag, dest=f.name, default=None, type=type(default))


# ------------------------------------------------------------------ output

def _emit(args, report, text):
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(text)


def _probe_text(p):
    lines = [f"Linear probe (top {p.k} HVGs, {p.aggregate} PCC)",
             f"  MSE  {p.mse_mean:.4f} +/- {p.mse_std:.4f}",
             f"  PCC  {p.pcc_mean:.4f} +/- {p.pcc_std:.4f}"]
    if p.pcc_flagged:
        lines.append(f"  {len(p.pcc_flagged)} constant series scored as PCC 0")
    return "\n".join(lines)


def _retrieval_text(r):
    head = f"Cross-modal retrieval ({r.scale} scale, {r.n_test} test tiles)"
    rows = ["  direction  " + "  ".join(f"R@{p}%" for p in r.he_to_st)]
    rows.append("  HE->ST     " + "  ".join(f"{v:.3f}".rjust(len(f"R@{p}%")) for p, v in r.he_to_st.items()))
    rows.append("  ST->HE     " + "  ".join(f"{v:.3f}".rjust(len(f"R@{p}%")) for p, v in r.st_to_he.items()))
    return "\n".join([head, *rows])


# ------------------------------------------------------------------ subcommands

def _load_run(run_dir, data_override=None):
    run_dir = Path(run_dir)
    cfg_file = run_dir / CONFIG_NAME
    ckpt = run_dir / CHECKPOINT_NAME
    if not ckpt.exists():
        raise UsageError(f"{run_dir}: no {CHECKPOINT_NAME}; run `sigmma train` first")
    data = data_override
    if data is None:
        data = read_config(cfg_file).get("data") if cfg_file.exists() else None
    if data is None:
        raise UsageError(f"{run_dir}: cannot find the dataset path; pass --data")
    ds = load_dataset(data)
    return ds, load_checkpoint(ckpt, ds)


def cmd_generate(args, file_values):
    if args.tiles is not None:
        m = args.m if args.m is not None else int(file_values.get("m", GenConfig().m))
        args.H, args.W = section_shape_for(args.tiles, m)
    gcfg = _build(GenConfig, file_values, vars(args))
    seed = args.seed if args.seed is not None else int(file_values.get("seed", 0))
    ds = generate_dataset(gcfg, seed)
    out = Path(args.out)
    save_dataset(ds, out)
    write_config(out / CONFIG_NAME, {"generate": {"seed": seed, **asdict(gcfg)}})
    counts = {s: len(ds.tiles_in(s)) for s in ("train", "val", "test")}
    report = {"out": str(out), "tiles": len(ds.tiles), "split": counts,
              "split_hash": ds.split_hash(), "n_genes": ds.n_genes}
    _emit(args, report, f"wrote {len(ds.tiles)} tiles to {out} "
                        f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def _train_config(args, file_values):
    return _build(TrainConfig, file_values, vars(args))


def cmd_train(args, file_values):
    cfg = _train_config(args, file_values)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / CONFIG_NAME, {"run": {"data": str(Path(args.data).resolve())},
                                     "train": cfg.to_dict()})
    state = None
    ckpt = out / CHECKPOINT_NAME
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, ds)
        if state.model.cfg.hash() != cfg.hash():
            raise UsageError(f"{ckpt}: checkpoint config differs from the requested config")
        log.info("resuming from epoch %d", state.epoch)
    try:
        state = train(ds, cfg, state=state, log_path=out / METRICS_NAME, checkpoint_path=ckpt)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last finite state saved to {ckpt}", file=sys.stderr)
        return 2
    last = state.history[-1] if state.history else {}
    report = {"out": str(out), "epochs": state.epoch, "final": last}
    _emit(args, report, f"trained {state.epoch} epochs; final L_total "
                        f"{last.get('L_total', float('nan')):.4f}; checkpoint {ckpt}")
    return 0


def cmd_eval(args, file_values):
    ds, state = _load_run(args.run, args.data)
    probe = ev.linear_probe_gex(state, ds, k=args.k, ridge_lambda=args.ridge_lambda,
                                per_tile=args.per_tile)
    ret = ev.retrieval(state, ds, args.scale)
    out = Path(args.out) if args.out else Path(args.run)
    flagged = set(probe.pcc_flagged)
    if args.per_tile:
        ids = [t.tile_id for t in ds.tiles_in("test") if t.n_cells]
        rows = [{"tile": tid, "mse": m, "pcc": p, "pcc_flagged": int(i in flagged)}
                for i, (tid, m, p) in enumerate(zip(ids, probe.mse, probe.pcc))]
    else:
        rows = [{"gene": ds.gene_names[g], "mse": m, "pcc": p, "pcc_flagged": int(g in flagged)}
                for g, m, p in zip(probe.genes, probe.mse, probe.pcc)]
    ev.write_table_csv(rows, out / "probe.csv")
    ev.write_table_csv([{"direction": d, **{f"r{p}": v for p, v in rec.items()}}
                        for d, rec in (("he_to_st", ret.he_to_st), ("st_to_he", ret.st_to_he))],
                       out / "retrieval.csv")
    report = {"probe": probe.to_dict(), "retrieval": ret.to_dict()}
    _emit(args, report, _probe_text(probe) + "\n\n" + _retrieval_text(ret))
    return 0


def cmd_retrieve(args, file_values):
    ds, state = _load_run(args.run, args.data)
    ret = ev.retrieval(state, ds, args.scale)
    _emit(args, ret.to_dict(), _retrieval_text(ret))
    return 0


def cmd_ablate(args, file_values):
    cfg = _train_config(args, file_values)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / CONFIG_NAME, {"run": {"data": str(Path(args.data).resolve())},
                                     "train": cfg.to_dict()})
    table = ev.run_ablation_suite(ds, cfg, scale=args.scale)
    ev.write_table_csv(table, out / "ablation.csv")
    text = ["variant            graph  multi  sparse   PCC     HE->ST@10%  ST->HE@10%"]
    for r in table:
        text.append(f"{r['variant']:<18} {r['cell_graph']:>5}  {r['multi_scale']:>5}  "
                    f"{r['sparsification']:>6}  {r['pcc']:.3f}   {r['he2st_r10']:.3f}       {r['st2he_r10']:.3f}")
    _emit(args, table, "\n".join(text))
    return 0


def cmd_export(args, file_values):
    ds, state = _load_run(args.run, args.data)
    n = ev.export_embeddings(state, ds, args.out, level=args.level, modality=args.modality)
    _emit(args, {"out": args.out, "rows": n}, f"wrote {n} rows to {args.out}")
    return 0


def cmd_selfcheck(args, file_values):
    from .selfcheck import run_all

    results = run_all()
    lines = [f"{'PASS' if r['ok'] else 'FAIL'}  {r['check']:<12} {r['detail']}  ({r['seconds']:.1f}s)"
             for r in results]
    _emit(args, results, "\n".join(lines))
    return 0 if all(r["ok"] for r in results) else 2


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--json", action="store_true")
    common.add_argument("--config", default=None, help="flat key = value file")

    p = _Parser(prog="sigmma", description="Multi-scale HE <-> ST contrastive alignment.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--tiles", type=int, default=None, help="tile count; sets H and W")
    _add_fields(g, GenConfig)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.sigc")
    _add_fields(t, TrainConfig, skip=("seed",))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="linear probe and retrieval on a run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--k", type=int, default=50)
    e.add_argument("--ridge-lambda", type=float, default=1.0)
    e.add_argument("--per-tile", action="store_true")
    e.add_argument("--scale", default="macro", choices=("micro", "meso", "macro"))
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", parents=[common], help="bidirectional Recall@p%")
    r.add_argument("--run", required=True)
    r.add_argument("--data", default=None)
    r.add_argument("--scale", default="macro", choices=("micro", "meso", "macro"))
    r.set_defaults(func=cmd_retrieve)

    a = sub.add_parser("ablate", parents=[common], help="train the 4-row component grid")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--scale", default="macro", choices=("micro", "meso", "macro"))
    _add_fields(a, TrainConfig, skip=("seed", "no_graph", "single_scale", "no_sparsification"))
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", parents=[common], help="write embeddings as CSV")
    x.add_argument("--run", required=True)
    x.add_argument("--data", default=None)
    x.add_argument("--out", required=True)
    x.add_argument("--level", default="tile", choices=("tile", "cell"))
    x.add_argument("--modality", default="image", choices=("image", "st"))
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("selfcheck", parents=[common], help="run the invariant checks")
    s.set_defaults(func=cmd_selfcheck)
    return p


def _setup_logging():
    level = os.environ.get("SIGMMA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"SIGMMA_LOG must be one of error, info, debug (got {level!r})")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None):
    parser = build_parser()
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        file_values = read_config(args.config) if args.config else {}
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args, file_values)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DatasetError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
