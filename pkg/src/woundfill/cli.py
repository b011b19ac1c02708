"""Command-line entry point: ``woundfill <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import mesh as M
from .dataset import CorpusConfig, build_corpus, load_corpus, save_corpus
from .decoder import MorphableBasis
from .encoder import (
    EncoderConfig,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
)
from .experiments import (
    METHODS,
    ExperimentConfig,
    arrays,
    make_basis,
    median_table,
    report_csv,
    run_seed,
)
from .swav import AugmentConfig, SwavConfig, init_prototypes
from .training import (
    TrainConfig,
    TrainingDiverged,
    finetune,
    load_region_weights,
    mean_distance,
    predict_vertices,
    pretrain_ssl,
    uniform_weights,
    write_curve_csv,
)

log = logging.getLogger("woundfill")

SUBCOMMANDS = ("gen-data", "pretrain", "finetune", "eval", "repair", "extract", "export", "report")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- configuration ----------------------------------------------------------

INT_KEYS = {
    "seed", "epochs", "batch_size", "n_identities", "lights_per_sample", "resolution",
    "n_vertices", "latent_dim", "basis_seed", "pool_identities", "pool_epochs",
    "sinkhorn_iters", "n_prototypes", "jobs",
}
FLOAT_KEYS = {
    "learning_rate", "data_fraction", "wound_depth", "amplitude", "decay", "temperature",
    "epsilon", "threshold",
}
STR_KEYS = {"seeds", "region_weights"}


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` comments and an optional section header are ignored."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(text)
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            key = key.replace("-", "_")
            raw = raw.strip().strip('"')
            if key in INT_KEYS:
                out[key] = int(raw)
            elif key in FLOAT_KEYS:
                out[key] = float(raw)
            elif key in STR_KEYS:
                out[key] = raw
            else:
                raise DataError(f"{path}: unknown config key {key!r}")
    return out


def write_config(cfg: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in sorted(cfg.items()) if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")


def merged_config(args) -> dict:
    cfg = read_config(args.config) if args.config else {}
    flags = {
        "seed": args.seed,
        "data_fraction": args.data_fraction,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "jobs": args.jobs,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    cfg.setdefault("seed", 0)
    return cfg


def _pick(cls, cfg: dict, **extra):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names}, **extra)


def corpus_config(cfg) -> CorpusConfig:
    return _pick(CorpusConfig, cfg)


def train_config(cfg, mode) -> TrainConfig:
    return _pick(TrainConfig, cfg, mode=mode)


def experiment_config(cfg) -> ExperimentConfig:
    enc = EncoderConfig(input_size=cfg.get("resolution", 64), latent_dim=cfg.get("latent_dim", 16))
    return _pick(
        ExperimentConfig,
        cfg,
        corpus=corpus_config(cfg),
        encoder=enc,
        train=train_config(cfg, "finetune"),
        swav=_pick(SwavConfig, cfg),
    )


# --- run manifest -----------------------------------------------------------


def git_hash(path) -> str:
    """Content hash in git's blob format."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    out[str(f)] = git_hash(f)
        elif p.exists():
            out[str(p)] = git_hash(p)
    return out


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs, outputs, started: float):
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": hash_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, out_dir / "run_manifest.json")


# --- subcommands ------------------------------------------------------------


def _basis_for(data_dir: Path) -> MorphableBasis:
    return MorphableBasis.load(data_dir / "basis.mbas")


def cmd_gen_data(args, cfg, out):
    basis = make_basis(experiment_config(cfg))
    corpus = build_corpus(basis, seed=cfg["seed"], config=corpus_config(cfg), jobs=cfg.get("jobs", 1))
    basis.save(out / "basis.mbas")
    save_corpus(corpus, out)
    counts = {p: sum(1 for v in corpus.split.values() if v == p) for p in ("train", "validation", "test")}
    print(
        f"identities {len(corpus.samples)} images {sum(len(s.renders) for s in corpus.samples)} "
        f"train {counts['train']} validation {counts['validation']} test {counts['test']}"
    )
    return [], [out / "basis.mbas", out / "manifest.json"]


def _load_data(args):
    if not args.data:
        raise UsageError("--data DIR is required")
    data = Path(args.data)
    basis = _basis_for(data)
    return data, basis, load_corpus(data, basis)


def _start_encoder(args, cfg, basis, resolution):
    if args.init:
        enc, protos = load_checkpoint(args.init)
        if enc.config.latent_dim != basis.latent_dim:
            raise DataError("checkpoint latent size does not match the basis")
        return enc, protos
    ec = EncoderConfig(input_size=resolution, latent_dim=basis.latent_dim)
    return init_encoder(ec, cfg["seed"]), None


def cmd_pretrain(args, cfg, out):
    data, basis, corpus = _load_data(args)
    enc, protos = _start_encoder(args, cfg, basis, corpus.config.resolution)
    swav = _pick(SwavConfig, cfg)
    if protos is None or protos.shape[1] != swav.n_prototypes:
        protos = init_prototypes(enc.config.proj_dim, swav.n_prototypes, cfg["seed"])
    tc = train_config(cfg, "pretrain")
    train_imgs, _ = arrays(corpus, "train")
    enc, protos, curve = pretrain_ssl(train_imgs, enc, protos, tc, swav, AugmentConfig())
    save_checkpoint(out / "encoder.encp", enc, protos)
    write_curve_csv(out / "ssl_loss.csv", curve)
    print(f"final_ssl_loss {curve[-1]:.6f}")
    return [data, args.init] if args.init else [data], [out / "encoder.encp", out / "ssl_loss.csv"]


def cmd_finetune(args, cfg, out):
    data, basis, corpus = _load_data(args)
    enc, protos = _start_encoder(args, cfg, basis, corpus.config.resolution)
    weights = (
        load_region_weights(cfg["region_weights"], basis.n_vertices)
        if cfg.get("region_weights")
        else uniform_weights(basis.n_vertices)
    )
    tc = train_config(cfg, "finetune")
    enc, curves = finetune(
        arrays(corpus, "train"), enc, basis, weights, tc, val=arrays(corpus, "validation")
    )
    save_checkpoint(out / "encoder.encp", enc, protos)
    curves.to_csv(out / "loss.csv")
    test = arrays(corpus, "test")
    print(f"final_train_loss {curves.train[-1]:.6f}")
    print(f"test_mean_distance {mean_distance(enc, basis, *test):.6f}")
    inputs = [data] + ([args.init] if args.init else [])
    return inputs, [out / "encoder.encp", out / "loss.csv"]


def cmd_eval(args, cfg, out):
    inputs, outputs = [], []
    did = False
    if args.watertight_check:
        mesh = M.read_obj(args.watertight_check)
        ok, report = M.is_watertight(mesh)
        print(f"watertight {str(ok).lower()}")
        if not ok:
            for kind in ("boundary_edges", "nonmanifold_edges", "inconsistent_edges"):
                edges = getattr(report, kind)
                if edges:
                    print(f"{kind} {len(edges)}")
        inputs.append(args.watertight_check)
        did = True
        if not ok:
            raise DataError("mesh is not watertight")
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt go together")
        a, b = M.read_obj(args.pred), M.read_obj(args.gt)
        dev = M.per_vertex_deviation(a, b)
        print(f"mean_distance {M.mean_geometric_distance(a, b):.6f}")
        M.write_deviation_csv(dev, out / "deviation.csv")
        M.write_obj(a, out / "deviation_colored.obj", colors=M.heat_colors(dev))
        inputs += [args.pred, args.gt]
        outputs += [out / "deviation.csv", out / "deviation_colored.obj"]
        did = True
    if args.checkpoint:
        data, basis, corpus = _load_data(args)
        enc, _ = load_checkpoint(args.checkpoint)
        print(f"test_mean_distance {mean_distance(enc, basis, *arrays(corpus, 'test')):.6f}")
        inputs += [data, args.checkpoint]
        did = True
    if not did:
        raise UsageError("eval needs --pred/--gt, --watertight-check or --checkpoint with --data")
    return inputs, outputs


def cmd_repair(args, cfg, out):
    mesh = M.read_obj(args.mesh)
    fixed = M.repair(mesh)
    ok, _ = M.is_watertight(fixed)
    dest = out / (Path(args.mesh).stem + "_repaired.obj")
    M.write_obj(fixed, dest)
    print(
        f"vertices {mesh.n_vertices} -> {fixed.n_vertices} faces {mesh.n_faces} -> {fixed.n_faces} "
        f"watertight {str(ok).lower()}"
    )
    return [args.mesh], [dest]


def cmd_extract(args, cfg, out):
    threshold = args.threshold if args.threshold is not None else cfg.get("threshold")
    inputs = []
    if args.checkpoint:
        data, basis, corpus = _load_data(args)
        sample = next((s for s in corpus.samples if s.identity_id == args.identity), None)
        if sample is None:
            raise DataError(f"identity {args.identity} not in corpus")
        enc, _ = load_checkpoint(args.checkpoint)
        verts = predict_vertices(enc, basis, np.stack(sample.renders[:1]))[0]
        damaged = sample.damaged_mesh
        reconstructed = M.TriangleMesh(verts, basis.faces)
        M.write_obj(reconstructed, out / "reconstructed.obj")
        inputs += [data, args.checkpoint]
    else:
        if not (args.damaged and args.reconstructed):
            raise UsageError("extract needs --damaged and --reconstructed (or --checkpoint/--data)")
        damaged, reconstructed = M.read_obj(args.damaged), M.read_obj(args.reconstructed)
        inputs += [args.damaged, args.reconstructed]
    res = M.extract_filling(damaged, reconstructed, threshold)
    outputs = [out / "labeled.obj", out / "deviation.csv"]
    M.write_obj(reconstructed, out / "labeled.obj", colors=M.LABEL_COLORS[res.labels])
    M.write_deviation_csv(M.per_vertex_deviation(damaged, reconstructed), out / "deviation.csv")
    print(f"threshold {res.threshold:.6f} wound_vertices {len(res.wound_vertices)} status {res.status}")
    if res.status == "ok":
        M.write_obj(res.filling, out / "filling.obj")
        M.write_stl(res.filling, out / "filling.stl", force=args.force)
        outputs += [out / "filling.obj", out / "filling.stl"]
        ok, _ = M.is_watertight(res.filling)
        print(f"filling_faces {res.filling.n_faces} watertight {str(ok).lower()}")
    return inputs, outputs


def cmd_export(args, cfg, out):
    mesh = M.read_obj(args.mesh)
    dest = out / (Path(args.mesh).stem + "." + args.format)
    if args.format == "stl":
        M.write_stl(mesh, dest, force=args.force)
    else:
        M.write_obj(mesh, dest)
    print(f"wrote {dest}")
    return [args.mesh], [dest]


def cmd_report(args, cfg, out):
    ecfg = experiment_config(cfg)
    seeds = [int(s) for s in str(cfg.get("seeds", cfg["seed"])).split(",")]
    basis = make_basis(ecfg)
    runs = [run_seed(ecfg, s, METHODS, basis=basis) for s in seeds]
    table = median_table(runs)
    text = report_csv(table)
    (out / "report.csv").write_text(text)
    sys.stdout.write(text)
    for r in runs:
        for m, res in r.results.items():
            res.finetune_curves.to_csv(out / f"loss_{m}_seed{r.seed}.csv")
    return [], [out / "report.csv"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "repair": cmd_repair,
    "extract": cmd_extract,
    "export": cmd_export,
    "report": cmd_report,
}


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--data-fraction", type=float, metavar="F")
    common.add_argument("--epochs", type=int, metavar="N")
    common.add_argument("--batch-size", type=int, metavar="N")
    common.add_argument("--lr", type=float, metavar="F")
    common.add_argument("--out", metavar="DIR", default="woundfill_out")
    common.add_argument("--jobs", type=int, metavar="N")
    common.add_argument("--force", action="store_true")

    parser = Parser(prog="woundfill", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", metavar="DIR", required=True)
        p.add_argument("--init", metavar="CKPT")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--pred", metavar="OBJ")
    p.add_argument("--gt", metavar="OBJ")
    p.add_argument("--watertight-check", metavar="OBJ")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--data", metavar="DIR")
    p = sub.add_parser("repair", parents=[common])
    p.add_argument("mesh")
    p = sub.add_parser("extract", parents=[common])
    p.add_argument("--damaged", metavar="OBJ")
    p.add_argument("--reconstructed", metavar="OBJ")
    p.add_argument("--threshold", type=float)
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--identity", type=int, default=0)
    p = sub.add_parser("export", parents=[common])
    p.add_argument("mesh")
    p.add_argument("--format", choices=("stl", "obj"), default="stl")
    sub.add_parser("report", parents=[common], help="method comparison table")
    return parser


def dispatch(argv=None) -> int:
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if os.environ.get("WOUNDFILL_VERBOSE") else logging.WARNING,
        format="%(message)s",
    )
    try:
        cfg = merged_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, cfg, out)
        if args.config:
            inputs = [args.config, *inputs]
        write_config(cfg, out / "config.ini")
        write_manifest(out, args.command, cfg, inputs, outputs, started)
    except UsageError as exc:
        print(f"woundfill {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError, TrainingDiverged, FloatingPointError) as exc:
        print(f"woundfill {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
