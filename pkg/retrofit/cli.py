"""
Command-line entry point (`rf`).

Subcommands: gen, pretrain, train, fit, eval, export, bench, runs. Flags override the
TOML config given with --config (or RF_CONFIG), which overrides the built-in
defaults. Every subcommand but runs writes a manifest.json into its output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, reload_config
from .corpus import (
    GenSpec,
    TargetRecord,
    generate_database,
    generate_targets,
    get_families,
    load_database,
    load_targets,
    save_database,
    save_targets,
    split_targets,
)
from .deformnet import DeformNet, fit_target
from .errors import DataError, RetrofitError, UnknownSource, UsageError
from .evalbench import evaluate, run_benchmark, write_rows
from .geometry import export_boxes_obj, load_cloud, save_ply
from .retrieval import RetrievalSpace
from .runs import RunManager, list_runs
from .trainer import JointTrainer, joint_train, load_checkpoint, pretrain, save_checkpoint

logger = logging.getLogger("retrofit")

LOG_FORMAT = "[rf] %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors raise instead of exiting with 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--workdir", default=None, help="base directory for relative paths")
    parser.add_argument("--config", default=None, help="TOML run config")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default RF_THREADS or cores)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")


def _data_flags(parser: argparse.ArgumentParser, targets: bool = True):
    parser.add_argument("--database", default=None, help="rf-1 database JSON")
    if targets:
        parser.add_argument("--targets", default=None, help="rf-1 targets JSON")


def _model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--no-projection", action="store_true", help="disable connectivity constraints")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rf", description="Deformation-aware shape retrieval and part-based fitting")
    parser.add_argument("--version", action="version", version=f"rf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic source database and planted targets")
    _common(p)
    p.add_argument("--sources", type=int, default=None)
    p.add_argument("--targets", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--families", default=None, help=f"comma-separated subset of {get_families()}")
    p.add_argument("--parts", default=None, help="allowed part counts as MIN,MAX")
    p.add_argument("--offset-scale", type=float, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--ply", action="store_true", help="also write one PLY per target")

    p = sub.add_parser("pretrain", help="train the deformation network on random pairs")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train", help="joint retrieval/deformation training")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--checkpoint", default=None, help="pretrained deformation checkpoint")
    p.add_argument("--resume", default=None, help="joint-training checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--sampling", choices=("biased", "uniform"), default=None)
    p.add_argument("--ido", action="store_true", help="distill inner deformation optimisation")
    p.add_argument("--freeze-deformation", action="store_true", help="update only the retrieval module")

    p = sub.add_parser("fit", help="retrieve and deform a source to one target cloud")
    _common(p)
    _data_flags(p, targets=False)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True, help="target cloud (.ply, .obj or JSON)")
    p.add_argument("--source", default=None, help="source name (default: top retrieved)")
    p.add_argument("--ido", action="store_true", help="refine with inner deformation optimisation")

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out targets")
    _common(p)
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--do", action="store_true", help="direct optimisation of the top retrieved sources")

    p = sub.add_parser("export", help="write sources as OBJ boxes and PLY samples")
    _common(p)
    _data_flags(p, targets=False)
    p.add_argument("--source", action="append", default=None, help="source name (repeatable; default all)")

    p = sub.add_parser("bench", help="run the benchmark arms")
    _common(p)
    _model_flags(p)
    p.add_argument("--arms", default=None, help="comma-separated arm names")
    p.add_argument("--sizes", default=None, help="comma-separated database sizes")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--checkpoint-dir", default=None)

    p = sub.add_parser("runs", help="list run directories under the workdir, newest first")
    _common(p)
    return parser


# =============================================================================
# Config and logging
# =============================================================================


def _csv(value: str, cast=str) -> tuple:
    try:
        return tuple(cast(v.strip()) for v in value.split(",") if v.strip())
    except ValueError as e:
        raise UsageError(f"bad list value {value!r}: {e}") from e


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Built-in defaults < TOML file < command-line flags."""
    cfg = reload_config(args.config)
    overrides: dict[str, dict] = {}

    def put(table: str, key: str, value):
        if value is not None:
            overrides.setdefault(table, {})[key] = value

    put("paths", "workdir", args.workdir)
    put("train", "threads", args.threads)
    if args.seed is not None:
        put("train", "seed", args.seed)
        put("corpus", "seed", args.seed)
    if getattr(args, "database", None):
        put("paths", "database", args.database)
    if isinstance(getattr(args, "targets", None), str):
        put("paths", "targets", args.targets)
    if getattr(args, "no_projection", False):
        put("train", "use_projection", False)

    cmd = args.command
    if cmd == "gen":
        put("corpus", "n_sources", args.sources)
        put("corpus", "n_targets", args.targets)
        put("corpus", "n_points", args.points)
        put("corpus", "offset_scale", args.offset_scale)
        put("corpus", "noise_sigma", args.noise)
        if args.families:
            put("corpus", "families", _csv(args.families))
        if args.parts:
            put("corpus", "part_count", _csv(args.parts, int))
    elif cmd == "pretrain":
        put("train", "pretrain_steps", args.steps)
    elif cmd == "train":
        put("train", "epochs", args.epochs)
        put("train", "K", args.K)
        put("train", "sampling", args.sampling)
        if args.ido:
            put("train", "use_ido", True)
        if args.freeze_deformation:
            put("train", "train_deformation", False)
    elif cmd == "bench":
        if args.arms:
            put("bench", "arms", _csv(args.arms))
        if args.sizes:
            put("bench", "db_sizes", _csv(args.sizes, int))
        if args.seeds:
            put("bench", "seeds", _csv(args.seeds, int))
        put("bench", "checkpoint_dir", args.checkpoint_dir)
    return cfg.merged(overrides)


def setup_logging(verbose: bool = False, quiet: bool = False):
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)
    logger.propagate = False


def _out_dir(cfg: RunConfig, args: argparse.Namespace, default: str) -> Path:
    return cfg.paths.resolve(args.out or default)


def _start_run(cfg: RunConfig, args: argparse.Namespace, argv: list[str], default: str) -> RunManager:
    run = RunManager(_out_dir(cfg, args, default))
    run.write_manifest(args.command, argv, cfg.to_dict(), seed=cfg.train.seed)
    return run


def _load_db(cfg: RunConfig):
    return load_database(cfg.paths.resolve(cfg.paths.database), tau=cfg.corpus.tau)


def _load_split(cfg: RunConfig, split: str = "train") -> list[TargetRecord]:
    records = load_targets(cfg.paths.resolve(cfg.paths.targets))
    if split == "all":
        return records
    train, test = split_targets(records, cfg.corpus.train_fraction, seed=cfg.corpus.seed)
    chosen = train if split == "train" else test
    if not chosen:
        raise DataError(f"the {split} split of {cfg.paths.targets} is empty")
    return chosen


def _find_source(db, name: str) -> int:
    for i, shape in enumerate(db):
        if shape.name == name:
            return i
    raise UnknownSource(f"no source named {name!r}")


# =============================================================================
# Commands
# =============================================================================


def cmd_gen(cfg: RunConfig, args, argv) -> int:
    out = _out_dir(cfg, args, ".")
    c = cfg.corpus
    db = generate_database(GenSpec.from_config(c), c.n_sources, threads=cfg.threads())
    records = generate_targets(db, c.n_targets, c.offset_scale, c.noise_sigma, seed=c.seed,
                               alpha=cfg.train.alpha)
    run = RunManager(out)
    run.write_manifest("gen", argv, cfg.to_dict(), seed=c.seed)
    save_database(db, out / "database.json")
    save_targets(records, out / "targets.json", ply_dir=out / "targets" if args.ply else None)
    return 0


def cmd_pretrain(cfg: RunConfig, args, argv) -> int:
    run = _start_run(cfg, args, argv, "runs/pretrain")
    db = _load_db(cfg)
    targets = [r.cloud for r in _load_split(cfg, "train")]
    net = DeformNet.for_database(db, cfg.model, cfg.train.alpha, np.random.default_rng([cfg.train.seed, 0]))
    result = pretrain(net, db, targets, cfg.train,
                      on_step=lambda step, loss: logger.debug("pretrain step %d: %.4g", step, loss))
    run.log_event("pretrain", steps=result.steps, converged=result.converged,
                  final_loss=result.history[-1] if result.history else None)
    save_checkpoint(run.path("pretrained.rfnt"), None, net, cfg.train, db)
    return 0


def cmd_train(cfg: RunConfig, args, argv) -> int:
    run = _start_run(cfg, args, argv, "runs/train")
    db = _load_db(cfg)
    targets = [r.cloud for r in _load_split(cfg, "train")]
    threads = cfg.threads()

    if args.resume:
        space, net, _ = load_checkpoint(cfg.paths.resolve(args.resume), db)
        if space is None:
            raise DataError(f"{args.resume} has no retrieval module to resume")
        trainer = JointTrainer(space, net, db, targets, cfg.train, ido=cfg.ido, threads=threads, run=run)
        trainer.restore(cfg.paths.resolve(args.resume))
        trainer.run()
        trainer.save(run.path("final.rfnt"))
        return 0

    if args.checkpoint:
        _, net, _ = load_checkpoint(cfg.paths.resolve(args.checkpoint), db)
    else:
        net = DeformNet.for_database(db, cfg.model, cfg.train.alpha, np.random.default_rng([cfg.train.seed, 0]))
        pretrain(net, db, targets, cfg.train)
        save_checkpoint(run.path("pretrained.rfnt"), None, net, cfg.train, db)
    space = RetrievalSpace(len(db), cfg.model, rng=np.random.default_rng([cfg.train.seed, 1]))
    joint_train(space, net, db, targets, cfg.train, ido=cfg.ido, threads=threads, run=run)
    return 0


def cmd_fit(cfg: RunConfig, args, argv) -> int:
    run = _start_run(cfg, args, argv, "fit")
    db = _load_db(cfg)
    space, net, _ = load_checkpoint(cfg.paths.resolve(args.checkpoint), db)
    target = load_cloud(cfg.paths.resolve(args.target))

    if args.source:
        source = _find_source(db, args.source)
    elif space is not None:
        source = int(space.ranking(target)[0])
    else:
        raise UsageError("checkpoint has no retrieval module; pass --source")

    result = fit_target(net, db[source], target, use_projection=cfg.train.use_projection,
                        ido=cfg.ido if args.ido else None)
    export_boxes_obj(result.boxes, run.path("fit.obj"))
    save_ply(result.cloud, run.path("fit.ply"))
    report = {"source_name": db[source].name, **result.report.to_json()}
    if result.ido is not None:
        report["ido"] = {"loss": result.ido.loss, "chamfer": result.ido.chamfer,
                         "iterations": result.ido.iterations, "converged": result.ido.converged}
    run.write_json("report.json", report)
    logger.info("fit %s: chamfer %.4g -> %.4g", db[source].name, result.report.pre_chamfer,
                result.report.post_chamfer)
    return 0


def cmd_eval(cfg: RunConfig, args, argv) -> int:
    run = _start_run(cfg, args, argv, "runs/eval")
    db = _load_db(cfg)
    space, net, _ = load_checkpoint(cfg.paths.resolve(args.checkpoint), db)
    if space is None:
        raise DataError(f"{args.checkpoint} has no retrieval module")
    targets = [r.cloud for r in _load_split(cfg, args.split)]
    result = evaluate(space.ranking, net, db, targets, use_projection=cfg.train.use_projection,
                      do=cfg.ido if args.do else None, do_top_k=cfg.bench.do_top_k, threads=cfg.threads())
    arm = "ours_do" if args.do else "ours"
    row = result.row(arm, len(db), cfg.train.seed, 0.0)
    write_rows([row], run.path("eval.csv"))
    run.write_json("eval.json", {
        "summary": row,
        "targets": [
            {"target": t.target_id, "retrieved": t.retrieved[:5].tolist(), "oracle": t.oracle[:5].tolist(),
             "top_k": t.top_k.tolist(), "rank": t.rank}
            for t in result.targets
        ],
    })
    logger.info("top-1 chamfer %.4g, mean rank %.2f, recall@1 %.2f, recall@5 %.2f",
                row["top1"], row["mean_rank"], row["recall1"], row["recall5"])
    return 0


def cmd_export(cfg: RunConfig, args, argv) -> int:
    run = _start_run(cfg, args, argv, "export")
    db = _load_db(cfg)
    chosen = [db[_find_source(db, n)] for n in args.source] if args.source else db
    for shape in chosen:
        export_boxes_obj(shape.boxes(), run.path(f"{shape.name}.obj"))
        save_ply(shape.default_cloud, run.path(f"{shape.name}.ply"))
    logger.info("exported %d sources to %s", len(chosen), run.dir)
    return 0


def cmd_bench(cfg: RunConfig, args, argv) -> int:
    run = _start_run(cfg, args, argv, "runs/bench")
    run_benchmark(cfg, threads=cfg.threads(), run=run, use_projection=cfg.train.use_projection,
                  out=run.path("bench.csv"))
    return 0


def cmd_runs(cfg: RunConfig, args, argv) -> int:
    runs = list_runs(_out_dir(cfg, args, "."))
    for r in runs:
        print(f"{r['updated_at']}  {r['command']:<8}  {r['id']}  {r['dir']}")
    logger.info("%d runs", len(runs))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "export": cmd_export,
    "bench": cmd_bench,
    "runs": cmd_runs,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.verbose, args.quiet)
        cfg = resolve_config(args)
        logger.debug("config: %s", asdict(cfg))
        return COMMANDS[args.command](cfg, args, argv)
    except RetrofitError as e:
        logging.getLogger("retrofit").error("%s", e)
        return e.exit_code
    except (ValueError, OSError) as e:
        logging.getLogger("retrofit").error("%s: %s", type(e).__name__, e)
        return DataError.exit_code
