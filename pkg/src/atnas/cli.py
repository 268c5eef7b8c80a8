"""Command-line entry point: ``atnas <command>``.

Experiment parameters come from a JSON config (see :mod:`atnas.config`);
flags carry only paths and a few overrides. Every command writes a run
manifest holding the full resolved config, so reruns reproduce outputs.

Exit codes: 0 success, 2 usage or config error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .archspace import GenomeError, default_reduce_positions, deserialize, random_code, serialize
from .evolution import EvolutionError, GenerationLog, Population, SearchSettings, search, sepconv3_fraction, identity_fraction
from .metaopt import MetaError, MetaHyper, adapt_and_score
from .parallel import ParallelError, resolve_workers
from .predictor import PredictorError, predictor_bench, save_forest, fit
from .supernet import CheckpointError, SelectionError, SuperNet, load_checkpoint, save_checkpoint, select, warmup
from .tasks import DataError, TaskPool, gen_synth, read_atds, sample_episode, write_atds
from .transfer import TransferConfig, TransferError, transfer

RUNTIME_ERRORS = (OSError, GenomeError, CheckpointError, SelectionError, DataError, MetaError, EvolutionError,
                  ParallelError, PredictorError, TransferError)
SYNTHETIC = {"sepconv3": sepconv3_fraction, "identity": identity_fraction}


class UsageError(Exception):
    pass


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, args: dict, workers: int, outputs: list[str]):
    doc = {
        "command": command,
        "version": version_string(),
        "seed": cfg["parallel"]["seed"],
        "workers": workers,
        "config": cfg,
        "args": args,
        "outputs": {name: sha256_file(out_dir / name) for name in outputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> dict:
    if getattr(args, "from_manifest", None):
        doc = json.loads(Path(args.from_manifest).read_text())
        if "config" not in doc:
            raise config_mod.ConfigError([f"{args.from_manifest} is not a run manifest"])
        cfg = config_mod.merge(doc["config"])
        for key, value in doc.get("args", {}).items():
            if getattr(args, key, None) is None:
                setattr(args, key, value)
    else:
        cfg = config_mod.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg["parallel"]["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        cfg["parallel"]["workers"] = args.workers
    return cfg


def _hyper(cfg) -> MetaHyper:
    m = cfg["meta"]
    return MetaHyper(m["lambda_task"], m["eta_meta"], m["M"], m["B_arch"], m["B_task"], m["optimizer"])


def _reduce(cfg):
    r = cfg["model"]["reduce_positions"]
    return default_reduce_positions(cfg["model"]["cells"]) if r is None else tuple(r)


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    ds = gen_synth(args.classes, args.per_class, args.size, args.size, args.noise,
                   np.random.default_rng(args.seed), channels=args.channels)
    write_atds(ds, args.out)
    print(f"wrote {args.out}: {ds.classes} classes x {ds.per_class} images, "
          f"{ds.height}x{ds.width}x{ds.channels}, noise {args.noise}, seed {args.seed}")
    return 0


def cmd_search(args) -> int:
    cfg = _load_config(args)
    if args.data is not None:
        cfg["data"]["path"] = args.data
    if cfg["data"]["path"] is None:
        raise UsageError("no dataset: pass --data or set data.path")
    out = _out_dir(args.out)
    workers = resolve_workers(cfg["parallel"]["workers"])
    seed = cfg["parallel"]["seed"]
    d, meta, evo = cfg["data"], cfg["meta"], cfg["evo"]
    ds = read_atds(d["path"])
    n_train = int(round(ds.classes * d["train_frac"]))
    if n_train < d["n"] or ds.classes - n_train < d["n"]:
        raise DataError(f"{ds.classes} classes cannot be split into two {d['n']}-way class sets")
    train_pool = TaskPool(ds.subset(range(n_train)), d["n"], d["k"], d["q"], d["pool_size"], seed=2 * seed + 1)
    val_pool = TaskPool(ds.subset(range(n_train, ds.classes)), d["n"], d["k"], d["q"], d["val_tasks"],
                        seed=2 * seed + 2)
    hyper = _hyper(cfg)
    reduce = _reduce(cfg)
    rng = np.random.default_rng(seed)
    net = SuperNet(cfg["model"]["cells"], cfg["model"]["channels"], d["n"], reduce_positions=reduce,
                   in_channels=ds.channels, rng=rng)
    warmup(net, train_pool, meta["E_warm"], rng, hyper, meta["steps_per_epoch"])
    pop = Population.random(evo["K"], cfg["model"]["cells"], reduce, rng)
    settings = SearchSettings(
        E_evo=meta["E_evo"], cadence=meta["cadence"], steps_per_epoch=meta["steps_per_epoch"],
        p_c=evo["p_c"], p_m=evo["p_m"], elite_frac=evo["elite_frac"], reevaluate=evo["reevaluate"],
        workers=workers, val_tasks_per_eval=evo["val_tasks_per_eval"],
        predictor_trees=cfg["predictor"]["trees"] if cfg["predictor"]["enabled"] else None)
    log = GenerationLog(wallclock=cfg["log"]["wallclock"])
    net, pop, log = search(net, pop, train_pool, val_pool, hyper, settings, rng, log=log)
    save_checkpoint(net, out / "supernet.atsn")
    (out / "population.json").write_text(pop.to_json() + "\n")
    log.write(out / "generations.csv")
    write_manifest(out, "search", cfg, {"data": d["path"]}, workers,
                   ["supernet.atsn", "population.json", "generations.csv"])
    best, rec = pop.best()
    print(f"search done: {len(log.rows)} generations, best fitness {rec.mean_acc:.4f}, outputs in {out}")
    return 0


def _load_meta(args, cfg):
    meta_dir = Path(args.meta) if args.meta else None
    ckpt = Path(args.checkpoint) if args.checkpoint else (meta_dir / "supernet.atsn" if meta_dir else None)
    popf = Path(args.population) if args.population else (meta_dir / "population.json" if meta_dir else None)
    if ckpt is None or popf is None:
        raise UsageError("pass --meta DIR or both --checkpoint and --population")
    for p in (ckpt, popf):
        if not p.exists():
            raise FileNotFoundError(f"missing meta artifact {p}")
    pop = Population.from_json(popf.read_text())
    net = load_checkpoint(ckpt, pop.members[0].reduce_positions)
    return net, pop, ckpt, popf


def cmd_transfer(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out)
    net, pop, ckpt, popf = _load_meta(args, cfg)
    if args.data is None:
        raise UsageError("--data is required")
    ds = read_atds(args.data)
    tr = cfg["transfer"]
    seed = cfg["parallel"]["seed"]
    rng = np.random.default_rng(seed)
    task = sample_episode(ds, net.n_classes, tr["train_shots"], tr["val_shots"], rng)
    tcfg = TransferConfig(P=tr["P"], E_param=tr["E_param"], batch_size=tr["batch_size"], lr=tr["lr"],
                          p_c=tr["p_c"], p_m=tr["p_m"], generations=tr["generations"],
                          predictor=args.predictor or cfg["predictor"]["enabled"],
                          predictor_trees=cfg["predictor"]["trees"])
    log = GenerationLog(wallclock=cfg["log"]["wallclock"])
    result = transfer(net, pop, task.support, task.query, tcfg, rng, log=log)
    (out / "genome.json").write_text(serialize(result.code) + "\n")
    save_checkpoint(result.net, out / "supernet.atsn")
    log.write(out / "generations.csv")
    (out / "result.json").write_text(json.dumps({"fitness": result.fitness, "sizes": result.sizes}, indent=1) + "\n")
    write_manifest(out, "transfer", cfg, {"data": str(args.data), "checkpoint": str(ckpt),
                                          "population": str(popf), "predictor": bool(tcfg.predictor)},
                   1, ["genome.json", "supernet.atsn", "generations.csv", "result.json"])
    print(f"transfer done: sizes {'->'.join(map(str, result.sizes))}, val accuracy {result.fitness:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.episodes is None or args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    for name in ("checkpoint", "genome", "data"):
        if getattr(args, name) is None:
            raise UsageError(f"--{name} is required")
    text = Path(args.genome).read_text()
    code = deserialize(text)
    net = load_checkpoint(args.checkpoint, code.reduce_positions)
    ds = read_atds(args.data)
    d = cfg["data"]
    if d["n"] != net.n_classes:
        raise SelectionError(f"episodes are {d['n']}-way but the checkpoint head has {net.n_classes} classes")
    view = select(net, code)
    pool = TaskPool(ds, d["n"], d["k"], d["q"], args.episodes, seed=cfg["parallel"]["seed"])
    hyper = _hyper(cfg)
    accs = np.array([adapt_and_score(view, pool.episode(i), hyper) for i in range(args.episodes)])
    report = {
        "episodes": args.episodes, "n": d["n"], "k": d["k"], "q": d["q"],
        "mean": float(accs.mean()), "std": float(accs.std()),
        "genome_sha256": hashlib.sha256(serialize(code).encode()).hexdigest(),
        "accuracies": accs.tolist(),
    }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(f"accuracy {report['mean']:.4f} +- {report['std']:.4f} over {args.episodes} episodes "
          f"(genome {report['genome_sha256'][:12]})")
    return 0


def cmd_predictor_bench(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args.out)
    p = cfg["predictor"]
    seed = cfg["parallel"]["seed"]
    rng = np.random.default_rng(seed)
    scored = []
    for path in args.population or []:
        pop = Population.from_json(Path(path).read_text())
        scored += [(c, f.mean_acc) for c, f in zip(pop.members, pop.fitness) if f is not None]
    if args.synthetic:
        need = max(p["sweep"]) + p["holdout"] - len(scored)
        fn = SYNTHETIC[args.synthetic]
        cells, reduce = cfg["model"]["cells"], _reduce(cfg)
        scored += [(c, fn(c)) for c in (random_code(cells, reduce, rng) for _ in range(max(need, 0)))]
    report = predictor_bench(scored, holdout=p["holdout"], sweep=tuple(p["sweep"]), repeats=p["repeats"],
                             n_trees=p["trees"], seed=seed)
    (out / "report.json").write_text(report.to_json() + "\n")
    model = fit(scored[:p["train_samples"]], n_trees=p["trees"], seed=seed)
    save_forest(model, out / "predictor.atrf")
    write_manifest(out, "predictor-bench", cfg, {"population": args.population, "synthetic": args.synthetic},
                   1, ["report.json", "predictor.atrf"])
    for n, mean, std in report.rows:
        print(f"samples {n:4d}: spearman {mean:.3f} +- {std:.3f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atnas", description="Across-task architecture search engine.")
    parser.add_argument("--version", action="version", version=f"atnas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic ATDS dataset")
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--per-class", type=int, default=40)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override parallel.seed")
        p.add_argument("--out", help="output directory")

    s = sub.add_parser("search", help="warm up, then run meta continuous evolution")
    common(s)
    s.add_argument("--data", help="ATDS dataset (overrides data.path)")
    s.add_argument("--workers", type=int, help="override parallel.workers")
    s.add_argument("--from-manifest", help="rerun with the config and inputs of a previous run")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("transfer", help="population-halving transfer to a new task")
    common(t)
    t.add_argument("--data", help="ATDS dataset of the new task")
    t.add_argument("--meta", help="directory holding supernet.atsn and population.json")
    t.add_argument("--checkpoint")
    t.add_argument("--population")
    t.add_argument("--predictor", action="store_true", default=None,
                   help="screen offspring with a surrogate (off by default)")
    t.add_argument("--from-manifest")
    t.set_defaults(func=cmd_transfer)

    e = sub.add_parser("eval", help="mean +- std query accuracy of one genome")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--checkpoint")
    e.add_argument("--genome")
    e.add_argument("--data")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--out", help="report JSON path")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("predictor-bench", help="rank correlation of the surrogate vs training samples")
    common(b)
    b.add_argument("--population", action="append", help="scored population JSON (repeatable)")
    b.add_argument("--synthetic", choices=sorted(SYNTHETIC), help="top up with genomes scored by a synthetic fitness")
    b.set_defaults(func=cmd_predictor_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"atnas {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"atnas {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
