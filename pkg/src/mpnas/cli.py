"""Command-line entry point: gen-data, search, train, analyze.

A run directory holds everything one command produced plus the exact
resolved configuration it used. Settings are layered as
config file < environment (MPNAS_OUT_DIR, MPNAS_SEED) < command-line flags.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import analysis, cost, data, engine
from .balance import PRESETS, BoostingSchedule
from .space import SearchSpaceSpec, SpaceError, compile_space, default_space, path_count
from .supernet import PathSelection, SuperNetwork, load_joint, save_joint

log = logging.getLogger("mpnas")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "data": {"path": None, "family": {}},
    "space": None,
    "search": {},
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _read_yaml(path: str | Path) -> dict:
    try:
        d = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return d


def _deep_update(base: dict, new: dict) -> dict:
    for k, v in new.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(file_cfg: dict | None, args: argparse.Namespace, env=os.environ) -> dict:
    """Merge defaults, the config file, environment overrides and flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    unknown = set(file_cfg or {}) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    _deep_update(cfg, copy.deepcopy(file_cfg or {}))
    if env.get("MPNAS_OUT_DIR"):
        cfg["out"] = env["MPNAS_OUT_DIR"]
    if env.get("MPNAS_SEED"):
        try:
            cfg["seed"] = int(env["MPNAS_SEED"])
        except ValueError:
            raise ConfigError(f"MPNAS_SEED must be an integer, got {env['MPNAS_SEED']!r}") from None
    search = cfg["search"]
    flag = lambda name: getattr(args, name, None)  # noqa: E731
    if flag("out") is not None:
        cfg["out"] = flag("out")
    if flag("seed") is not None:
        cfg["seed"] = flag("seed")
    if flag("mode") is not None:
        search["mode"] = flag("mode")
    if flag("trials") is not None:
        search["mrp_trials"] = flag("trials")
    if flag("epochs") is not None:
        search["epochs"] = flag("epochs")
    if flag("beta") is not None:
        search.setdefault("reward", {})["beta"] = flag("beta")
    if flag("t0") is not None:
        search.setdefault("reward", {})["target_latency"] = flag("t0")
    if flag("balance") is not None:
        apply_balance_preset(search, flag("balance"))
    search["seed"] = int(cfg["seed"])
    return cfg


def apply_balance_preset(search: dict, name: str) -> None:
    if name not in PRESETS:
        raise ConfigError(f"--balance: unknown preset {name!r}")
    kind, direction = PRESETS[name]
    bal = search.setdefault("balance", {})
    bal["kind"], bal["direction"] = kind, direction


def build_objects(cfg: dict):
    """Validate a resolved config into (space spec, search config, family spec or None)."""
    try:
        spec = SearchSpaceSpec.from_dict(cfg["space"]) if cfg.get("space") else default_space()
    except SpaceError as exc:
        raise ConfigError(f"space: {exc}") from None
    family = None
    if not cfg["data"].get("path"):
        fam = dict(cfg["data"].get("family") or {})
        fam.setdefault("seed", int(cfg["seed"]))
        try:
            family = data.DomainFamilySpec.from_dict(fam)
        except data.DataError as exc:
            raise ConfigError(f"data.family.{exc}") from None
    search = dict(cfg["search"])
    if family is not None:
        search.setdefault("resolution", family.resolution)
    try:
        scfg = engine.SearchConfig.from_dict(search)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"search: {exc}") from None
    return spec, scfg, family


def load_datasets(cfg: dict, family) -> list[data.DomainDataset]:
    if family is not None:
        return data.generate(family)
    root = Path(cfg["data"]["path"])
    if not root.exists():
        raise ConfigError(f"data.path: {root} does not exist")
    return data.load_family(root, engine.derive_seed(int(cfg["seed"]), "load"))


def dump_yaml(d: dict) -> str:
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=False)


def _resolved(cfg: dict, spec: SearchSpaceSpec, scfg: engine.SearchConfig, family) -> dict:
    out = copy.deepcopy(cfg)
    out["space"] = spec.to_dict()
    out["search"] = scfg.to_dict()
    if family is not None:
        out["data"]["family"] = family.to_dict()
    return out


# ---------------------------------------------------------------------------
# Run-directory helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class MetricsWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, records):
        for r in records:
            self.fh.write(engine.metrics_line(r) + "\n")

    def close(self):
        self.fh.close()


def read_paths(run: Path, spec: SearchSpaceSpec) -> tuple[list[str], list[list[PathSelection]]]:
    f = run / "paths.json"
    if not f.exists():
        raise ConfigError(f"{run}: no paths.json; run `search` first")
    blob = json.loads(f.read_text())
    points = compile_space(spec)
    names = blob["domains"]
    trials = [[PathSelection.from_mapping(points, t[n]) for n in names] for t in blob["trials"]]
    return names, trials


def read_run_config(run: Path) -> dict:
    f = run / "config.yaml"
    if not f.exists():
        raise ConfigError(f"{run}: no config.yaml; not a run directory")
    raw = _read_yaml(f)
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"{f}: unknown top-level config keys: {sorted(unknown)}")
    return _deep_update(copy.deepcopy(DEFAULT_CONFIG), raw)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    raw = _read_yaml(args.config) if args.config else {}
    fam = raw.get("data", {}).get("family", {}) if "data" in raw else raw
    fam = dict(fam or {})
    if args.seed is not None:
        fam["seed"] = args.seed
    elif os.environ.get("MPNAS_SEED"):
        fam["seed"] = int(os.environ["MPNAS_SEED"])
    try:
        family = data.DomainFamilySpec.from_dict(fam)
    except data.DataError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out or os.environ.get("MPNAS_OUT_DIR") or "data")
    datasets = data.generate(family)
    data.write_directory(datasets, out)
    (out / "family.yaml").write_text(dump_yaml(family.to_dict()))
    for ds in datasets:
        print(f"{ds.name}: {ds.class_count} classes, " +
              ", ".join(f"{s}={ds.size(s)}" for s in data.SPLITS))
    print(f"wrote {len(datasets)} domains to {out}")
    return 0


def cmd_search(args) -> int:
    file_cfg = _read_yaml(args.config) if args.config else {}
    cfg = resolve_config(file_cfg, args)
    spec, scfg, family = build_objects(cfg)
    points = compile_space(spec)
    if args.dry_run:
        if family is None:
            root = Path(cfg["data"]["path"])
            if not root.exists():
                raise ConfigError(f"data.path: {root} does not exist")
        print(f"mode: {scfg.mode}")
        print(f"decision points: {len(points)}")
        print(f"path count: {path_count(spec)}")
        return 0
    datasets = load_datasets(cfg, family)
    run = Path(cfg["out"])
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.yaml").write_text(dump_yaml(_resolved(cfg, spec, scfg, family)))
    writer = MetricsWriter(run / "metrics.ndjson")
    try:
        res = engine.search(datasets, spec, scfg, on_step=writer)
    finally:
        writer.close()
    names = [d.name for d in datasets]
    trials = res.trials or [res.paths]
    _write_json(run / "paths.json", {
        "mode": scfg.mode,
        "domains": names,
        "trials": [{n: p.to_dict() for n, p in zip(names, t)} for t in trials],
    })
    if res.controllers:
        _write_json(run / "controllers.json",
                    [{"state": c.state_dict(), "probabilities": c.dump_probabilities()}
                     for c in res.controllers])
    joint = engine.merge_for(res.supernet, trials[0], datasets)
    save_joint(joint, run / "checkpoint")
    qualities = engine.evaluate(joint, datasets, "validation")
    calib = cost.default_calibration(spec, scfg.resolution, scfg.reward.target_latency)
    rows = []
    for t, paths in enumerate(trials):
        for n, r in zip(names, analysis.cost_rows(spec, paths, qualities, calib, scfg.reward, scfg.resolution)):
            rows.append({"trial": t, "domain": n, **r})
    analysis.write_csv(rows, run / "cost_report.csv", ("trial", "domain") + analysis.COST_COLUMNS)
    if len(trials) > 1:
        _write_json(run / "trials_summary.json", {
            "trials": len(trials),
            "mean_joint_params": float(np.mean([cost.joint_params(spec, t) for t in trials])),
            "mean_joint_flops": float(np.mean([cost.joint_flops(spec, t, scfg.resolution) for t in trials])),
            "mean_pairwise_jaccard": float(np.mean([_mean_offdiag(spec, t) for t in trials])),
        })
    print(f"{scfg.mode}: {len(trials)} path set(s) for {len(names)} domains written to {run}")
    for n, p in zip(names, trials[0]):
        print(f"  {n}: {p.digest()}")
    return 0


def _mean_offdiag(spec, paths) -> float:
    m = analysis.similarity_matrix(spec, paths).values
    n = len(m)
    return 1.0 if n < 2 else float((m.sum() - n) / (n * n - n))


def cmd_train(args) -> int:
    run = Path(args.run_dir)
    cfg = read_run_config(run)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["search"]["seed"] = args.seed
    if args.epochs is not None:
        cfg["search"]["train_epochs"] = args.epochs
    if args.balance is not None:
        apply_balance_preset(cfg["search"], args.balance)
    spec, scfg, family = build_objects(cfg)
    datasets = load_datasets(cfg, family)
    names, trials = read_paths(run, spec)
    if names != [d.name for d in datasets]:
        raise ConfigError("domain names in paths.json do not match the data")
    (run / "train_config.yaml").write_text(dump_yaml(scfg.to_dict()))
    writer = MetricsWriter(run / "train_metrics.ndjson")
    rows = []
    try:
        for t, paths in enumerate(trials):
            sub = scfg if len(trials) == 1 else replace(scfg, seed=engine.derive_seed(scfg.seed, "trial", t))
            dest = run / "trained" / (f"trial{t}" if len(trials) > 1 else "")
            if scfg.mode == "sdnas":
                val, test = [], []
                for p, ds in zip(paths, datasets):
                    sn = SuperNetwork(spec, engine.derive_seed(sub.seed, "weights"), sub.resolution)
                    res = engine.train_joint(engine.merge_for(sn, [p], [ds]), [ds],
                                             replace(sub, seed=engine.derive_seed(sub.seed, "bundle", ds.name)),
                                             on_step=writer)
                    save_joint(res.joint, dest / ds.name)
                    val += res.validation
                    test += res.test
            else:
                sn = SuperNetwork(spec, engine.derive_seed(sub.seed, "weights"), sub.resolution)
                res = engine.train_joint(engine.merge_for(sn, paths, datasets), datasets, sub, on_step=writer)
                save_joint(res.joint, dest)
                val, test = res.validation, res.test
            for split, accs in (("validation", val), ("test", test)):
                rows.append({"trial": t, "split": split, **dict(zip(names, accs)), "mean": float(np.mean(accs))})
    finally:
        writer.close()
    analysis.write_csv(rows, run / "accuracy.csv", ["trial", "split", *names, "mean"])
    width = max(len(n) for n in names + ["split"])
    print("trial  " + "split".ljust(width + 5) + "  ".join(n.rjust(7) for n in names + ["mean"]))
    for r in rows:
        print(f"{r['trial']:<5}  {r['split']:<{width + 5}}" +
              "  ".join(f"{r[n]:7.4f}" for n in names + ["mean"]))
    return 0


def cmd_analyze(args) -> int:
    run = Path(args.run_dir)
    cfg = read_run_config(run)
    spec, scfg, _ = build_objects(cfg)
    names, trials = read_paths(run, spec)
    out = run / "analysis"
    out.mkdir(exist_ok=True)
    analysis.similarity_matrix(spec, trials[0], names).save(out / "similarity.csv")
    ckpt = run / "checkpoint"
    if not ckpt.exists():
        raise ConfigError(f"{run}: missing checkpoint/")
    stats = analysis.sharing_stats(load_joint(ckpt))
    _write_json(out / "sharing.json", stats)
    reports = [analysis.cost_reduction_report(spec, t, t, scfg.resolution, names) for t in trials]
    _write_json(out / "cost_reduction.json", reports[0] if len(reports) == 1 else {"trials": reports})
    if len(trials) > 1:
        mats = [analysis.similarity_matrix(spec, t, names).values for t in trials]
        analysis.SimilarityMatrix(names, np.mean(mats, axis=0)).save(out / "similarity_mean.csv")
    rows = []
    metrics_file = run / "metrics.ndjson"
    if metrics_file.exists():
        recs = [json.loads(line) for line in metrics_file.read_text().splitlines() if line]
        for y in ("reward", "quality", "loss", "entropy"):
            rows += [{"metric": f"search.{y}", **r} for r in analysis.plot_series(recs, y, "search")]
    tfile = run / "train_metrics.ndjson"
    if tfile.exists():
        recs = [json.loads(line) for line in tfile.read_text().splitlines() if line]
        for y in ("loss", "domain_weight"):
            rows += [{"metric": f"train.{y}", **r} for r in analysis.plot_series(recs, y, "train")]
    analysis.write_csv(rows, out / "plot_data.csv", ("metric", "series", "x", "y"))
    sim = analysis.SimilarityMatrix.load(out / "similarity.csv")
    print("jaccard similarity")
    print("      " + " ".join(f"{n:>6}" for n in sim.labels))
    for n, row in zip(sim.labels, sim.values):
        print(f"{n:>6}" + " ".join(f"{v:6.3f}" for v in row))
    print(f"shared nodes: {stats['shared_nodes']}, exclusive nodes: {stats['exclusive_nodes']}")
    r0 = reports[0]
    print(f"param reduction vs bundle: {100 * r0['param_reduction']:.1f}%, "
          f"flops reduction: {100 * r0['flops_reduction']:.1f}%")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpnas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic domain family to disk")
    g.add_argument("--config", help="YAML family spec (bare, or under data.family)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("search", help="search one path per domain")
    s.add_argument("--config")
    s.add_argument("--mode", choices=engine.MODES)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--balance", choices=sorted(PRESETS))
    s.add_argument("--beta", type=float)
    s.add_argument("--t0", type=float, help="target latency")
    s.add_argument("--epochs", type=int, help="search epochs")
    s.add_argument("--trials", type=int, help="random path draws in mrp mode")
    s.add_argument("--dry-run", action="store_true", help="validate config and report the space size")
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", help="train the merged model of a search run from scratch")
    t.add_argument("run_dir")
    t.add_argument("--balance", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="training epochs")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="similarity, sharing and cost-reduction reports")
    a.add_argument("run_dir")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, data.DataError, SpaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (engine.SearchError, FloatingPointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
