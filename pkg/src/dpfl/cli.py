"""Command-line front end.

    dpfl run CONFIG [--set key.path=value ...] [--out DIR]
    dpfl sweep SWEEP [--jobs N]
    dpfl audit EXPERIMENT_DIR [--shuffle-seed S]
    dpfl domain-gap CONFIG [CONFIG ...] [--magnitudes M ...] --out DIR
    dpfl partition-inspect CONFIG

Relative output directories are resolved against $DPFL_OUTPUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import yaml

from dpfl import analysis, attacks, federation, models
from dpfl.analysis import RoundMetrics
from dpfl.config import (
    ExperimentConfig,
    apply_overrides,
    build_experiment,
    build_transfer,
    config_from_dict,
    parse_config,
    set_path,
)
from dpfl.errors import AuditError, BudgetViolation, ConfigError, DPFLError, TrainingError
from dpfl.privacy import GradientReport

log = logging.getLogger("dpfl")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_AUDIT, EXIT_DATA = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "DPFL_OUTPUT_ROOT"

CONFIG_FILE = "config.yaml"
METRICS_FILE = "metrics.csv"
GRADIENT_LOG = "gradients.npz"
DONE_MARKER = "DONE"
FAILED_MARKER = "FAILED"

AXES = {
    "epsilon": "privacy.epsilon",
    "total_rounds": "federation.total_rounds",
    "num_clients": "federation.num_clients",
    "alpha": "federation.alpha",
    "strategy": "federation.strategy",
    "model_kind": "model.kind",
    "lr_init": "federation.lr_init",
    "magnitude": "dataset.magnitude",
}


def resolve_output(directory) -> Path:
    path = Path(directory)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# ---------------------------------------------------------------- persistence

def save_gradient_log(path, trace) -> None:
    ids = np.array([r.client_id for r in trace.reports[0]]) if trace.reports else np.zeros(0, int)
    np.savez(
        path,
        snapshots=np.stack([p.values for p in trace.snapshots]),
        updates=np.stack([np.stack([r.update for r in rs]) for rs in trace.reports]),
        weights=np.array([r.weight for r in trace.reports[0]]),
        client_ids=ids,
        lrs=np.array([m.lr for m in trace.metrics]),
        strategy=np.array(trace.config.strategy),
    )


def load_gradient_trace(path, spec: models.ModelSpec, fed: federation.FederationConfig):
    """Rebuild the parts of a trace an audit reads from a saved gradient log."""
    with np.load(path) as z:
        snapshots = [models.make_params(spec, v) for v in z["snapshots"]]
        updates, weights, ids, lrs = z["updates"], z["weights"], z["client_ids"], z["lrs"]
        strategy = str(z["strategy"])
    reports = [
        [GradientReport(int(c), t, updates[t, j], float(weights[j])) for j, c in enumerate(ids)]
        for t in range(updates.shape[0])
    ]
    metrics = [RoundMetrics(t, float("nan"), float("nan"), float("nan"), float(lr)) for t, lr in enumerate(lrs)]
    cfg = dataclasses.replace(fed, strategy=strategy)
    return federation.TrainingTrace(cfg, float("nan"), snapshots=snapshots, reports=reports, metrics=metrics)


def write_attack_report(out: Path, report: attacks.AttackReport, suffix: str = "") -> None:
    analysis.write_csv(out / f"attack_rounds{suffix}.csv", report.rows(), ["round", "auc", "asr"])
    analysis.write_csv(out / f"attack_summary{suffix}.csv", [report.summary()],
                       ["best_auc", "best_auc_round", "best_asr", "best_asr_round"])


def _pretrain_cached(exp, cache_dir: Path | None):
    if exp.federation.strategy == "ST" or cache_dir is None:
        return None
    full = exp.config.to_dict()
    key = {"dataset": full["dataset"], "model": full["model"],
           "seed": exp.federation.master_seed, "epochs": exp.federation.pretrain_epochs,
           "lr": exp.federation.pretrain_lr, "scale": exp.federation.init_scale}
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    path = cache_dir / f"pre-{digest}.ckpt"
    if path.exists():
        return models.load_params(path)[1]
    theta = federation.initial_params(exp.spec, exp.pair.source, exp.federation)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    models.save_params(tmp, exp.spec, theta)
    os.replace(tmp, path)
    return theta


# ------------------------------------------------------------------- commands

def cmd_run(cfg: ExperimentConfig, out_dir=None, pretrain_cache: Path | None = None) -> Path:
    """Train one configuration and write its experiment directory."""
    out = resolve_output(out_dir if out_dir is not None else cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    for marker in (DONE_MARKER, FAILED_MARKER):
        (out / marker).unlink(missing_ok=True)
    (out / CONFIG_FILE).write_text(cfg.dump())
    exp = build_experiment(cfg)
    try:
        init = _pretrain_cached(exp, pretrain_cache)
        trace = federation.run(exp.spec, exp.pair, exp.partition, exp.federation, exp.privacy, exp.test, init=init)
    except (TrainingError, BudgetViolation) as exc:
        if exc.trace is not None and exc.trace.metrics:
            analysis.write_metrics_csv(out / METRICS_FILE, exc.trace.metrics)
        (out / FAILED_MARKER).write_text(f"training: {exc}\n")
        raise

    analysis.write_metrics_csv(out / METRICS_FILE, trace.metrics)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    interval = cfg.output.checkpoint_interval
    for t, theta in enumerate(trace.snapshots):
        if t == len(trace.snapshots) - 1 or (interval and t % interval == 0):
            models.save_params(ckpt_dir / f"theta_{t:04d}.ckpt", exp.spec, theta)
    if trace.reports is not None:
        save_gradient_log(out / GRADIENT_LOG, trace)
    if cfg.attack.enabled:
        try:
            report = attacks.audit(trace, exp.split, exp.spec, exp.train, exp.test)
        except DPFLError as exc:
            (out / FAILED_MARKER).write_text(f"audit: {exc}\n")
            raise AuditError(str(exc)) from exc
        write_attack_report(out, report)
    (out / DONE_MARKER).write_text(cfg.cell_hash() + "\n")
    return out


def cmd_audit(directory, shuffle_seed: int | None = None) -> Path:
    out = Path(directory)
    log_path = out / GRADIENT_LOG
    if not log_path.exists():
        raise AuditError(
            f"{out} has no {GRADIENT_LOG}; rerun with output.retain_gradients=true"
        )
    cfg = parse_config(out / CONFIG_FILE)
    cfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, enabled=True))
    exp = build_experiment(cfg)
    trace = load_gradient_trace(log_path, exp.spec, exp.federation)
    report = attacks.audit(trace, exp.split, exp.spec, exp.train, exp.test, shuffle_seed=shuffle_seed)
    suffix = "" if shuffle_seed is None else f"_null{shuffle_seed}"
    write_attack_report(out, report, suffix)
    return out


def load_sweep(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot read sweep ({exc})") from exc
    unknown = sorted(set(raw) - {"base", "axes", "seeds", "cap", "output", "jobs"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown sweep key")
    return raw


def sweep_cells(sweep: dict) -> list[tuple[dict, ExperimentConfig]]:
    """Expand a sweep into (labels, config) cells, validating every cell."""
    base = sweep.get("base") or {}
    axes = sweep.get("axes") or {}
    seeds = sweep.get("seeds") or [0]
    cap = sweep.get("cap", 500)
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axes.{name}: expected a non-empty list")
    size = len(seeds) * int(np.prod([len(v) for v in axes.values()])) if axes else len(seeds)
    if size > cap:
        raise ConfigError(f"cap: sweep has {size} cells, cap is {cap}")
    names = list(axes)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        for seed in seeds:
            raw = json.loads(json.dumps(base))
            labels = {}
            for name, value in zip(names, combo):
                path = AXES.get(name, name)
                set_path(raw, path, value)
                if name == "model_kind":
                    set_path(raw, "model.hidden_dims", None)
                labels[name] = value
            set_path(raw, "federation.master_seed", seed)
            labels["seed"] = seed
            try:
                cfg = config_from_dict(raw)
            except ConfigError as exc:
                raise ConfigError(f"cell {labels}: {exc}") from exc
            cells.append((labels, cfg))
    return cells


def _run_cell(args):
    cfg_dict, cell_dir, cache = args
    cfg = config_from_dict(cfg_dict)
    try:
        cmd_run(cfg, cell_dir, Path(cache))
        return cell_dir, None
    except DPFLError as exc:
        return cell_dir, str(exc)


def cmd_sweep(sweep: dict, root=None, jobs: int | None = None) -> Path:
    """Run every cell of a sweep (skipping finished ones) and write summary tables."""
    root = resolve_output(root or sweep.get("output", "runs/sweep"))
    root.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(sweep)
    todo = []
    for labels, cfg in cells:
        cell_dir = root / "cells" / cfg.cell_hash()
        if (cell_dir / DONE_MARKER).exists():
            continue
        todo.append((cfg.to_dict(), str(cell_dir), str(root / "pretrained")))
    jobs = jobs or sweep.get("jobs", 1)
    if jobs > 1 and len(todo) > 1:
        with concurrent.futures.ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_cell, todo))
    else:
        results = [_run_cell(a) for a in todo]
    for cell_dir, err in results:
        if err:
            log.warning("cell %s failed: %s", cell_dir, err)

    axis_names = list((sweep.get("axes") or {}).keys())
    traces, reports, done, failed = [], [], [], []
    for labels, cfg in cells:
        cell_dir = root / "cells" / cfg.cell_hash()
        full = _cell_labels(cfg, labels)
        if not (cell_dir / DONE_MARKER).exists():
            failed.append({**full, "cell": cfg.cell_hash(), "status": "failed"})
            continue
        rows = analysis.read_csv(cell_dir / METRICS_FILE)
        metrics = [RoundMetrics(int(r["round"]), float(r["acc"]), float(r["loss"]),
                                float(r["sigma"]), float(r["lr"])) for r in rows]
        traces.append(SimpleNamespace(labels=full, metrics=metrics))
        done.append(cfg.cell_hash())
        summary = cell_dir / "attack_summary.csv"
        if summary.exists():
            s = analysis.read_csv(summary)[0]
            reports.append(SimpleNamespace(best_auc=float(s["best_auc"]), best_asr=float(s["best_asr"])))
        else:
            reports.append(None)
    rows = analysis.summarize(traces, reports) if traces else []
    for r, cell in zip(rows, done):
        r["cell"] = cell
        r["status"] = "ok"
    rows.extend(failed)
    columns = [*analysis.SWEEP_KEYS, "strategy", "cell", "status", "best_acc", "final_acc",
               "best_auc", "best_asr", "delta_ht_ft", "ht_beats_ft", "rel_acc_vs_st",
               "rel_auc_vs_st", "rel_asr_vs_st"]
    analysis.write_csv(root / "summary.csv", rows, columns)
    ok_rows = [r for r in rows if r.get("status") == "ok"]
    for axis in axis_names:
        if axis not in analysis.SWEEP_KEYS:
            continue
        for value in ("best_acc", "best_auc", "best_asr"):
            table = analysis.trend_table(ok_rows, axis, value)
            if table:
                analysis.write_csv(root / f"trend_{axis}_{value}.csv", table)
    return root


def _cell_labels(cfg: ExperimentConfig, labels: dict) -> dict:
    return {
        "dataset": f"{cfg.dataset.kind}:{cfg.dataset.shift_kind}:{cfg.dataset.magnitude}",
        "model_kind": cfg.model.kind,
        "epsilon": cfg.privacy.epsilon,
        "total_rounds": cfg.federation.total_rounds,
        "num_clients": cfg.federation.num_clients,
        "alpha": cfg.federation.alpha,
        "seed": cfg.federation.master_seed,
        "strategy": cfg.federation.strategy,
    }


def cmd_domain_gap(configs, out_dir, magnitudes=None) -> Path:
    """LDA projections of source and target sets plus a gap table.

    With ``magnitudes`` the first config's shift magnitude is swept and one
    gap per magnitude is reported.
    """
    out = resolve_output(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, names = [], []
    for i, cfg in enumerate(configs):
        seed = cfg.dataset.seed if cfg.dataset.seed is not None else 0
        pair, _ = build_transfer(cfg.dataset, seed)
        datasets += [pair.source, pair.target]
        names += [f"d{i}_source", f"d{i}_target"]
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise DPFLError(f"datasets have different feature dimensions {sorted(dims)}")
    gap = analysis.lda_project(datasets)
    for name, proj in zip(names, gap.projections):
        analysis.write_csv(out / f"projection_{name}.csv",
                           [{"lda1": float(a), "lda2": float(b)} for a, b in proj], ["lda1", "lda2"])
    rows = [{"a": names[i], "b": names[j], "gap": float(gap.pairwise[i, j])}
            for i in range(len(names)) for j in range(i + 1, len(names))]
    analysis.write_csv(out / "gap.csv", rows, ["a", "b", "gap"])
    if magnitudes:
        cfg = configs[0]
        seed = cfg.dataset.seed if cfg.dataset.seed is not None else 0
        sweep_rows = []
        for m in magnitudes:
            pair, _ = build_transfer(cfg.dataset, seed, magnitude=m)
            sweep_rows.append({"magnitude": float(m),
                               "gap": analysis.lda_project([pair.source, pair.target]).gap_statistic})
        analysis.write_csv(out / "gap_vs_magnitude.csv", sweep_rows, ["magnitude", "gap"])
    return out


def cmd_partition_inspect(cfg: ExperimentConfig, out=sys.stdout) -> list[dict]:
    exp = build_experiment(cfg)
    labels = exp.train.labels
    k = exp.train.num_classes
    rows = []
    for n, idx in enumerate(exp.partition.assignments):
        counts = np.bincount(labels[idx], minlength=k)
        rows.append({"client": n, "size": int(idx.size), **{f"class{c}": int(v) for c, v in enumerate(counts)}})
    w = out.write
    w("client  size  " + " ".join(f"c{c:>4d}" for c in range(k)) + "\n")
    for r in rows:
        w(f"{r['client']:>6d}  {r['size']:>4d}  " + " ".join(f"{r[f'class{c}']:>5d}" for c in range(k)) + "\n")
    return rows


# ------------------------------------------------------------------- argparse

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfl", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("config", nargs="?")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out")

    s = sub.add_parser("sweep", help="run a grid of configurations")
    s.add_argument("sweep")
    s.add_argument("--jobs", type=int)
    s.add_argument("--out")

    a = sub.add_parser("audit", help="run MIA/SIA over a saved experiment")
    a.add_argument("directory")
    a.add_argument("--shuffle-seed", type=int)

    d = sub.add_parser("domain-gap", help="LDA domain gap between source and target data")
    d.add_argument("configs", nargs="+")
    d.add_argument("--magnitudes", type=float, nargs="*")
    d.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    d.add_argument("--out", required=True)

    i = sub.add_parser("partition-inspect", help="print per-client class counts")
    i.add_argument("config", nargs="?")
    i.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return p


def _load(path, overrides) -> ExperimentConfig:
    cfg = parse_config(path) if path else config_from_dict({})
    return apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            out = cmd_run(_load(args.config, args.overrides), args.out)
            print(out)
        elif args.command == "sweep":
            print(cmd_sweep(load_sweep(args.sweep), args.out, args.jobs))
        elif args.command == "audit":
            print(cmd_audit(args.directory, args.shuffle_seed))
        elif args.command == "domain-gap":
            cfgs = [_load(c, args.overrides) for c in args.configs]
            print(cmd_domain_gap(cfgs, args.out, args.magnitudes))
        elif args.command == "partition-inspect":
            cmd_partition_inspect(_load(args.config, args.overrides))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, BudgetViolation) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except AuditError as exc:
        print(f"audit failed: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except DPFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
