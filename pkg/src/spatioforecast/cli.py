"""Command-line orchestration: ingest -> folds -> train -> evaluate -> analyze -> report.

Every subcommand reads one declarative config. Exit codes: 0 success,
1 run-level failure (a training leg failed or was refused, missing runs),
2 config or data errors. Output artifacts are pure functions of the run
directory, with stable ordering and float repr, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np

from . import analysis, data, evaluation, graph, model, training
from .config import ConfigError, ExperimentConfig, load_config


@dataclass(frozen=True)
class TaskSpec:
    channels: str
    variant: str
    horizon: int
    fold: int | str
    seed: int

    def named(self, T: int) -> str:
        return f"{self.channels}_{self.variant}_T{T}F{self.horizon}_fold{self.fold}_seed{self.seed}"


def _tasks(cfg: ExperimentConfig, seeds: tuple[int, ...]) -> list[TaskSpec]:
    tasks = []
    for variant in cfg.variants:
        for horizon in cfg.horizons:
            for fold in cfg.folds:
                for seed in seeds:
                    tasks.append(TaskSpec(cfg.channels, variant, horizon, fold, seed))
    return tasks


def _panel_path(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "panel.csv"


def _runs_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "runs"


def _load_panel(cfg: ExperimentConfig) -> data.NormalizedPanel:
    path = _panel_path(cfg)
    if not path.exists():
        raise ConfigError(f"panel file not found (run `ingest` first): {path}")
    return data.read_panel_csv(path)


def _geo_for(cfg: ExperimentConfig, region_table: data.RegionTable) -> graph.GeoAdjacency:
    dist = graph.haversine_matrix(region_table.latitudes, region_table.longitudes)
    return graph.gaussian_kernel_adjacency(dist, sigma=cfg.geo_sigma, kappa=cfg.geo_kappa)


def _adjacency_options(cfg: ExperimentConfig) -> graph.AdjacencyOptions:
    return graph.AdjacencyOptions(set_diag=cfg.set_diag, undirected=cfg.undirected,
                                  truncate=cfg.truncate, threshold=cfg.threshold)


# ---------------------------------------------------------------------------
# ingest / folds
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: ExperimentConfig) -> int:
    region_table = data.load_region_table(cfg.region_table)
    panel = data.load_panel(cfg.channel_paths, region_table)
    complete, events = data.impute(panel)
    normalized = data.normalize_per_capita(complete, region_table)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    data.write_panel_csv(normalized, _panel_path(cfg))
    log_path = cfg.output_dir / "imputation_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "channel", "date", "kind"])
        for e in events:
            writer.writerow([e.region_id, e.channel, e.day.isoformat(), e.kind])
    print(f"panel: {normalized.n_regions} regions x {normalized.n_days} days x "
          f"{len(normalized.channels)} channels; {len(events)} imputation log entries")
    print(f"wrote {_panel_path(cfg)} and {log_path}")
    return 0


def cmd_folds(cfg: ExperimentConfig) -> int:
    panel = _load_panel(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    for horizon in cfg.horizons:
        samples = data.make_windows(panel, cfg.T, horizon)
        folds = data.progressive_folds(len(samples), K=cfg.n_folds, final_frac=cfg.final_frac)
        payload = {
            "T": cfg.T, "horizon": horizon, "n_samples": len(samples),
            "splits": [{"fold": str(f.fold),
                        "train": [f.train.start, f.train.stop],
                        "val": [f.val.start, f.val.stop],
                        "test": [f.test.start, f.test.stop]} for f in folds],
        }
        path = cfg.output_dir / f"folds_T{cfg.T}_F{horizon}.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(f"wrote {path} ({len(samples)} samples)")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_one(cfg: ExperimentConfig, task: TaskSpec, panel: data.NormalizedPanel,
               region_table: data.RegionTable, run_dir: Path) -> dict:
    samples = data.make_windows(panel, cfg.T, task.horizon)
    folds = data.progressive_folds(len(samples), K=cfg.n_folds, final_frac=cfg.final_frac)
    fold = next(f for f in folds if str(f.fold) == str(task.fold))
    model_config = model.ModelConfig(
        variant=task.variant, n_regions=panel.n_regions, T=cfg.T, F=task.horizon,
        C=len(panel.channels), D=cfg.D, heads=cfg.heads, L=cfg.L, K=cfg.K)
    train_config = training.TrainConfig(
        max_steps=cfg.max_steps, peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps,
        batch_size=cfg.batch_size, seeds=(task.seed,), patience=cfg.patience,
        loss_kind=cfg.loss_kind, eval_every=cfg.eval_every)
    geo = _geo_for(cfg, region_table) if model_config.uses_geo else None
    options = _adjacency_options(cfg)
    best, history = training.train(train_config, model_config, fold, samples, geo,
                                   seed=task.seed, adjacency_options=options)
    X_test, Y_test = data.stack_windows(samples, fold.test)
    test_mae, test_rmse = training.evaluate_incidence(model_config, best, X_test, Y_test,
                                                      geo, options)
    # per-site means answer the pooling open question alongside the pooled metric
    site_maes, site_rmses = [], []
    for n in range(panel.n_regions):
        pred_rows = []
        for lo in range(0, X_test.shape[0], 256):
            p, _ = model.forward_batch(model_config, best, X_test[lo:lo + 256], geo,
                                       adjacency_options=options)
            pred_rows.append(p.data[:, n, :, 0])
        err = np.concatenate(pred_rows, axis=0) - Y_test[:, n, :, 0]
        site_maes.append(float(np.abs(err).mean()))
        site_rmses.append(float(np.sqrt((err ** 2).mean())))
    run_dir.mkdir(parents=True, exist_ok=True)
    history.write_csv(run_dir / "history.csv")
    ckpt = run_dir / f"ckpt-{history.best_step}.npz"
    training.save_checkpoint(ckpt, best, meta={"run_id": task.named(cfg.T),
                                               "config_hash": cfg.hash()})
    if model_config.uses_adp:
        snap_dir = run_dir / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for offset, idx in enumerate(fold.test):
            _, snaps = model.forward_batch(model_config, best, X_test[offset:offset + 1],
                                           geo, adjacency_options=options)
            day = samples[idx].start_date.isoformat()
            for l, snap in enumerate(snaps):
                graph.write_snapshot(snap_dir / f"b{l}_{day}.csv", snap[0], l, day)
    return {
        "run_id": task.named(cfg.T), "config_hash": cfg.hash(), "status": "completed",
        "channels": task.channels, "variant": task.variant, "horizon": task.horizon,
        "fold": str(task.fold), "seed": task.seed,
        "best_step": history.best_step, "val_mae": history.best_val_mae,
        "test_mae": test_mae, "test_rmse": test_rmse,
        "test_mae_sitewise": float(np.mean(site_maes)),
        "test_rmse_sitewise": float(np.mean(site_rmses)),
        "train_config": {"max_steps": cfg.max_steps, "peak_lr": cfg.peak_lr,
                         "warmup_steps": cfg.warmup_steps, "batch_size": cfg.batch_size,
                         "eval_every": cfg.eval_every, "patience": cfg.patience,
                         "loss": cfg.loss_kind},
    }


def cmd_train(cfg: ExperimentConfig, jobs: int = 1, force: bool = False,
              seed_list: tuple[int, ...] | None = None) -> int:
    panel = _load_panel(cfg)
    region_table = data.load_region_table(cfg.region_table)
    seeds = seed_list if seed_list is not None else cfg.seeds
    tasks = _tasks(cfg, seeds)
    refused, to_run = [], []
    for task in tasks:
        run_dir = _runs_dir(cfg) / task.named(cfg.T)
        manifest = run_dir / "manifest.json"
        if manifest.exists() and not force:
            recorded = json.loads(manifest.read_text(encoding="utf-8"))
            if recorded.get("config_hash") == cfg.hash() and recorded.get("status") == "completed":
                refused.append(task.named(cfg.T))
                continue
        to_run.append((task, run_dir))

    failures = []

    def runner(item):
        task, run_dir = item
        try:
            manifest = _train_one(cfg, task, panel, region_table, run_dir)
        except Exception as exc:
            run_dir.mkdir(parents=True, exist_ok=True)
            manifest = {"run_id": task.named(cfg.T), "config_hash": cfg.hash(),
                        "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            failures.append((task.named(cfg.T), exc))
        (run_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest

    if jobs > 1 and len(to_run) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(runner, to_run))
    else:
        for item in to_run:
            runner(item)

    for run_id in refused:
        print(f"refusing to redo completed run {run_id} (same config hash); use --force", file=sys.stderr)
    for run_id, exc in failures:
        print(f"run {run_id} failed: {exc}", file=sys.stderr)
    print(f"trained {len(to_run) - len(failures)}/{len(tasks)} runs "
          f"({len(refused)} refused, {len(failures)} failed)")
    return 1 if (failures or refused) else 0


# ---------------------------------------------------------------------------
# evaluate / analyze / report
# ---------------------------------------------------------------------------

def _completed_manifests(cfg: ExperimentConfig) -> list[dict]:
    runs = sorted(_runs_dir(cfg).glob("*/manifest.json")) if _runs_dir(cfg).exists() else []
    manifests = []
    for path in runs:
        m = json.loads(path.read_text(encoding="utf-8"))
        if m.get("status") == "completed":
            manifests.append(m)
    return manifests


def _records(manifests: list[dict]) -> list[evaluation.MetricRecord]:
    recs = []
    for m in manifests:
        recs.append(evaluation.MetricRecord(
            region_set="all", fold=m["fold"], horizon=int(m["horizon"]),
            variant=m["variant"], channels=m["channels"], seed=int(m["seed"]),
            mae=float(m["test_mae"]), rmse=float(m["test_rmse"])))
    return recs


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    manifests = _completed_manifests(cfg)
    if not manifests:
        print("no completed runs found", file=sys.stderr)
        return 1
    expected = {t.named(cfg.T) for t in _tasks(cfg, cfg.seeds)}
    present = {m["run_id"] for m in manifests}
    missing = sorted(expected - present)
    if missing:
        print("missing runs: " + ", ".join(missing), file=sys.stderr)
        return 1
    recs = sorted(_records(manifests),
                  key=lambda r: (r.channels, r.variant, r.horizon, r.fold, r.seed))
    rows = [[r.region_set, r.fold, r.horizon, r.variant, r.channels, r.seed, r.mae, r.rmse]
            for r in recs]
    _write_csv(cfg.output_dir / "tables" / "metrics.csv",
               ["region_set", "fold", "horizon", "variant", "channels", "seed", "mae", "rmse"],
               rows)
    print(f"wrote {cfg.output_dir / 'tables' / 'metrics.csv'} ({len(rows)} rows)")
    return 0


def _ttest_rows(recs: list[evaluation.MetricRecord], label_of, pairs) -> list[list]:
    by_label: dict[str, list[evaluation.MetricRecord]] = {}
    for r in recs:
        by_label.setdefault(label_of(r), []).append(r)
    rows = []
    for a, b in pairs:
        if a not in by_label or b not in by_label:
            continue
        ra, rb = by_label[a], by_label[b]
        row = [f"{a} vs. {b}", len(ra), len(rb)]
        for metric in ("mae", "rmse"):
            va = [getattr(r, metric) for r in ra]
            vb = [getattr(r, metric) for r in rb]
            try:
                row.append(evaluation.t_test(va, vb, "one_less").p)
            except (ValueError, evaluation.DegenerateVarianceError):
                row.append("")
        rows.append(row)
    return rows


def cmd_analyze(cfg: ExperimentConfig) -> int:
    manifests = _completed_manifests(cfg)
    adp_runs = [m for m in manifests if m["variant"] in ("TransAdp", "TransGCNAdp")]
    tables = cfg.output_dir / "tables"
    heatmaps = cfg.output_dir / "heatmaps"
    heatmaps.mkdir(parents=True, exist_ok=True)
    region_table = data.load_region_table(cfg.region_table)

    geo = _geo_for(cfg, region_table)
    analysis.heatmap_export(geo.matrix, heatmaps / "geo.svg", labels=region_table.ids)

    vote_rows, weight_rows, lockdown_rows = [], [], []
    windows = (analysis.load_lockdown_windows(cfg.lockdown_windows)
               if cfg.lockdown_windows else [])
    by_variant: dict[str, list[np.ndarray]] = {}
    for m in sorted(adp_runs, key=lambda m: m["run_id"]):
        snap_dir = _runs_dir(cfg) / m["run_id"] / "snapshots"
        files = sorted(snap_dir.glob(f"b{cfg.L - 1}_*.csv"))
        if not files:
            continue
        by_date = {}
        for path in files:
            matrix, _, start = graph.read_snapshot(path)
            by_date[date.fromisoformat(start)] = matrix
        snaps = [by_date[d] for d in sorted(by_date)]
        by_variant.setdefault(m["variant"], []).extend(snaps)
        weight_rows.append([m["run_id"], analysis.avg_nonzero_weight(snaps)])
        analysis.heatmap_export(np.mean(snaps, axis=0), heatmaps / f"{m['run_id']}_mean.svg",
                                labels=region_table.ids)
        for w in windows:
            for row in analysis.lockdown_indicator_table(by_date, [w],
                                                         pre_days=cfg.pre_days,
                                                         post_days=cfg.post_days):
                lockdown_rows.append([m["run_id"], row.region_id, row.start.isoformat(),
                                      row.end.isoformat(), row.during, row.pre_average,
                                      row.pre_first, row.post_average, row.post_last,
                                      int(row.partial)])
    for variant in sorted(by_variant):
        mins, maxs = analysis.connectivity_votes(by_variant[variant])
        for ri, region in enumerate(region_table.ids):
            vote_rows.append([variant, region, int(mins[ri]), int(maxs[ri])])
    _write_csv(tables / "connectivity_votes.csv",
               ["variant", "region", "min_votes", "max_votes"], vote_rows)
    _write_csv(tables / "avg_nonzero_weight.csv", ["run_id", "avg_weight"], weight_rows)
    _write_csv(tables / "lockdown_indicator.csv",
               ["run_id", "region", "start", "end", "during", "pre_average", "pre_first",
                "post_average", "post_last", "partial"], lockdown_rows)
    print(f"analyzed {len(adp_runs)} Adp runs -> {tables}")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    code = cmd_evaluate(cfg)
    if code:
        return code
    manifests = _completed_manifests(cfg)
    recs = sorted(_records(manifests),
                  key=lambda r: (r.channels, r.variant, r.horizon, r.fold, r.seed))
    tables = cfg.output_dir / "tables"

    groups = evaluation.group_aggregate(
        recs, key=lambda r: (r.channels, r.variant, r.horizon, r.fold))
    agg_rows = [[*k, g["n"], g["mae_mean"], g["mae_std"], g["rmse_mean"], g["rmse_std"]]
                for k, g in sorted(groups.items())]
    _write_csv(tables / "metrics_aggregate.csv",
               ["channels", "variant", "horizon", "fold", "n",
                "mae_mean", "mae_std", "rmse_mean", "rmse_std"], agg_rows)

    channel_sets = sorted({r.channels for r in recs})
    pairs = [(a, b) for a in channel_sets for b in channel_sets if a != b]
    _write_csv(tables / "ttest_channels.csv",
               ["comparison", "n_a", "n_b", "p_mae", "p_rmse"],
               _ttest_rows(recs, lambda r: r.channels, pairs))

    variants = sorted({r.variant for r in recs})
    vpairs = [(v, "Trans") for v in variants if v != "Trans" and "Trans" in variants]
    _write_csv(tables / "ttest_variants.csv",
               ["comparison", "n_a", "n_b", "p_mae", "p_rmse"],
               _ttest_rows(recs, lambda r: r.variant, vpairs))

    pooling_rows = []
    for m in sorted(manifests, key=lambda m: m["run_id"]):
        pooling_rows.append([m["run_id"], float(m["test_mae"]), float(m["test_mae_sitewise"]),
                             float(m["test_rmse"]), float(m["test_rmse_sitewise"])])
    _write_csv(tables / "metric_pooling.csv",
               ["run_id", "mae_pooled", "mae_sitewise_mean", "rmse_pooled", "rmse_sitewise_mean"],
               pooling_rows)

    return cmd_analyze(cfg)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parse_seed_list(raw: str | None) -> tuple[int, ...] | None:
    if raw is None:
        return None
    return tuple(int(x) for x in raw.split(",") if x.strip())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="spatioforecast",
                                     description="spatiotemporal forecasting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "folds", "train", "evaluate", "analyze", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if name == "train":
            p.add_argument("--jobs", type=int, default=1)
            p.add_argument("--force", action="store_true")
            p.add_argument("--seed-list", default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg.validate()
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "folds":
            return cmd_folds(cfg)
        if args.command == "train":
            return cmd_train(cfg, jobs=args.jobs, force=args.force,
                             seed_list=_parse_seed_list(args.seed_list))
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        if args.command == "report":
            return cmd_report(cfg)
        raise AssertionError(args.command)
    except (ConfigError, data.PanelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
