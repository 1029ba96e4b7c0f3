"""Command line entry point: ``confusion <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Run layout under ``--out``::

    config.txt                      resolved configuration
    data/dataset.mzds (+ .json)     random-exploration transitions
    train/ckpt_eNNNN.wmck (+ .json) reference checkpoints, loss.csv
    sweep/eNNNN_sK/                 history.csv, snap_NNNNN.wmck, best.wmck, run.json
    sweep/summary.csv, sweep.json   epoch x seed table
    oracle/report.csv
    analysis/                       images, ratio tables, analysis.json

Set ``CONFUSION_LOG=DEBUG`` (or INFO, WARNING) for more or less logging.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig, derive_seed, parse_config, preset
from .maze import MAZES, collect_dataset, load_dataset, save_dataset
from .oracle import certification_report, write_report
from .policies import build_policy_pair
from .search import PolicyOrderError, SearchDiverged, certify, read_history, search, time_to_first_feasible
from .world_model import TrainingError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("confusion")

EXIT_FAIL = 1
EXIT_USAGE = 2


class RunError(RuntimeError):
    """A stage cannot run with the artifacts present in the run directory."""


# ---------------------------------------------------------------------------
# paths and stamps

def _ckpt_path(out: Path, epoch: int) -> Path:
    return out / "train" / f"ckpt_e{epoch:04d}.wmck"


def _cell_dir(out: Path, epoch: int, seed_index: int) -> Path:
    return out / "sweep" / f"e{epoch:04d}_s{seed_index}"


def _stamp(cfg: RunConfig) -> str:
    return f"config {cfg.hash()}"


def _check_hash(path: Path, cfg: RunConfig) -> dict:
    if not path.exists():
        raise RunError(f"missing {path}")
    meta = analysis.read_json(path)
    if meta.get("config_hash") != cfg.hash():
        raise RunError(f"{path} was written with config {meta.get('config_hash')}, current is {cfg.hash()}")
    return meta


def _policies(cfg: RunConfig):
    return build_policy_pair(sigma=cfg.policy_sigma, kp=cfg.kp, kd=cfg.kd)


def _maze(cfg: RunConfig):
    return MAZES[cfg.maze]()


def write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# {_stamp(cfg)}\n" + cfg.to_text())


# ---------------------------------------------------------------------------
# stages

def cmd_collect(cfg: RunConfig, out: Path) -> Path:
    path = out / "data" / "dataset.mzds"
    path.parent.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "collect")
    data = collect_dataset(_maze(cfg), np.random.default_rng(seed), cfg.trajectories, cfg.traj_len,
                           cfg.repeat_max, cfg.physics())
    save_dataset(path, data)
    analysis.write_json(path.with_suffix(".json"), {
        "config_hash": cfg.hash(), "count": int(len(data)), "seed": seed,
        "trajectories": cfg.trajectories, "traj_len": cfg.traj_len})
    log.info("collected %d transitions -> %s", len(data), path)
    return path


def cmd_train(cfg: RunConfig, out: Path, dataset: Path | None = None) -> list:
    dataset = Path(dataset) if dataset else out / "data" / "dataset.mzds"
    data = load_dataset(dataset)
    tdir = out / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "train")
    written = []

    def on_checkpoint(epoch, model):
        path = _ckpt_path(out, epoch)
        save_checkpoint(path, model)
        analysis.write_json(path.with_suffix(".json"), {"config_hash": cfg.hash(), "epoch": epoch, "seed": seed})
        written.append(path)
        log.info("checkpoint epoch %d -> %s", epoch, path)

    result = train(data, cfg.train_config(seed), on_checkpoint)
    with open(tdir / "loss.csv", "w") as fh:
        fh.write(f"# {_stamp(cfg)}\nepoch,loss,recon,kl\n")
        for epoch, loss, recon, kl in result.loss_log:
            fh.write(f"{epoch},{loss!r},{recon!r},{kl!r}\n")
    return written


def cmd_search(cfg: RunConfig, out: Path, epoch: int, seed_index: int = 0,
               checkpoint: Path | None = None, require_order: bool | None = None) -> dict:
    """Search one reference checkpoint; writes history, snapshots and ``run.json``."""
    checkpoint = Path(checkpoint) if checkpoint else _ckpt_path(out, epoch)
    if checkpoint.with_suffix(".json").exists():
        _check_hash(checkpoint.with_suffix(".json"), cfg)
    reference, _ = load_checkpoint(checkpoint)
    cell = _cell_dir(out, epoch, seed_index)
    cell.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "search", seed_index)
    scfg = cfg.search_config(seed)
    pi_star, pi_sub = _policies(cfg)
    order = cfg.require_order if require_order is None else require_order
    t0 = time.perf_counter()
    result = search(reference, pi_star, pi_sub, scfg, maze=_maze(cfg), require_order=order)
    elapsed = time.perf_counter() - t0
    hist = result.state.history
    analysis.emit_metrics(hist, cell / "history.csv", _stamp(cfg))
    for it, psi in result.snapshots:
        save_checkpoint(cell / f"snap_{it:05d}.wmck", reference.with_arrays(**psi), iteration=it)
    summary = {"config_hash": cfg.hash(), "epoch": epoch, "seed_index": seed_index, "seed": seed,
               "checkpoint": checkpoint.name, "k_best": result.k_best, "k_episode": result.k_episode,
               "time_to_first_feasible": time_to_first_feasible(hist),
               "best_iteration": result.state.best_iteration, "final_lambda": result.state.lam,
               "snapshots": [it for it, _ in result.snapshots]}
    if result.state.best_psi is not None:
        best = reference.with_arrays(**result.state.best_psi)
        save_checkpoint(cell / "best.wmck", best, iteration=result.state.best_iteration)
        summary["certificate"] = certify(reference, result.state.best_psi, pi_star, pi_sub, scfg,
                                         result.k_best, derive_seed(cfg.seed, f"certify.e{epoch}", seed_index),
                                         maze=_maze(cfg))
    analysis.write_json(cell / "run.json", summary)
    log.info("search e%d s%d: K_best=%.4g ttf=%s (%.0fs)", epoch, seed_index, result.k_best,
             summary["time_to_first_feasible"], elapsed)
    return summary


def _sweep_cell(args):
    cfg, out, epoch, seed_index = args
    return cmd_search(cfg, out, epoch, seed_index)


def spearman_epoch_ttf(rows, iterations: int) -> float:
    """Rank correlation between epoch and time to first feasibility.

    A search that never became feasible is ranked as ``iterations + 1``.
    """
    from scipy.stats import spearmanr

    epochs = [r["epoch"] for r in rows]
    ttf = [r["time_to_first_feasible"] if r["time_to_first_feasible"] is not None else iterations + 1
           for r in rows]
    if len(set(epochs)) < 2 or len(set(ttf)) < 2:
        return float("nan")
    return float(spearmanr(epochs, ttf).statistic)


def cmd_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> list:
    todo = []
    for epoch in cfg.checkpoints:
        if not _ckpt_path(out, epoch).exists():
            raise RunError(f"missing checkpoint for epoch {epoch}; run 'train' first")
        for s in range(cfg.search_seeds):
            run = _cell_dir(out, epoch, s) / "run.json"
            if run.exists() and analysis.read_json(run).get("config_hash") == cfg.hash():
                log.info("sweep cell e%d s%d done; skipping", epoch, s)
                continue
            todo.append((cfg, out, epoch, s))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_sweep_cell, todo))
    else:
        for item in todo:
            _sweep_cell(item)

    rows = []
    for epoch in cfg.checkpoints:
        for s in range(cfg.search_seeds):
            cell = _cell_dir(out, epoch, s)
            meta = _check_hash(cell / "run.json", cfg)
            hist = read_history(cell / "history.csv")
            k_best = float("inf") if meta["k_best"] is None else float(meta["k_best"])
            rows.append(analysis.summary_row(epoch, s, hist, k_best, meta["best_iteration"]))
    rho = spearman_epoch_ttf(rows, cfg.iterations)
    table = [dict(r, spearman_rho=rho) for r in rows]
    analysis.write_summary(table, out / "sweep" / "summary.csv", _stamp(cfg), extra_columns=("spearman_rho",))
    means = {}
    for epoch in cfg.checkpoints:
        ks = [r["k_best"] for r in rows if r["epoch"] == epoch]
        means[epoch] = float(np.mean(ks))
    analysis.write_json(out / "sweep" / "sweep.json", {
        "config_hash": cfg.hash(), "seed": cfg.seed, "spearman_rho": rho,
        "k_best_mean": {str(e): m for e, m in means.items()},
        "k_best": {f"{r['epoch']}/{r['seed']}": r["k_best"] for r in rows},
        "time_to_first_feasible": {f"{r['epoch']}/{r['seed']}": r["time_to_first_feasible"] for r in rows}})
    log.info("sweep: spearman(epoch, ttf) = %.3f; mean K_best %s", rho, means)
    return rows


def cmd_oracle(cfg: RunConfig, out: Path) -> bool:
    odir = out / "oracle"
    odir.mkdir(parents=True, exist_ok=True)
    rows = certification_report(cfg.oracle_problems, derive_seed(cfg.seed, "oracle"), cfg.oracle_iterations,
                                cfg.oracle_lr, cfg.oracle_resolution, cfg.oracle_tol)
    write_report(odir / "report.csv", rows, _stamp(cfg))
    failed = [r["problem"] for r in rows if not r["pass"]]
    if failed:
        log.error("oracle: %d problem(s) missed the analytic value: %s", len(failed), failed)
    else:
        log.info("oracle: all %d problems within %.0e", len(rows), cfg.oracle_tol)
    return not failed


def _best_cell(cfg: RunConfig, out: Path, epoch: int):
    """Sweep cell with the smallest feasible K_best for ``epoch`` (seed 0 if none is feasible)."""
    metas = [(_cell_dir(out, epoch, s), _check_hash(_cell_dir(out, epoch, s) / "run.json", cfg))
             for s in range(cfg.search_seeds)]
    feasible = [m for m in metas if m[1]["k_best"] is not None]
    return min(feasible, key=lambda m: m[1]["k_best"]) if feasible else metas[0]


def cmd_analyze(cfg: RunConfig, out: Path) -> dict:
    """Densities, log-density ratios and trajectory images for every swept checkpoint."""
    adir = out / "analysis"
    adir.mkdir(parents=True, exist_ok=True)
    maze = _maze(cfg)
    pi_star, pi_sub = _policies(cfg)
    stamp = _stamp(cfg)
    report = {"config_hash": cfg.hash(), "epochs": {}}
    density_seed = derive_seed(cfg.seed, "analysis.density")
    for epoch in cfg.checkpoints:
        _check_hash(_ckpt_path(out, epoch).with_suffix(".json"), cfg)
        reference, _ = load_checkpoint(_ckpt_path(out, epoch))
        cell, meta = _best_cell(cfg, out, epoch)
        snaps = sorted(cell.glob("snap_*.wmck"))
        if not snaps:
            raise RunError(f"{cell} has no snapshots; run 'sweep' first")
        entry = {"seed_index": meta["seed_index"], "k_best": meta["k_best"],
                 "time_to_first_feasible": meta["time_to_first_feasible"]}

        snapshots = []
        for p in snaps:
            model, it = load_checkpoint(p)
            snapshots.append((it, model.subset("dyn")))
        rng = np.random.default_rng(derive_seed(cfg.seed, "analysis.snapshots", epoch))
        bundles = analysis.trajectory_snapshots(reference, snapshots, pi_star, pi_sub, cfg.horizon, rng,
                                                cfg.snapshot_rollouts, maze)
        for b in bundles:
            analysis.emit_trajectory_image(b, adir / f"traj_e{epoch:04d}_i{b['iteration']:05d}.ppm", maze,
                                           comment=stamp)
        entry["snapshot_iterations"] = [b["iteration"] for b in bundles]
        entry["goal_rate_sub_iter0"] = float(analysis.reaches_goal(bundles[0]["pi_sub"], maze).mean())

        ref = analysis.visitation_density(reference, None, cfg.density_episodes, cfg.density_steps,
                                          np.random.default_rng(density_seed), cfg.bins, maze)
        analysis.emit_heatmap(ref.bins, adir / f"density_ref_e{epoch:04d}.ppm", "sequential", comment=stamp)
        best = cell / "best.wmck"
        if best.exists():
            conf_model, _ = load_checkpoint(best)
            conf = analysis.visitation_density(reference, conf_model.subset("dyn"), cfg.density_episodes,
                                               cfg.density_steps, np.random.default_rng(density_seed), cfg.bins,
                                               maze)
            ratio = analysis.log_density_ratio(ref, conf, cfg.ratio_floor)
            analysis.emit_heatmap(conf.bins, adir / f"density_conf_e{epoch:04d}.ppm", "sequential", comment=stamp)
            analysis.emit_heatmap(ratio, adir / f"ratio_e{epoch:04d}.ppm", "diverging", comment=stamp)
            np.savetxt(adir / f"ratio_e{epoch:04d}.csv", ratio, delimiter=",", fmt="%.17g",
                       header=stamp + " rows=x bins, cols=y bins")
            entry.update(analysis.localization_stats(ratio, maze))
        else:
            log.warning("epoch %d: no feasible instance found; skipping ratio", epoch)
        report["epochs"][str(epoch)] = entry
    analysis.write_json(adir / "analysis.json", report)
    return report


def cmd_pipeline(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    write_config(cfg, out)
    cmd_collect(cfg, out)
    cmd_train(cfg, out)
    cmd_sweep(cfg, out, jobs)
    return cmd_analyze(cfg, out)


# ---------------------------------------------------------------------------
# argument handling

def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset) if args.preset else RunConfig()
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), cfg)
    for item in args.set or []:
        key, _, raw = item.partition("=")
        cfg = parse_config(f"{key} = {raw}", cfg)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", choices=["full", "desk"], help="start from a named preset")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")

    ap = argparse.ArgumentParser(prog="confusion", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common], help="collect random-exploration transitions")
    p = sub.add_parser("train", parents=[common], help="train the world model and write checkpoints")
    p.add_argument("--dataset", help="dataset file (default: OUT/data/dataset.mzds)")
    p = sub.add_parser("search", parents=[common], help="search one checkpoint")
    p.add_argument("--epoch", type=int, required=True)
    p.add_argument("--seed-index", type=int, default=0)
    p.add_argument("--checkpoint", help="checkpoint file (default: OUT/train/ckpt_eNNNN.wmck)")
    sub.add_parser("sweep", parents=[common], help="search every checkpoint for every seed")
    sub.add_parser("oracle", parents=[common], help="certify the solver on the Gaussian toy problem")
    sub.add_parser("analyze", parents=[common], help="densities, ratios and snapshot images")
    sub.add_parser("pipeline", parents=[common], help="collect, train, sweep, analyze")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CONFUSION_LOG", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        if args.command == "show-config":
            print(f"# {_stamp(cfg)}\n{cfg.to_text()}", end="")
        elif args.command == "collect":
            write_config(cfg, out)
            cmd_collect(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.dataset)
        elif args.command == "search":
            cmd_search(cfg, out, args.epoch, args.seed_index, args.checkpoint)
        elif args.command == "sweep":
            cmd_sweep(cfg, out, args.jobs)
        elif args.command == "oracle":
            return 0 if cmd_oracle(cfg, out) else EXIT_FAIL
        elif args.command == "analyze":
            cmd_analyze(cfg, out)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, out, args.jobs)
    except (PolicyOrderError, RunError, TrainingError, SearchDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return 0


if __name__ == "__main__":
    sys.exit(main())
