"""Diagnostics for a finished search: visitation densities, log-density ratios,
trajectory snapshots, images (binary PPM) and metric tables."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .maze import GRID, MazeSpec, env_reset, original_maze
from .policies import RandomPolicy
from .search import _split_records, rollout_graph, time_to_first_feasible, write_history
from .world_model import DYNAMICS, WorldModelParams

log = logging.getLogger(__name__)

EXTENT = float(GRID)


@dataclass
class DensityGrid:
    bins: np.ndarray  # (B, B) indexed [x_bin, y_bin]
    total: int
    normalized: bool = True

    @property
    def size(self) -> int:
        return self.bins.shape[0]


def histogram_positions(positions, bins: int = 50) -> DensityGrid:
    """Normalized 2-D histogram over ``[0, 5]^2``; out-of-range points land in the edge bins."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    idx = np.floor(np.clip(p, 0.0, EXTENT) / EXTENT * bins).astype(int)
    idx = np.minimum(idx, bins - 1)
    counts = np.zeros((bins, bins))
    np.add.at(counts, (idx[:, 0], idx[:, 1]), 1.0)
    total = len(p)
    return DensityGrid(counts / max(total, 1), total, True)


def visitation_density(model: WorldModelParams, psi=None, episodes: int = 2000, steps: int = 200,
                       rng: np.random.Generator | None = None, bins: int = 50,
                       maze: MazeSpec | None = None) -> DensityGrid:
    """Decoded positions of model rollouts under uniform-random actions.

    ``psi`` replaces the model's dynamics (e.g. a confusing instance).  Using the
    same ``rng`` seed for two models gives them identical starts, actions and
    dynamics noise, so their densities differ only through the dynamics.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    maze = maze or original_maze()
    rng = rng or np.random.default_rng(0)
    dyn = model.subset(DYNAMICS) if psi is None else psi
    policy = RandomPolicy(rng)
    s0 = env_reset(maze, rng, episodes)
    graph = rollout_graph(model, dyn, [(policy, s0)], steps, maze, rng, kl_groups=())
    return histogram_positions(graph.records["states"][:, 1:, :2], bins)


def log_density_ratio(ref: DensityGrid, conf: DensityGrid, floor: float = 1e-6) -> np.ndarray:
    """``log((conf + floor) / (ref + floor))``: positive where the confused model visits more."""
    if ref.bins.shape != conf.bins.shape:
        raise ValueError(f"grid shapes differ: {ref.bins.shape} vs {conf.bins.shape}")
    return np.log(conf.bins + floor) - np.log(ref.bins + floor)


def wall_band_mask(maze: MazeSpec, bins: int) -> np.ndarray:
    """Bins lying inside wall cells that are not on the outer border."""
    cell = np.minimum((np.arange(bins) + 0.5) * EXTENT / bins, EXTENT - 1e-9).astype(int)
    occ = maze.occupancy[np.ix_(cell, cell)]
    border = np.zeros((GRID, GRID), dtype=bool)
    border[[0, -1], :] = True
    border[:, [0, -1]] = True
    return occ & ~border[np.ix_(cell, cell)]


def localization_stats(ratio: np.ndarray, maze: MazeSpec | None = None) -> dict:
    maze = maze or original_maze()
    a = np.abs(ratio)
    band = wall_band_mask(maze, ratio.shape[0])
    return {"frac_small": float((a < 0.1).mean()),
            "band_max": float(a[band].max()) if band.any() else 0.0,
            "max": float(a.max())}


# ---------------------------------------------------------------------------
# trajectory snapshots

def trajectory_snapshots(reference: WorldModelParams, snapshots, pi_star, pi_sub, horizon: int,
                         rng: np.random.Generator, n: int = 8, maze: MazeSpec | None = None,
                         include_reference: bool = True) -> list:
    """Roll both policies out at each ``(iteration, psi)`` snapshot.

    Returns ``[{"iteration", "pi_star": (n, T+1, 2), "pi_sub": ...}]``; an
    iteration-0 bundle from the unperturbed model leads when
    ``include_reference`` is set.  ``psi=None`` entries are skipped.
    """
    maze = maze or original_maze()
    items = [(0, reference.subset(DYNAMICS))] if include_reference else []
    items += list(snapshots)
    bundles = []
    for it, psi in items:
        if psi is None:
            log.warning("snapshot at iteration %s missing; skipped", it)
            continue
        s0 = env_reset(maze, rng, n)
        groups = [(pi_star, s0), (pi_sub, s0)]
        graph = rollout_graph(reference, psi, groups, horizon, maze, rng, kl_groups=())
        star, sub = _split_records(groups, graph.records)
        bundles.append({"iteration": int(it), "pi_star": star.states[:, :, :2], "pi_sub": sub.states[:, :, :2]})
    return bundles


def reaches_goal(positions, maze: MazeSpec | None = None, radius: float = 0.5) -> np.ndarray:
    """Per trajectory: did any position come within ``radius`` (max-norm) of the goal center?"""
    maze = maze or original_maze()
    d = np.abs(np.asarray(positions) - maze.goal_center).max(axis=-1)
    return (d <= radius).any(axis=-1)


# ---------------------------------------------------------------------------
# images

def _ramp(knots, pos) -> np.ndarray:
    i = np.arange(256)
    knots = np.asarray(knots, dtype=float)
    lut = np.empty((256, 3), dtype=np.uint8)
    for c in range(3):
        lut[:, c] = np.rint(np.interp(i, pos, knots[:, c])).astype(np.uint8)
    return lut


def _diverging_lut() -> np.ndarray:
    # red (negative) -> white at index 128 -> blue (positive)
    return _ramp([[178, 24, 43], [255, 255, 255], [33, 102, 172]], [0, 128, 255])


def _sequential_lut() -> np.ndarray:
    # black -> purple -> orange -> pale yellow
    return _ramp([[0, 0, 4], [120, 28, 109], [237, 105, 37], [252, 255, 164]], [0, 85, 170, 255])


DIVERGING = _diverging_lut()
SEQUENTIAL = _sequential_lut()


def _write_ppm(path, rgb: np.ndarray, comment: str | None = None) -> None:
    h, w, _ = rgb.shape
    header = b"P6\n"
    if comment:
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def _to_image(rgb: np.ndarray) -> np.ndarray:
    # rgb is indexed [x, y]; image rows run from high y (top) to low y
    return np.flipud(np.transpose(rgb, (1, 0, 2)))


def emit_heatmap(grid, path, kind: str = "diverging", vmax: float = 2.0, comment: str | None = None) -> None:
    """Write a B x B pixel P6 image.

    ``diverging`` maps ``[-vmax, vmax]`` onto red-white-blue (0 is white);
    ``sequential`` shows ``log10`` of a density between 1e-6 and the grid maximum.
    """
    g = np.asarray(grid, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValueError("heatmap grid must be finite")
    if kind == "diverging":
        idx = np.rint((np.clip(g / vmax, -1.0, 1.0) + 1.0) * 127.5).astype(int)
        rgb = DIVERGING[idx]
    elif kind == "sequential":
        lg = np.log10(np.maximum(g, 1e-6))
        top = max(float(lg.max()), -5.0)
        idx = np.rint((lg + 6.0) / (top + 6.0) * 255).clip(0, 255).astype(int)
        rgb = SEQUENTIAL[idx]
    else:
        raise ValueError(f"unknown colormap kind {kind!r}")
    _write_ppm(path, _to_image(rgb), comment)


def emit_trajectory_image(bundle, path, maze: MazeSpec | None = None, scale: int = 40,
                          comment: str | None = None) -> None:
    """Maze walls in grey, optimal-policy paths in blue, suboptimal in red."""
    maze = maze or original_maze()
    size = GRID * scale
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    cells = np.arange(size) // scale
    walls = maze.occupancy[np.ix_(cells, cells)]  # [x, y]
    img[np.flipud(walls.T)] = (170, 170, 170)
    gx, gy = maze.goal_cell
    sl = (slice(size - (gy + 1) * scale, size - gy * scale), slice(gx * scale, (gx + 1) * scale))
    img[sl] = (220, 245, 220)
    for key, color in (("pi_sub", (200, 30, 30)), ("pi_star", (30, 60, 200))):
        for traj in np.asarray(bundle[key]):
            # sample each segment densely so paths render as lines
            t = np.linspace(0.0, 1.0, 2 * scale, endpoint=False)
            pts = (traj[:-1, None, :] * (1 - t[None, :, None]) + traj[1:, None, :] * t[None, :, None]).reshape(-1, 2)
            pts = np.vstack([pts, traj[-1:]])
            px = np.clip(np.floor(pts * scale).astype(int), 0, size - 1)
            img[size - 1 - px[:, 1], px[:, 0]] = color
    _write_ppm(path, img, comment)


def read_ppm(path):
    """Return ``(rgb, comments)`` from a P6 file written by this module."""
    raw = Path(path).read_bytes()
    lines, off, comments = [], 0, []
    while len(lines) < 3:
        end = raw.index(b"\n", off)
        line = raw[off:end].decode("ascii")
        off = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            lines.append(line)
    if lines[0] != "P6":
        raise ValueError(f"{path}: not a P6 image")
    w, h = (int(x) for x in lines[1].split())
    rgb = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3)
    return rgb, comments


# ---------------------------------------------------------------------------
# tables

SUMMARY_COLUMNS = ("epoch", "seed", "k_best", "time_to_first_feasible", "best_iteration", "final_lambda")


def emit_metrics(history, path, comment: str | None = None) -> None:
    """Search history CSV (one row per iteration)."""
    try:
        write_history(path, history, comment)
    except OSError as exc:
        raise OSError(f"cannot write metrics {path}: {exc}") from exc


def summary_row(epoch: int, seed: int, history, k_best: float, best_iteration) -> dict:
    ttf = time_to_first_feasible(history)
    return {"epoch": int(epoch), "seed": int(seed), "k_best": float(k_best),
            "time_to_first_feasible": ttf,
            "best_iteration": best_iteration,
            "final_lambda": float(history[-1].lam) if history else float("nan")}


def write_summary(rows, path, comment: str | None = None, extra_columns=()) -> None:
    cols = list(SUMMARY_COLUMNS) + list(extra_columns)
    rows = sorted(rows, key=lambda r: (r["epoch"], r["seed"]))
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_summary(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for r in csv.DictReader(lines):
        row = dict(r)
        row["epoch"] = int(row["epoch"])
        row["seed"] = int(row["seed"])
        row["k_best"] = float(row["k_best"])
        for key in ("time_to_first_feasible", "best_iteration"):
            row[key] = int(row[key]) if row.get(key) else None
        if "spearman_rho" in row:
            row["spearman_rho"] = float(row["spearman_rho"])
        out.append(row)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path, payload: dict) -> None:
    """Deterministic JSON (sorted keys); non-finite floats become null."""
    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
