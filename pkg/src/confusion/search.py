"""Primal-dual search for the closest model that inverts a policy ranking.

Only the latent dynamics are perturbed; encoder and decoder stay frozen.  Each
iteration rolls both policies out in the perturbed model from freshly sampled
start states, measures the trajectory-averaged dynamics KL along the optimal
policy's rollouts, and takes one Adam step on

    KL + lambda * max(0, V_star - V_sub)

followed by a projected dual ascent step on ``lambda``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .maze import MazeSpec, env_reset, original_maze
from .nn import (
    AdamState,
    DiagGaussian,
    MlpParams,
    Tape,
    Tensor,
    adam_step,
    clip_grad_norm,
    concat,
    kl_diag_gaussian,
    leaves,
    value,
)
from .world_model import DECODER, DYNAMICS, ENCODER, WorldModelParams, decode, dynamics_step, encode

log = logging.getLogger(__name__)


class PolicyOrderError(RuntimeError):
    """The optimal policy does not beat the suboptimal one under the reference model."""


class SearchDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class SearchConfig:
    iterations: int = 2500
    samples: int = 128
    horizon: int = 50
    lr_start: float = 5e-4
    lr_end: float = 1e-4
    grad_clip: float = 1.0
    lambda0: float = 1.0
    dual_step: float = 0.1
    snapshot_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        for f in ("samples", "horizon", "snapshot_interval"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0 < self.lr_end <= self.lr_start):
            raise ValueError("need 0 < lr_end <= lr_start")
        if self.grad_clip <= 0 or self.dual_step <= 0 or self.lambda0 < 0:
            raise ValueError("grad_clip and dual_step must be positive, lambda0 >= 0")

    def lr_at(self, k: int) -> float:
        """Learning rate for iteration ``k`` (1-based), linear from start to end."""
        if self.iterations <= 1:
            return self.lr_start
        frac = (k - 1) / (self.iterations - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class LatentTrajectory:
    """A batch of model rollouts.  Arrays carry a leading batch axis.

    ``states`` has ``T + 1`` entries (including the start state); ``kl`` is
    all-zero for rows whose divergence was not requested.
    """

    policy: str
    latents: np.ndarray   # (B, T, d_z)
    states: np.ndarray    # (B, T+1, 4)
    actions: np.ndarray   # (B, T, 2)
    rewards: np.ndarray   # (B, T)
    kl: np.ndarray        # (B, T)

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    @property
    def horizon(self) -> int:
        return self.rewards.shape[1]

    def __len__(self):
        return self.rewards.shape[0]


@dataclass
class _Graph:
    kl: object        # tensor (n_kl,) -- mean over time of pointwise KL, per row
    returns: object   # tensor (B,)
    records: dict


def _slice(g: DiagGaussian, rows) -> DiagGaussian:
    return DiagGaussian(g.mean[rows], g.variance[rows], g.std[rows])


def rollout_graph(reference: WorldModelParams, psi_tilde, groups, horizon: int,
                  maze: MazeSpec, rng: np.random.Generator, kl_groups=(0,)):
    """Build the differentiable rollout for several policy groups at once.

    ``groups`` is a list of ``(policy, start_states)``; ``psi_tilde`` maps
    dynamics names to arrays or tensors.  The decoded state is re-encoded with
    the encoder mean at every step.  Pointwise KL between reference and
    perturbed dynamics is computed on rows of the groups in ``kl_groups``.
    All randomness is drawn from ``rng`` up front, in a fixed order.
    """
    phi = reference.mlp(ENCODER)
    xi = reference.mlp(DECODER)
    psi_ref = reference.mlp(DYNAMICS)
    psi_new = MlpParams.from_dict(psi_tilde, DYNAMICS)
    d_z = reference.d_z

    bounds, start = [], 0
    for _, s0 in groups:
        bounds.append(slice(start, start + len(s0)))
        start += len(s0)
    batch = start
    kl_rows = [bounds[g] for g in kl_groups]
    act_noise = [[pol.sample_noise(rng, (len(s0), 2)) for t in range(horizon)] for pol, s0 in groups]
    dyn_noise = rng.standard_normal((horizon, batch, d_z))
    goal = maze.goal_center

    s = Tensor(np.concatenate([np.asarray(s0, dtype=float) for _, s0 in groups], axis=0))
    states, latents, actions, rewards, kls = [s.data], [], [], [], []
    kl_sum = None
    ret = None
    for t in range(horizon):
        z, _ = encode(phi, s, "deterministic")
        a = concat([pol.act(s[rows], act_noise[g][t]) for g, ((pol, _), rows) in
                    enumerate(zip(groups, bounds))], axis=0)
        p_new = dynamics_step(psi_new, z, a)
        kl_t = np.zeros(batch)
        if kl_rows:
            # same batch shape as p_new, so psi_tilde == psi gives bit-identical heads
            p_ref = dynamics_step(psi_ref, z, a)
            parts = [kl_diag_gaussian(_slice(p_ref, rows), _slice(p_new, rows)) for rows in kl_rows]
            step_kl = concat(parts, axis=0) if len(parts) > 1 else parts[0]
            kl_sum = step_kl if kl_sum is None else kl_sum + step_kl
            for rows, part in zip(kl_rows, parts):
                kl_t[rows] = part.data
        z_next = p_new.mean + p_new.std * dyn_noise[t]
        s = s + decode(xi, z_next)
        r = -((s[:, 0] - goal[0]).abs() + (s[:, 1] - goal[1]).abs())
        ret = r if ret is None else ret + r
        latents.append(z.data)
        actions.append(a.data)
        rewards.append(r.data)
        states.append(s.data)
        kls.append(kl_t)

    records = {
        "latents": np.stack(latents, axis=1),
        "states": np.stack(states, axis=1),
        "actions": np.stack(actions, axis=1),
        "rewards": np.stack(rewards, axis=1),
        "kl": np.stack(kls, axis=1),
        "bounds": bounds,
    }
    kl_mean = None if kl_sum is None else kl_sum * (1.0 / horizon)
    return _Graph(kl_mean, ret, records)


def _split_records(groups, records):
    out = []
    for (pol, _), rows in zip(groups, records["bounds"]):
        out.append(LatentTrajectory(
            policy=getattr(pol, "name", "policy"),
            latents=records["latents"][rows], states=records["states"][rows],
            actions=records["actions"][rows], rewards=records["rewards"][rows],
            kl=records["kl"][rows]))
    return out


def rollout(reference: WorldModelParams, psi_tilde, policy, s0, horizon: int, rng,
            maze: MazeSpec | None = None, with_kl: bool = True) -> LatentTrajectory:
    """Roll one policy out in the model whose dynamics are ``psi_tilde``."""
    maze = maze or original_maze()
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))
    graph = rollout_graph(reference, _dyn_arrays(psi_tilde), [(policy, s0)], horizon, maze, rng,
                          kl_groups=(0,) if with_kl else ())
    return _split_records([(policy, s0)], graph.records)[0]


def _dyn_arrays(psi):
    if isinstance(psi, WorldModelParams):
        return psi.subset(DYNAMICS)
    return psi


# ---------------------------------------------------------------------------
# scalar pieces of the objective

def average_kl(trajs) -> float:
    """Mean of all pointwise KL values over all trajectories and steps."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("no trajectories")
    values = np.concatenate([np.asarray(t.kl, dtype=float).reshape(-1) for t in trajs])
    if values.size == 0:
        raise ValueError("no KL values")
    return float(values.mean())


def constraint_value(star_returns, sub_returns) -> float:
    star_returns = np.asarray(star_returns, dtype=float)
    sub_returns = np.asarray(sub_returns, dtype=float)
    if star_returns.shape != sub_returns.shape:
        raise ValueError("return arrays must have equal counts")
    return float(star_returns.mean() - sub_returns.mean())


def lagrangian(kl_mean, c, lam):
    if value(lam) < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(c, Tensor):
        return kl_mean + lam * c.relu()
    return kl_mean + lam * max(0.0, c)


def dual_step(lam: float, c: float, eta: float) -> float:
    return max(0.0, lam + eta * c)


# ---------------------------------------------------------------------------
# the search loop

HISTORY_COLUMNS = ("iter", "kl_mean", "v_star", "v_sub", "c", "lambda", "feasible", "k_best", "lr")


@dataclass(frozen=True)
class HistoryRow:
    iter: int
    kl_mean: float
    v_star: float
    v_sub: float
    c: float
    lam: float
    feasible: bool
    k_best: float
    lr: float


@dataclass
class SearchState:
    psi: dict
    lam: float
    k_best: float = math.inf
    iteration: int = 0
    history: list = field(default_factory=list)
    best_psi: dict | None = None
    best_iteration: int | None = None


@dataclass
class SearchResult:
    k_best: float
    state: SearchState
    snapshots: list  # (iteration, dynamics arrays)
    horizon: int = 1

    @property
    def k_episode(self) -> float:
        """``k_best`` scaled to a per-episode (summed over the horizon) divergence."""
        return self.k_best * self.horizon


def iteration_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, k])


def evaluate(reference, psi, pi_star, pi_sub, config: SearchConfig, rng, n=None,
             maze: MazeSpec | None = None):
    """Forward-only estimate: ``(kl_mean, v_star, v_sub, star_traj, sub_traj)``."""
    maze = maze or original_maze()
    n = n or config.samples
    s0 = env_reset(maze, rng, n)
    groups = [(pi_star, s0), (pi_sub, s0)]
    graph = rollout_graph(reference, _dyn_arrays(psi), groups, config.horizon, maze, rng)
    star, sub = _split_records(groups, graph.records)
    return average_kl([star]), float(star.returns.mean()), float(sub.returns.mean()), star, sub


def search(reference: WorldModelParams, pi_star, pi_sub, config: SearchConfig,
           maze: MazeSpec | None = None, require_order: bool = True, progress=None) -> SearchResult:
    """Run the primal-dual search and return the best feasible averaged KL.

    ``k_best`` is ``inf`` when no iterate satisfied ``V_star <= V_sub``.
    Snapshots of the dynamics are taken after every ``snapshot_interval``
    completed updates.
    """
    maze = maze or original_maze()
    psi = {k: np.array(v) for k, v in reference.subset(DYNAMICS).items()}
    if require_order:
        _, v_star, v_sub, _, _ = evaluate(reference, psi, pi_star, pi_sub, config,
                                         iteration_rng(config.seed, 0), maze=maze)
        if v_star <= v_sub:
            raise PolicyOrderError(
                f"policies not ordered under reference model: V*={v_star:.4f} <= V_sub={v_sub:.4f}")
    state = SearchState(psi=psi, lam=float(config.lambda0))
    opt = AdamState()
    snapshots = []
    n = config.samples
    for k in range(1, config.iterations + 1):
        rng = iteration_rng(config.seed, k)
        s0 = env_reset(maze, rng, n)
        groups = [(pi_star, s0), (pi_sub, s0)]
        params = leaves(state.psi)
        try:
            with Tape() as tape:
                graph = rollout_graph(reference, params, groups, config.horizon, maze, rng)
                kl_mean = graph.kl.mean()
                v_star = graph.returns[:n].mean()
                v_sub = graph.returns[n:].mean()
                c = v_star - v_sub
                loss = lagrangian(kl_mean, c, state.lam)
                grads = tape.gradient(loss, params)
        except FloatingPointError as exc:
            raise SearchDiverged(f"iteration {k}: {exc}", state.history) from exc
        kl_v, c_v = float(kl_mean.data), float(c.data)
        feasible = c_v <= 0.0
        if feasible and kl_v < state.k_best:
            state.k_best = kl_v
            state.best_psi = {name: arr.copy() for name, arr in state.psi.items()}
            state.best_iteration = k
        lr = config.lr_at(k)
        lam_used = state.lam
        adam_step(opt, state.psi, clip_grad_norm(grads, config.grad_clip), lr)
        state.lam = dual_step(state.lam, c_v, config.dual_step)
        state.iteration = k
        state.history.append(HistoryRow(k, kl_v, float(v_star.data), float(v_sub.data), c_v,
                                        lam_used, feasible, state.k_best, lr))
        if k % config.snapshot_interval == 0:
            snapshots.append((k, {name: arr.copy() for name, arr in state.psi.items()}))
        if progress is not None:
            progress(state.history[-1])
    return SearchResult(state.k_best, state, snapshots, config.horizon)


def time_to_first_feasible(history):
    for row in history:
        if row.feasible:
            return row.iter
    return None


# ---------------------------------------------------------------------------
# history CSV

def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_history(path, history, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([_fmt(getattr(row, f.name)) for f in fields(HistoryRow)])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        return []
    if tuple(header) != HISTORY_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {header}")
    rows = []
    for r in reader:
        rows.append(HistoryRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]),
                               float(r[5]), r[6] == "1", float(r[7]), float(r[8])))
    return rows


def certify(reference, psi, pi_star, pi_sub, config: SearchConfig, recorded_kl: float,
            seed: int, n_boot: int = 2000, maze: MazeSpec | None = None) -> dict:
    """Re-roll ``4N`` fresh trajectories at ``psi`` and bootstrap the constraint.

    Feasibility is certified when the 95th percentile of the bootstrapped
    ``c`` is ``<= 0``; the averaged KL must land within 20% of ``recorded_kl``.
    """
    rng = np.random.default_rng([seed, 0xCE27])
    kl, v_star, v_sub, star, sub = evaluate(reference, psi, pi_star, pi_sub, config, rng,
                                            n=4 * config.samples, maze=maze)
    diff = star.returns - sub.returns
    boot_rng = np.random.default_rng([seed, 0xB007])
    idx = boot_rng.integers(0, len(diff), size=(n_boot, len(diff)))
    boot = diff[idx].mean(axis=1)
    upper = float(np.quantile(boot, 0.95))
    rel = abs(kl - recorded_kl) / recorded_kl if recorded_kl > 0 else abs(kl)
    return {"kl": kl, "c": v_star - v_sub, "c_upper95": upper, "kl_rel_err": rel,
            "feasible": upper <= 0.0, "kl_ok": rel <= 0.2}
