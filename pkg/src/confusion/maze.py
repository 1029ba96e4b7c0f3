"""Continuous point-mass navigation on a 5x5 grid maze.

States are flat arrays ``[x, y, vx, vy]`` in world units (one unit per grid
cell); batched states have shape ``(B, 4)``.  Cell ``(i, j)`` covers
``[i, i+1) x [j, j+1)`` and ``occupancy[i, j]`` is True for walls.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID = 5
_WALL_EPS = 1e-9

DATASET_MAGIC = b"MZDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Physics:
    """Point-mass constants.  ``v' = clip(damping*v + gain*a, +-v_max)``, ``p' = p + v'*dt``."""

    dt: float = 0.2
    damping: float = 0.6
    gain: float = 2.0
    v_max: float = 4.0


@dataclass(frozen=True)
class MazeSpec:
    occupancy: np.ndarray = field(repr=False)
    start_cell: tuple[int, int]
    goal_cell: tuple[int, int]
    name: str = "maze"

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != (GRID, GRID):
            raise ValueError(f"occupancy must be {GRID}x{GRID}, got {occ.shape}")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        for label, cell in (("start", self.start_cell), ("goal", self.goal_cell)):
            if self.is_wall(cell):
                raise ValueError(f"{label} cell {cell} is a wall")

    def is_wall(self, cell) -> bool:
        i, j = cell
        if not (0 <= i < GRID and 0 <= j < GRID):
            return True
        return bool(self.occupancy[i, j])

    def free_cells(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(GRID) for j in range(GRID) if not self.occupancy[i, j]]

    @property
    def goal_center(self) -> np.ndarray:
        return np.asarray(self.goal_cell, dtype=float) + 0.5

    def __eq__(self, other):
        if not isinstance(other, MazeSpec):
            return NotImplemented
        return (np.array_equal(self.occupancy, other.occupancy)
                and self.start_cell == other.start_cell and self.goal_cell == other.goal_cell)

    def __hash__(self):
        return hash((self.occupancy.tobytes(), self.start_cell, self.goal_cell))


def _from_free(free, name) -> MazeSpec:
    occ = np.ones((GRID, GRID), dtype=bool)
    for i, j in free:
        occ[i, j] = False
    return MazeSpec(occ, start_cell=(1, 1), goal_cell=(1, 3), name=name)


def original_maze() -> MazeSpec:
    """U-maze: the direct route from start (1,1) to goal (1,3) is blocked at (1,2)."""
    free = [(1, 1), (2, 1), (3, 1), (3, 2), (1, 3), (2, 3), (3, 3)]
    return _from_free(free, "original")


def modified_maze() -> MazeSpec:
    """Same maze with the middle wall moved: (1,2) opens and (3,2) closes."""
    free = [(1, 1), (2, 1), (3, 1), (1, 2), (1, 3), (2, 3), (3, 3)]
    return _from_free(free, "modified")


MAZES = {"original": original_maze, "modified": modified_maze}


def reward(maze: MazeSpec, position) -> np.ndarray:
    """Negative Manhattan distance from ``position[..., :2]`` to the goal-cell center."""
    p = np.asarray(position, dtype=float)[..., :2]
    return -np.abs(p - maze.goal_center).sum(axis=-1)


def _walls_at(maze: MazeSpec, ix, iy):
    ix = np.asarray(ix)
    iy = np.asarray(iy)
    inside = (ix >= 0) & (ix < GRID) & (iy >= 0) & (iy < GRID)
    out = np.ones(ix.shape, dtype=bool)
    out[inside] = maze.occupancy[ix[inside], iy[inside]]
    return out


def env_step(maze: MazeSpec, state, action, physics: Physics = Physics()):
    """Advance one step.  Works on a single state ``(4,)`` or a batch ``(B, 4)``.

    Collisions are resolved axis by axis (x first, then y): a move that would
    end inside a wall cell stops at the wall face and zeroes that velocity
    component.  Returns ``(next_state, reward)``.
    """
    state = np.asarray(state, dtype=float)
    action = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(action)):
        raise FloatingPointError(f"non-finite action {action!r}")
    single = state.ndim == 1
    s = np.atleast_2d(state)
    a = np.clip(np.atleast_2d(action), -1.0, 1.0)

    vel = np.clip(physics.damping * s[:, 2:] + physics.gain * a, -physics.v_max, physics.v_max)
    pos = s[:, :2].copy()
    for axis in (0, 1):
        other = 1 - axis
        new = pos[:, axis] + vel[:, axis] * physics.dt
        cell_new = np.floor(new).astype(int)
        cell_other = np.floor(pos[:, other]).astype(int)
        if axis == 0:
            blocked = _walls_at(maze, cell_new, cell_other)
        else:
            blocked = _walls_at(maze, cell_other, cell_new)
        moving_up = vel[:, axis] > 0
        face = np.where(moving_up, cell_new - _WALL_EPS, cell_new + 1 + _WALL_EPS)
        pos[:, axis] = np.where(blocked, face, new)
        vel[:, axis] = np.where(blocked, 0.0, vel[:, axis])

    nxt = np.concatenate([pos, vel], axis=1)
    r = reward(maze, nxt)
    if single:
        return nxt[0], float(r[0])
    return nxt, r


def env_reset(maze: MazeSpec, rng: np.random.Generator, n: int | None = None, margin: float = 0.1):
    """Uniform position inside the start cell (``margin`` from its edges), zero velocity."""
    size = 1 if n is None else n
    lo = np.asarray(maze.start_cell, dtype=float) + margin
    pos = lo + rng.uniform(0.0, 1.0 - 2 * margin, size=(size, 2))
    s = np.concatenate([pos, np.zeros((size, 2))], axis=1)
    return s[0] if n is None else s


def env_rollout(maze: MazeSpec, policy, s0, horizon: int, physics: Physics = Physics()):
    """Roll ``policy`` (batch states -> actions) in the true environment.

    Returns ``(states (B, T+1, 4), returns (B,))``.
    """
    s = np.atleast_2d(np.asarray(s0, dtype=float))
    states, total = [s], np.zeros(len(s))
    for _ in range(horizon):
        s, r = env_step(maze, s, policy(s), physics)
        states.append(s)
        total += r
    return np.stack(states, axis=1), total


def collect_dataset(maze: MazeSpec, rng: np.random.Generator, n_trajectories: int, traj_len: int,
                    repeat_max: int = 4, physics: Physics = Physics()) -> np.ndarray:
    """Random-exploration transitions as an ``(n_trajectories*traj_len, 10)`` array.

    Columns are ``s[4], a[2], delta_s[4]``.  Each sampled action is held for a
    repeat count drawn uniformly from ``1..repeat_max``.  Trajectories are
    simulated in lockstep but each keeps its own action/repeat draws.
    """
    if n_trajectories < 1 or traj_len < 1 or repeat_max < 1:
        raise ValueError("n_trajectories, traj_len and repeat_max must be >= 1")
    s = env_reset(maze, rng, n_trajectories)
    action = np.zeros((n_trajectories, 2))
    remaining = np.zeros(n_trajectories, dtype=int)
    out = np.empty((n_trajectories, traj_len, 10))
    for t in range(traj_len):
        fresh = remaining == 0
        k = int(fresh.sum())
        if k:
            action[fresh] = rng.uniform(-1.0, 1.0, size=(k, 2))
            remaining[fresh] = rng.integers(1, repeat_max + 1, size=k)
        nxt, _ = env_step(maze, s, action, physics)
        out[:, t, :4] = s
        out[:, t, 4:6] = action
        out[:, t, 6:] = nxt - s
        s = nxt
        remaining -= 1
    return out.reshape(-1, 10)


def save_dataset(path, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f8")
    if data.ndim != 2 or data.shape[1] != 10:
        raise ValueError(f"dataset must be (n, 10), got {data.shape}")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQ", DATASET_VERSION, data.shape[0]))
        fh.write(data.tobytes())


def load_dataset(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    body = raw[16:]
    if len(body) != count * 80:
        raise ValueError(f"{path}: expected {count} records, found {len(body) / 80:g}")
    return np.frombuffer(body, dtype="<f8").reshape(count, 10).astype(float)
