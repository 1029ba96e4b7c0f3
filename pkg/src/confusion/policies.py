"""Grid-path policies for the point maze.

A policy maps states to actions in ``[-1, 1]^2``.  The waypoint controller is
written with operations shared by numpy arrays and autodiff tensors so that the
same rule can run inside a differentiable model rollout.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .maze import GRID, MazeSpec, modified_maze, original_maze

# neighbour order used for BFS tie-breaking: up, right, down, left
_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


class NoPathError(ValueError):
    pass


def bfs_shortest_path(maze: MazeSpec, start=None, goal=None) -> list[tuple[int, int]]:
    start = tuple(maze.start_cell if start is None else start)
    goal = tuple(maze.goal_cell if goal is None else goal)
    for cell in (start, goal):
        if maze.is_wall(cell):
            raise ValueError(f"cell {cell} is a wall")
    parent = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            break
        for dx, dy in _MOVES:
            nxt = (cell[0] + dx, cell[1] + dy)
            if nxt not in parent and not maze.is_wall(nxt):
                parent[nxt] = cell
                queue.append(nxt)
    if goal not in parent:
        raise NoPathError(f"no path from {start} to {goal}")
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    return path[::-1]


def _raw(x):
    return np.asarray(getattr(x, "data", x))


@dataclass
class WaypointPolicy:
    """Proportional-derivative controller along a grid path, with Gaussian action noise.

    The target is the centre of the path cell following the one the agent is
    in; off the path it is the nearest path cell.  ``act`` takes explicit
    standard-normal noise so rollouts can control the random stream.
    """

    path: list
    kp: float = 2.0
    kd: float = 0.3
    sigma: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)
    name: str = "policy"

    def __post_init__(self):
        if not self.path:
            raise ValueError("empty path")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        self._centers = np.asarray(self.path, dtype=float) + 0.5
        self._table = np.full((GRID, GRID), -1)
        for k, (i, j) in enumerate(self.path):
            self._table[i, j] = k

    def targets(self, positions) -> np.ndarray:
        p = np.atleast_2d(_raw(positions))[:, :2]
        cells = np.floor(p).astype(int)
        inside = np.all((cells >= 0) & (cells < GRID), axis=1)
        k = np.full(len(p), -1)
        k[inside] = self._table[cells[inside, 0], cells[inside, 1]]
        out = np.empty_like(p)
        on = k >= 0
        out[on] = self._centers[np.minimum(k[on] + 1, len(self.path) - 1)]
        if not on.all():
            d2 = ((p[~on, None, :] - self._centers[None]) ** 2).sum(axis=2)
            out[~on] = self._centers[np.argmin(d2, axis=1)]
        return out

    def base_action(self, state):
        """Noise-free action; ``state`` is ``(B, 4)`` array or tensor."""
        w = self.targets(state)
        return (self.kp * (w - state[:, :2]) - self.kd * state[:, 2:]).clip(-1.0, 1.0)

    def sample_noise(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.standard_normal(shape)

    def act(self, state, noise=None):
        base = self.base_action(state)
        if noise is None or self.sigma == 0:
            return base
        return (base + self.sigma * np.asarray(noise)).clip(-1.0, 1.0)

    def __call__(self, state):
        state = np.asarray(state, dtype=float)
        single = state.ndim == 1
        s = np.atleast_2d(state)
        noise = self.rng.standard_normal(s.shape[:1] + (2,)) if self.sigma > 0 else None
        a = self.act(s, noise)
        return a[0] if single else a

    def clone(self, seed) -> "WaypointPolicy":
        return WaypointPolicy(self.path, self.kp, self.kd, self.sigma, np.random.default_rng(seed), self.name)


def waypoint_action(path, state, kp: float = 2.0, kd: float = 0.3) -> np.ndarray:
    """Noise-free controller action for one state ``[x, y, vx, vy]``."""
    pol = WaypointPolicy(list(path), kp=kp, kd=kd, sigma=0.0)
    return pol.base_action(np.atleast_2d(np.asarray(state, dtype=float)))[0]


def make_noisy_policy(base: WaypointPolicy, rng: np.random.Generator, sigma: float = 1.0) -> WaypointPolicy:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    return WaypointPolicy(base.path, base.kp, base.kd, sigma, rng, base.name)


def build_policy_pair(sigma: float = 1.0, kp: float = 2.0, kd: float = 0.3, seed: int = 0):
    """``(pi_star, pi_sub)``: BFS routes on the original and modified mazes."""
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    star = WaypointPolicy(bfs_shortest_path(original_maze()), kp, kd, sigma, rngs[0], "pi_star")
    sub = WaypointPolicy(bfs_shortest_path(modified_maze()), kp, kd, sigma, rngs[1], "pi_sub")
    return star, sub


class RandomPolicy:
    """Uniform actions in ``[-1, 1]^2``, ignoring the state."""

    name = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def sample_noise(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=shape)

    def act(self, state, noise):
        return np.asarray(noise, dtype=float)

    def __call__(self, state):
        state = np.asarray(state)
        return self.sample_noise(self.rng, state.shape[:-1] + (2,))
