import itertools

import numpy as np
import pytest

from confusion.maze import MazeSpec, env_reset, env_step, modified_maze, original_maze
from confusion.policies import (
    NoPathError,
    RandomPolicy,
    WaypointPolicy,
    bfs_shortest_path,
    build_policy_pair,
    make_noisy_policy,
    waypoint_action,
)


def test_bfs_paths_match_layouts():
    assert bfs_shortest_path(original_maze()) == [(1, 1), (2, 1), (3, 1), (3, 2), (3, 3), (2, 3), (1, 3)]
    assert bfs_shortest_path(modified_maze()) == [(1, 1), (1, 2), (1, 3)]
    assert bfs_shortest_path(original_maze(), (2, 1), (2, 1)) == [(2, 1)]


def test_bfs_no_path():
    occ = np.ones((5, 5), dtype=bool)
    occ[1, 1] = occ[1, 3] = False
    with pytest.raises(NoPathError):
        bfs_shortest_path(MazeSpec(occ, (1, 1), (1, 3)))


def _exhaustive(maze, start, goal):
    best = None
    stack = [(start, (start,))]
    while stack:
        cell, path = stack.pop()
        if cell == goal:
            best = len(path) - 1 if best is None else min(best, len(path) - 1)
            continue
        for dx, dy in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            nxt = (cell[0] + dx, cell[1] + dy)
            if nxt not in path and not maze.is_wall(nxt):
                stack.append((nxt, path + (nxt,)))
    return best


def test_bfs_matches_exhaustive_search_on_all_interior_layouts():
    interior = [(i, j) for i in range(1, 4) for j in range(1, 4) if (i, j) not in ((1, 1), (1, 3))]
    checked = 0
    for bits in itertools.product([False, True], repeat=len(interior)):
        occ = np.ones((5, 5), dtype=bool)
        occ[1, 1] = occ[1, 3] = False
        for (i, j), free in zip(interior, bits):
            occ[i, j] = not free
        maze = MazeSpec(occ, (1, 1), (1, 3))
        want = _exhaustive(maze, (1, 1), (1, 3))
        if want is None:
            with pytest.raises(NoPathError):
                bfs_shortest_path(maze)
            continue
        path = bfs_shortest_path(maze)
        assert len(path) - 1 == want
        assert all(abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1 for a, b in zip(path, path[1:]))
        assert not any(maze.is_wall(c) for c in path)
        checked += 1
    assert checked == 73  # reachable layouts among the 128 interior patterns


def test_waypoint_examples():
    path = bfs_shortest_path(modified_maze())
    assert np.allclose(waypoint_action(path, [1.5, 3.5, 0.0, 0.0]), [0.0, 0.0])
    # next waypoint (1.5, 2.5) straight above, far enough to saturate
    assert np.allclose(waypoint_action(path, [1.5, 1.2, 0.0, 0.0]), [0.0, 1.0])
    left = waypoint_action([(2, 2)], [2.3, 2.5, 0.0, 0.0])
    right = waypoint_action([(2, 2)], [2.7, 2.5, 0.0, 0.0])
    assert np.allclose(left, -right) and left[0] > 0


def test_noise_free_controller_reaches_goal():
    m = original_maze()
    pi = WaypointPolicy(bfs_shortest_path(m), sigma=0.0)
    s = env_reset(m, np.random.default_rng(0), 32)
    reached = np.zeros(32, dtype=bool)
    for _ in range(200):
        s, _ = env_step(m, s, pi(s))
        reached |= np.abs(s[:, :2] - m.goal_center).max(axis=1) < 0.5
    assert reached.all()


def test_sigma_zero_matches_base():
    pi, _ = build_policy_pair(sigma=0.0)
    s = env_reset(original_maze(), np.random.default_rng(1), 5)
    assert np.array_equal(pi(s), pi.base_action(s))
    with pytest.raises(ValueError):
        make_noisy_policy(pi, np.random.default_rng(0), sigma=-1.0)


def test_noisy_mean_matches_clamped_expectation():
    base = WaypointPolicy([(1, 1), (2, 1)], sigma=0.0)
    state = np.array([[1.5, 1.5, 0.0, 0.0]])
    b = base.base_action(state)[0]
    noisy = make_noisy_policy(base, np.random.default_rng(3), 1.0)
    draws = noisy(np.repeat(state, 100_000, axis=0))
    assert np.all(np.abs(draws) <= 1.0)
    # E[clip(b + eps)] by quadrature
    x = np.linspace(-8, 8, 200_001)
    w = np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi) * (x[1] - x[0])
    expected = np.array([(np.clip(bi + x, -1, 1) * w).sum() for bi in b])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - expected) < 3 * se)


def test_policies_are_stochastic():
    star, sub = build_policy_pair()
    s = np.array([1.5, 1.5, 0.0, 0.0])
    for pi in (star, sub):
        assert not np.array_equal(pi(s), pi(s))


def test_sub_policy_reaches_goal_in_modified_maze():
    m = modified_maze()
    _, sub = build_policy_pair(seed=4)
    s = env_reset(m, np.random.default_rng(4), 64)
    reached = np.zeros(64, dtype=bool)
    for _ in range(50):
        s, _ = env_step(m, s, sub(s))
        reached |= np.abs(s[:, :2] - m.goal_center).max(axis=1) < 0.5
    assert reached.mean() > 0.9


def test_targets_accept_tensors():
    from confusion.nn import Tensor

    pi, _ = build_policy_pair()
    s = env_reset(original_maze(), np.random.default_rng(2), 4)
    a = pi.act(Tensor(s), np.zeros((4, 2)))
    assert np.allclose(a.data, pi.base_action(s))


def test_random_policy_bounds():
    pol = RandomPolicy(np.random.default_rng(0))
    a = pol(np.zeros((1000, 4)))
    assert a.shape == (1000, 2) and np.all(np.abs(a) <= 1.0)
