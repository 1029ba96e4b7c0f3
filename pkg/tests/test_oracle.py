import numpy as np
import pytest

from confusion.oracle import (
    ToyDiverged,
    ToyGaussianProblem,
    analytic_K,
    certification_report,
    grid_search_K,
    random_problems,
    solve_toy_with_primal_dual,
    toy_config,
    write_report,
)

ANCHOR = ToyGaussianProblem(1.0, 1.0, 1.0)


def test_analytic_examples():
    assert analytic_K(ANCHOR) == 0.125
    assert analytic_K(ToyGaussianProblem(0.3, 1.0, 1.0)) == 0.0
    assert analytic_K(ToyGaussianProblem(2.0, 0.0, 1.0)) == 2.0
    with pytest.raises(ValueError):
        ToyGaussianProblem(1.0, 1.0, 0.0)


def test_grid_search_examples():
    assert abs(grid_search_K(ANCHOR, 100_000) - 0.125) < 1e-4
    assert grid_search_K(ToyGaussianProblem(0.2, 1.0, 1.0), 1000) == 0.0


def test_grid_search_nested_refinement_is_monotone():
    p = ToyGaussianProblem(1.7, 0.4, 0.8)
    # resolutions n, 2n-1, 4n-3 give nested grids
    values = [grid_search_K(p, r) for r in (1001, 2001, 4001, 8001)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_grid_error_within_modulus_bound():
    for p in random_problems(50, seed=3):
        res = 100_000
        lo = p.c0 / 2 - 5 * p.sigma
        hi = max(p.theta0, p.c0 / 2) + 5 * p.sigma
        step = (hi - lo) / (res - 1)
        bound = step ** 2 / (2 * p.sigma ** 2) + step * abs(p.theta0) / p.sigma ** 2
        gap = grid_search_K(p, res) - analytic_K(p)
        assert -1e-12 <= gap <= bound


def test_primal_dual_anchor():
    k = solve_toy_with_primal_dual(ANCHOR, toy_config())
    assert abs(k - 0.125) < 5e-3
    assert k >= 0.125 - 1e-6


def test_primal_dual_already_confusing():
    trace = []
    k = solve_toy_with_primal_dual(ToyGaussianProblem(0.2, 1.0, 1.0), toy_config(iterations=10), trace)
    assert k == 0.0 and trace[0][3] <= 0.0


def test_primal_dual_never_beats_infimum():
    cfg = toy_config()
    for p in random_problems(50, seed=0):
        assert solve_toy_with_primal_dual(p, cfg) >= analytic_K(p) - 1e-6


def test_dual_variable_stabilizes():
    trace = []
    solve_toy_with_primal_dual(ANCHOR, toy_config(), trace)
    lam = np.array([row[4] for row in trace[-100:]])
    assert lam.std() < 0.1 * lam.mean()


def test_divergence_is_reported():
    with pytest.raises(ToyDiverged):
        # the constraint pushes theta down, past the divergence bound
        solve_toy_with_primal_dual(ToyGaussianProblem(-999_999.5, -3e6, 1.0), toy_config(iterations=5, lr=10.0))


def test_report(tmp_path):
    rows = certification_report(n_problems=50, seed=0)
    assert len(rows) == 51 and [r["problem"] for r in rows] == list(range(51))
    assert all(r["pass"] for r in rows)
    again = certification_report(n_problems=50, seed=0)
    assert rows == again
    write_report(tmp_path / "r.csv", rows, "config x")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == "# config x" and text[1].startswith("problem,theta0,c0,sigma,analytic,grid,primal_dual,pass")
    assert len(text) == 53
