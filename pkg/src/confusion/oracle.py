"""A one-parameter confusing-instance problem with a closed-form answer.

The "model" is a single Gaussian transition ``N(theta, sigma^2)``; the two
policy values are ``V_star(theta) = theta`` and ``V_sub(theta) = c0 - theta``,
so both depend on the same parameter.  That sharing is what makes a positive
cost possible: moving ``theta`` to make the suboptimal policy win also moves
the distribution the optimal policy observes.  The KL to the reference is
``(theta - theta0)^2 / (2 sigma^2)`` and the ranking flips at ``theta = c0/2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .nn import AdamState, adam_step, clip_grad_norm
from .search import SearchConfig, dual_step


@dataclass(frozen=True)
class ToyGaussianProblem:
    theta0: float
    c0: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def kl(self, theta):
        return (np.asarray(theta) - self.theta0) ** 2 / (2.0 * self.sigma ** 2)

    def constraint(self, theta):
        """``V_star - V_sub``; the instance is confusing where this is <= 0."""
        return 2.0 * np.asarray(theta) - self.c0


def analytic_K(p: ToyGaussianProblem) -> float:
    boundary = p.c0 / 2.0
    if p.theta0 <= boundary:
        return 0.0
    return (p.theta0 - boundary) ** 2 / (2.0 * p.sigma ** 2)


def grid_search_K(p: ToyGaussianProblem, resolution: int = 100_000) -> float:
    """Brute-force minimum over an evenly spaced grid on ``[c0/2 - 5 sigma, theta0 + 5 sigma]``."""
    lo = p.c0 / 2.0 - 5.0 * p.sigma
    hi = max(p.theta0, p.c0 / 2.0) + 5.0 * p.sigma
    theta = np.linspace(lo, hi, int(resolution))
    feasible = p.constraint(theta) <= 0.0
    if p.theta0 <= p.c0 / 2.0:
        return 0.0
    return float(p.kl(theta[feasible]).min())


class ToyDiverged(RuntimeError):
    pass


def toy_config(iterations: int = 2000, lr: float = 1e-2, seed: int = 0) -> SearchConfig:
    return SearchConfig(iterations=iterations, samples=1, horizon=1, lr_start=lr, lr_end=lr, seed=seed)


def solve_toy_with_primal_dual(p: ToyGaussianProblem, config: SearchConfig, trace: list | None = None) -> float:
    """Same loop as the neural search, on scalar ``theta``: Adam on the hinge
    Lagrangian with clipped gradients, then projected dual ascent.

    The toy values and KL are exact, so the run does not depend on ``config.seed``.
    ``trace`` (if given) receives ``(k, theta, kl, c, lam)`` rows.
    """
    theta = {"theta": np.array([float(p.theta0)])}
    lam = float(config.lambda0)
    opt = AdamState()
    best = math.inf
    inv_var = 1.0 / p.sigma ** 2
    for k in range(1, config.iterations + 1):
        t = theta["theta"]
        kl = float(p.kl(t)[0])
        c = float(p.constraint(t)[0])
        if c <= 0.0:
            best = min(best, kl)
        grad = (t - p.theta0) * inv_var + (lam * 2.0 if c > 0 else 0.0)
        adam_step(opt, theta, clip_grad_norm({"theta": grad}, config.grad_clip), config.lr_at(k))
        if trace is not None:
            trace.append((k, float(t[0]), kl, c, lam))
        lam = dual_step(lam, c, config.dual_step)
        if abs(theta["theta"][0]) > 1e6:
            raise ToyDiverged(f"theta diverged at iteration {k}")
    return best


def random_problems(n: int, seed: int) -> list[ToyGaussianProblem]:
    rng = np.random.default_rng(seed)
    return [ToyGaussianProblem(float(rng.uniform(0, 3)), float(rng.uniform(0, 2)), float(rng.uniform(0.5, 2)))
            for _ in range(n)]


def certification_report(n_problems: int = 50, seed: int = 0, iterations: int = 2000, lr: float = 1e-2,
                         resolution: int = 100_000, tol: float = 5e-3):
    """Rows for the anchor problem ``(1, 1, 1)`` plus ``n_problems`` random ones."""
    problems = [ToyGaussianProblem(1.0, 1.0, 1.0)] + random_problems(n_problems, seed)
    cfg = toy_config(iterations, lr, seed)
    rows = []
    for i, p in enumerate(problems):
        exact = analytic_K(p)
        grid = grid_search_K(p, resolution)
        pd = solve_toy_with_primal_dual(p, cfg)
        ok = abs(pd - exact) <= tol and pd >= exact - 1e-6
        rows.append({"problem": i, "theta0": p.theta0, "c0": p.c0, "sigma": p.sigma,
                     "analytic": exact, "grid": grid, "primal_dual": pd, "pass": ok})
    return rows


def write_report(path, rows, header_comment: str | None = None) -> None:
    cols = ["problem", "theta0", "c0", "sigma", "analytic", "grid", "primal_dual", "pass"]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else int(v) if isinstance(v, bool) else v)
                        for k, v in r.items()})
