"""Pricing a Bermudan put three ways and reading off the exercise boundary.

Run with ``python demos/bermudan_put.py``.
"""
import numpy as np

from rbsde.backward import PenaltySchedule, solve_penalized, solve_rbsde, solve_reflected
from rbsde.control import optimal_stopping_rule, stopping_boundary
from rbsde.forward import simulate
from rbsde.model import TimeGrid
from rbsde.oracle import binomial_oracle
from rbsde.presets import bermudan_put

# Geometric dynamics, 50 exercise dates, generator -r*y (discounting).
pre = bermudan_put()
grid = TimeGrid(0.0, pre.horizon, pre.n_steps)
paths = simulate(pre.model, grid, pre.x0, 50_000, seed=0)

# The tree price is the reference.
oracle = binomial_oracle(100.0, 100.0, 0.05, 0.2, 1.0, 50)
print(f"binomial oracle      {oracle.price:.4f}")

# Direct reflection: Y_i = max(continuation, payoff).
refl = solve_reflected(paths, pre.problem, pre.basis)
print(f"reflected scheme     {refl.y0:.4f} +- {refl.y0_se:.4f}")

# Penalization along n = 1, 2, 4, ... on the same paths.
pen, trace = solve_rbsde(paths, pre.problem, PenaltySchedule(), pre.basis)
print(f"penalized scheme     {pen.y0:.4f} (stopped at n={trace.levels[-1]:g}, "
      f"converged={trace.converged})")

# The trace climbs toward the reflected value. The one-step projected targets
# make the climb smooth, so the gaps halve with each doubling of n.
print("\n   n      Y0 (projected targets)   gap")
prev = None
for n in PenaltySchedule().levels:
    y0 = solve_penalized(paths, pre.problem, n, basis=pre.basis, targets="projected").y0
    gap = "" if prev is None else f"{y0 - prev:.4f}"
    print(f"{n:6g}   {y0:.4f}                  {gap}")
    prev = y0

# Stop where Y meets the payoff; compare the highest exercised spot with the tree.
rule = optimal_stopping_rule(refl, paths, pre.problem)
bnd = stopping_boundary(paths, rule, pre.problem, y=refl.y)
print("\n  t     boundary   oracle")
for i in range(5, 50, 5):
    print(f"{grid.time(i):.2f}   {bnd[i]:7.2f}   {oracle.boundary[i]:7.2f}")
print(f"mean stopping time: {np.mean(grid.times[rule.index]):.3f}")
