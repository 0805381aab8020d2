"""Frozen dynamics: the state never moves, so everything is explicit.

The value is the pointwise maximum of the terminal datum phi(x) = x and the
obstacle h(x) = 1 - |x - 1|. The two touch on [0, 1], where the obstacle has
a kink, and the solver must land exactly on phi there.
"""
import numpy as np

from rbsde.analysis import SolverConfig, check_lipschitz, evaluate_u
from rbsde.backward import solve_penalized
from rbsde.forward import simulate
from rbsde.model import TimeGrid
from rbsde.presets import frozen

pre = frozen("hinge")
cfg = SolverConfig(n_steps=50, n_paths=2000, basis=pre.basis)

print("   x     u(0,x)   max(phi,h)")
for x in np.linspace(0.0, 2.0, 11):
    u, _ = evaluate_u(pre.model, pre.problem, 0.0, [x], cfg)
    print(f"{x:5.2f}   {u:7.4f}   {max(x, 1 - abs(x - 1)):7.4f}")

# Difference quotients stay bounded across the kink.
pairs = [([a], [a + 0.1]) for a in np.linspace(0.0, 1.9, 20)]
rep = check_lipschitz(lambda s, x: evaluate_u(pre.model, pre.problem, s, x, cfg), 0.0, pairs, 0.0)
print(f"\nmax normalized difference quotient: {rep.max_ratio:.3f}")

# The lifted variant (phi = 0, h = 1) shows penalization closing in on 1.
# The penalty pulls Y up at rate n on each of the 50 steps.
lift = frozen("lift")
paths = simulate(lift.model, TimeGrid(0, 1, 50), lift.x0, 100, 0)
for n in (1, 4, 16, 64, 256, 1024):
    y0 = solve_penalized(paths, lift.problem, n, basis=lift.basis).y0
    print(f"n = {n:5d}   Y0 = {y0:.6f}   exact discrete {1 - (1 + n / 50) ** -50:.6f}")
