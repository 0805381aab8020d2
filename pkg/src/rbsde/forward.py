"""Exponential-Euler simulation of the forward (controlled) state equation."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import GalerkinModel, TimeGrid
from .rng import block_bounds, block_increments

Array = np.ndarray


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    states: Array  # (n_paths, n_steps + 1, d)
    dw: Array  # (n_paths, n_steps, k)
    seed: int
    controls: Array | None = None  # realized controls, (n_paths, n_steps, ...)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def x0(self) -> Array:
        return self.states[0, 0]


def _apply_semigroup(e: Array, x: Array) -> Array:
    if e.ndim == 1:
        return x * e
    return x @ e.T


def propagate(model: GalerkinModel, grid: TimeGrid, x_start: Array, dw: Array,
              start_step: int = 0, policy: Callable | None = None,
              feedback: Callable | None = None, path_offset: int = 0):
    """Advance ``x_start`` through the increments ``dw`` from node ``start_step``.

    One step reads ``X+ = exp(dt A) (X + F dt [+ G R(X, a) dt] + G dW)``.
    Returns ``(states, controls)``; controls is None without a policy.
    """
    n, m, _ = dw.shape
    dt = grid.dt
    e = model.semigroup(dt)
    x = np.array(np.broadcast_to(x_start, (n, model.state_dim)), dtype=float)
    states = np.empty((n, m + 1, model.state_dim))
    states[:, 0] = x
    controls = None
    for i in range(m):
        t = grid.time(start_step + i)
        g = model.diffusion(t, x)
        incr = model.drift(t, x) * dt
        if policy is not None:
            a = np.asarray(policy(t, x), dtype=float)
            if controls is None:
                controls = np.empty((n, m) + a.shape[1:])
            controls[:, i] = a
            incr = incr + np.einsum("ndk,nk->nd", g, feedback(x, a)) * dt
        x = _apply_semigroup(e, x + incr + np.einsum("ndk,nk->nd", g, dw[:, i]))
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise SimulationError(
                f"non-finite state on path {path_offset + bad} at step {start_step + i + 1}"
            )
        states[:, i + 1] = x
    return states, controls


def _run_blocks(fn, n_paths: int, n_workers: int):
    bounds = block_bounds(n_paths)
    if n_workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            return list(pool.map(fn, range(len(bounds)), bounds))
    return [fn(b, lohi) for b, lohi in enumerate(bounds)]


def _simulate(model, grid, x0, n_paths, seed, policy, feedback, n_workers):
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.asarray(x0, dtype=float).reshape(model.state_dim)

    def block(b, lohi):
        lo, hi = lohi
        dw = block_increments(seed, b, hi - lo, grid.n_steps, model.noise_dim, grid.dt)
        states, ctrl = propagate(model, grid, x0, dw, policy=policy,
                                 feedback=feedback, path_offset=lo)
        return states, dw, ctrl

    parts = _run_blocks(block, n_paths, n_workers)
    states = np.concatenate([p[0] for p in parts])
    dw = np.concatenate([p[1] for p in parts])
    ctrl = None if policy is None else np.concatenate([p[2] for p in parts])
    return PathEnsemble(grid, states, dw, seed, ctrl)


def simulate(model: GalerkinModel, grid: TimeGrid, x0, n_paths: int, seed: int,
             n_workers: int = 1) -> PathEnsemble:
    """Simulate ``n_paths`` mild-solution paths started at ``x0``.

    The result does not depend on ``n_workers``.
    """
    return _simulate(model, grid, x0, n_paths, seed, None, None, n_workers)


def simulate_controlled(model: GalerkinModel, grid: TimeGrid, x0, policy: Callable,
                        control_problem, n_paths: int, seed: int,
                        n_workers: int = 1) -> PathEnsemble:
    """Simulate under the feedback policy ``policy(t, x) -> controls``.

    The drift gains ``G(t,X) R(X, a) dt``; ``dw`` holds the increments of the
    original Wiener process, so a null feedback reproduces :func:`simulate`.
    """
    return _simulate(model, grid, x0, n_paths, seed, policy,
                     control_problem.feedback, n_workers)


def resimulate_tail(model: GalerkinModel, paths: PathEnsemble, start_step: int) -> Array:
    """Re-run every path from ``(t_j, X_j)`` with its own tail increments."""
    out = []
    for lo, hi in block_bounds(paths.n_paths):
        states, _ = propagate(model, paths.grid, paths.states[lo:hi, start_step],
                              paths.dw[lo:hi, start_step:], start_step=start_step,
                              path_offset=lo)
        out.append(states)
    return np.concatenate(out)


def write_paths_csv(paths: PathEnsemble, fh) -> None:
    """Dump ``path, step, time, x_1..x_d`` rows."""
    n, m1, d = paths.states.shape
    fh.write(",".join(["path", "step", "time"] + [f"x_{j + 1}" for j in range(d)]) + "\n")
    times = paths.grid.times
    for p in range(n):
        for i in range(m1):
            vals = ",".join(repr(float(v)) for v in paths.states[p, i])
            fh.write(f"{p},{i},{float(times[i])!r},{vals}\n")
