"""Controlled dynamics, the Hamiltonian, Girsanov weights and optimal stopping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forward import PathEnsemble, propagate
from .model import GalerkinModel, ObstacleProblem, TimeGrid, Violation
from .rng import block_bounds, block_increments

Array = np.ndarray


@dataclass(frozen=True)
class ControlProblem:
    """Finite control grid, bounded feedback ``R(x, a)`` and running reward ``l``.

    ``feedback(x, a)`` maps states ``(n, d)`` and controls ``(n, ...)`` to
    noise-space vectors ``(n, k)``; ``running_cost(t, x, a)`` returns ``(n,)``.
    """

    control_grid: Array
    feedback: Callable[[Array, Array], Array]
    r_bound: float
    running_cost: Callable[[float, Array, Array], Array]

    def __post_init__(self):
        g = np.array(self.control_grid, dtype=float)
        if g.ndim == 0 or g.shape[0] == 0:
            raise ValueError("control_grid must be a nonempty list of controls")
        if self.r_bound <= 0:
            raise ValueError("r_bound must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "control_grid", g)

    @property
    def n_controls(self) -> int:
        return self.control_grid.shape[0]

    def controls(self, j: int, n: int) -> Array:
        """Grid point ``j`` repeated for a batch of ``n`` states."""
        a = self.control_grid[j]
        return np.broadcast_to(a, (n,) + a.shape).copy()


def validate_control(cp: ControlProblem, model: GalerkinModel, sample_size: int = 256,
                     seed: int = 0, slack: float = 1e-9) -> list[Violation]:
    """Sampled checks of ``|R| <= r_bound`` and ``|R(x,a) - R(x',a)| <= |x - x'|``."""
    rng = np.random.default_rng(seed)
    n, d = sample_size, model.state_dim
    x1 = rng.standard_normal((n, d)) * np.exp(rng.uniform(-2, 5, size=(n, 1)))
    x2 = x1 + rng.standard_normal((n, d)) * rng.uniform(0, 1, size=(n, 1))
    out = []
    for j in range(cp.n_controls):
        a = cp.controls(j, n)
        r1 = np.asarray(cp.feedback(x1, a), dtype=float).reshape(n, -1)
        r2 = np.asarray(cp.feedback(x2, a), dtype=float).reshape(n, -1)
        big = np.linalg.norm(r1, axis=1) > cp.r_bound + slack
        if big.any():
            p = int(np.flatnonzero(big)[0])
            out.append(Violation("feedback_bound", f"|R(x,a)| exceeds {cp.r_bound}",
                                 {"x": x1[p].tolist(), "a": cp.control_grid[j].tolist()}))
            break
        dr = np.linalg.norm(r1 - r2, axis=1)
        bad = dr > np.linalg.norm(x1 - x2, axis=1) + slack
        if bad.any():
            p = int(np.flatnonzero(bad)[0])
            out.append(Violation("feedback_lipschitz", "|R(x,a)-R(x',a)| exceeds |x-x'|",
                                 {"x": x1[p].tolist(), "x_prime": x2[p].tolist(),
                                  "a": cp.control_grid[j].tolist()}))
            break
    return out


def _scores(t, x, z, cp: ControlProblem) -> Array:
    n = x.shape[0]
    cols = []
    for j in range(cp.n_controls):
        a = cp.controls(j, n)
        r = np.asarray(cp.feedback(x, a), dtype=float).reshape(n, -1)
        cols.append(np.sum(z * r, axis=1) + cp.running_cost(t, x, a))
    return np.column_stack(cols)


def hamiltonian(t: float, x, z, cp: ControlProblem):
    """``max_a z R(x, a) + l(t, x, a)`` over the grid and the first maximizer.

    Batched inputs ``x (n, d)``, ``z (n, k)`` give ``(n,)`` values and ``(n, ...)``
    controls; single vectors give a scalar and one control.
    """
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    z2 = np.atleast_2d(np.asarray(z, dtype=float))
    scores = _scores(t, x2, z2, cp)
    idx = np.argmax(scores, axis=1)  # first index on ties
    value = scores[np.arange(x2.shape[0]), idx]
    ctrl = cp.control_grid[idx]
    if single:
        return float(value[0]), ctrl[0]
    return value, ctrl


def select_gamma(t: float, x, z, cp: ControlProblem):
    """Measurable selection of the Hamiltonian argmax (first grid maximizer)."""
    return hamiltonian(t, x, z, cp)[1]


def hamiltonian_generator(cp: ControlProblem):
    """Generator ``psi(t, x, y, z) = hamiltonian(t, x, z)``."""
    def psi(t, x, y, z):
        return hamiltonian(t, x, z, cp)[0]
    return psi


# --- change of measure ------------------------------------------------------


def girsanov_weight(paths: PathEnsemble, integrand) -> Array:
    """Per-path density ``exp(sum theta dW - 0.5 sum |theta|^2 dt)``.

    ``integrand`` is ``(n_paths, n_steps, k)`` or anything broadcastable to it.
    """
    theta = np.broadcast_to(np.asarray(integrand, dtype=float), paths.dw.shape)
    dt = paths.grid.dt
    log_w = np.sum(theta * paths.dw, axis=(1, 2)) - 0.5 * np.sum(theta**2, axis=(1, 2)) * dt
    return np.exp(log_w)


# --- stopping and cost ------------------------------------------------------


@dataclass(frozen=True)
class StoppingRule:
    """Per-path stopping index in ``0..n_steps`` (``n_steps`` also means never)."""

    index: Array
    tol: float | Array = 0.0

    def __post_init__(self):
        idx = np.asarray(self.index)
        if idx.ndim != 1 or np.any(idx < 0):
            raise ValueError("stopping indices must be a 1-d array of nonnegative integers")
        object.__setattr__(self, "index", idx.astype(np.int64))


def first_hit(gap: Array, tol) -> Array:
    """First column where ``gap <= tol`` per row; the last column if none."""
    hit = gap <= tol
    idx = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), idx, gap.shape[1] - 1)


def optimal_stopping_rule(solution, paths: PathEnsemble, problem: ObstacleProblem,
                          tol=None) -> StoppingRule:
    """First grid index where ``Y - h <= tol``, else ``n_steps``.

    By default ``tol`` is the standard error of the fitted continuation at each
    node, floored at 1e-8. For reflected solutions any node carrying a
    reflection has ``Y = h`` and is therefore never passed; this is asserted.
    """
    grid = paths.grid
    m = grid.n_steps
    gap = np.empty((paths.n_paths, m + 1))
    tols = np.full((paths.n_paths, m + 1), 1e-8)
    feats = solution.meta.get("features")
    for i in range(m + 1):
        t = grid.time(i)
        x = paths.states[:, i]
        gap[:, i] = solution.y[:, i] - problem.obstacle(t, x)
        if tol is None and i < m and solution.continuation:
            extra = feats(t, x) if feats is not None else None
            tols[:, i] = np.maximum(solution.continuation[i].std_error(x, extra), 1e-8)
    if tol is not None:
        tols = np.broadcast_to(np.maximum(tol, 0.0), gap.shape)
    idx = first_hit(gap, tols)
    if solution.meta.get("scheme") == "reflected":
        before = np.arange(m)[None, :] < idx[:, None]
        leaked = np.sum(np.where(before, solution.k_increments, 0.0), axis=1)
        if np.any(leaked != 0.0):
            p = int(np.flatnonzero(leaked != 0.0)[0])
            raise RuntimeError(f"reflection before the stopping time on path {p}")
    return StoppingRule(idx, float(np.median(tols)) if tol is None else tol)


def realized_cost(paths: PathEnsemble, stopping: StoppingRule, problem: ObstacleProblem,
                  cp: ControlProblem | None = None, controls: Array | None = None) -> Array:
    """Per-path ``int_s^tau l dt + phi(X_T) 1{tau = T} + h(tau, X_tau) 1{tau < T}``.

    The running reward uses left-endpoint quadrature on the path grid.
    """
    grid = paths.grid
    n, m = paths.n_paths, grid.n_steps
    tau = stopping.index
    if tau.shape != (n,) or np.any(tau > m):
        raise ValueError("stopping rule does not match the ensemble")
    out = np.zeros(n)
    if cp is not None:
        if controls is None:
            raise ValueError("controls are required with a control problem")
        for i in range(m):
            alive = tau > i
            if alive.any():
                l_i = cp.running_cost(grid.time(i), paths.states[alive, i], controls[alive, i])
                out[alive] += l_i * grid.dt
    rows = np.arange(n)
    x_tau = paths.states[rows, tau]
    end = tau == m
    out[end] += problem.terminal(x_tau[end])
    for i in np.unique(tau[~end]):
        sel = tau == i
        out[sel] += problem.obstacle(grid.time(int(i)), x_tau[sel])
    return out


def simulate_open_loop(model: GalerkinModel, grid: TimeGrid, x0, controls: Array,
                       cp: ControlProblem, seed: int) -> PathEnsemble:
    """Simulate under a per-path control schedule ``controls[p, i]``."""
    controls = np.asarray(controls, dtype=float)
    n = controls.shape[0]
    x0 = np.asarray(x0, dtype=float).reshape(model.state_dim)
    states, dws = [], []
    for b, (lo, hi) in enumerate(block_bounds(n)):
        dw = block_increments(seed, b, hi - lo, grid.n_steps, model.noise_dim, grid.dt)
        block = controls[lo:hi]

        def policy(t, x, block=block):
            return block[:, grid.index(t)]

        st, _ = propagate(model, grid, x0, dw, policy=policy, feedback=cp.feedback, path_offset=lo)
        states.append(st)
        dws.append(dw)
    return PathEnsemble(grid, np.concatenate(states), np.concatenate(dws), seed, controls)


def _mean_se(v):
    return float(np.mean(v)), float(np.std(v) / np.sqrt(v.size))


def cost_J(model: GalerkinModel, cp: ControlProblem, problem: ObstacleProblem, grid: TimeGrid,
           x0, stopping, controls: Array, seed: int):
    """Monte Carlo estimate ``(J, SE)`` of the reward of an open-loop control and a stopping rule.

    ``controls`` is ``(n_paths, n_steps, ...)``; ``stopping`` is a
    :class:`StoppingRule` or a function of the simulated ensemble returning one.
    """
    paths = simulate_open_loop(model, grid, x0, controls, cp, seed)
    rule = stopping(paths) if callable(stopping) else stopping
    return _mean_se(realized_cost(paths, rule, problem, cp, paths.controls))


def stopping_boundary(paths: PathEnsemble, rule: StoppingRule, problem: ObstacleProblem,
                      y: Array | None = None, tol=None, min_hits: int = 20) -> Array:
    """Largest state in the stopping region at each node (``nan`` if too few hits).

    The stopping region at node i is ``{Y_i - h <= tol, h above its floor}``;
    without ``y`` the first hitting times of ``rule`` are used instead.
    """
    grid = paths.grid
    out = np.full(grid.n_steps + 1, np.nan)
    for i in range(grid.n_steps + 1):
        x = paths.states[:, i]
        h = problem.obstacle(grid.time(i), x)
        live = h > h.min()
        if y is not None:
            gap_tol = rule.tol if tol is None else tol
            sel = (y[:, i] - h <= np.broadcast_to(gap_tol, h.shape)) & live
        else:
            sel = (rule.index == i) & live
        if sel.sum() >= min_hits:
            out[i] = float(x[sel, 0].max())
    return out


# --- closed loop ------------------------------------------------------------


@dataclass(frozen=True)
class ClosedLoopResult:
    paths: PathEnsemble
    controls: Array
    stopping: StoppingRule
    J: float
    se: float


def closed_loop(model: GalerkinModel, cp: ControlProblem, problem: ObstacleProblem,
                grid: TimeGrid, x0, zeta_hat, value_fn, n_paths: int, seed: int,
                n_workers: int = 1) -> ClosedLoopResult:
    """Run the feedback ``a(t, x) = select_gamma(t, x, zeta_hat(t, x))``.

    ``value_fn(i, x)`` evaluates the value at node ``i``; the stopping rule is
    the first node where it meets the obstacle on the controlled paths.
    """
    from .forward import simulate_controlled

    def policy(t, x):
        return select_gamma(t, x, zeta_hat(grid.index(t), x), cp)

    paths = simulate_controlled(model, grid, x0, policy, cp, n_paths, seed, n_workers)
    m = grid.n_steps
    gap = np.empty((n_paths, m + 1))
    for i in range(m + 1):
        x = paths.states[:, i]
        gap[:, i] = value_fn(i, x) - problem.obstacle(grid.time(i), x)
    rule = StoppingRule(first_hit(gap, 1e-8), 1e-8)
    cost = realized_cost(paths, rule, problem, cp, paths.controls)
    j, se = _mean_se(cost)
    return ClosedLoopResult(paths, paths.controls, rule, j, se)


# --- verification -------------------------------------------------------------


def _random_trial(rng: np.random.Generator, cp: ControlProblem, grid: TimeGrid, u: float):
    m = grid.n_steps
    n_seg = int(rng.integers(1, 6))
    cuts = np.sort(rng.choice(np.arange(1, m), size=min(n_seg - 1, m - 1), replace=False))
    picks = rng.integers(0, cp.n_controls, size=cuts.size + 1)
    schedule = picks[np.searchsorted(cuts, np.arange(m), side="right")]
    kind = ["fixed", "level", "never"][int(rng.integers(0, 3))]
    if kind == "fixed":
        param = int(rng.integers(0, m + 1))
    elif kind == "level":
        param = float(u * rng.uniform(0.5, 2.0))
    else:
        param = None
    desc = {"control_schedule": cp.control_grid[schedule].tolist(), "stopping": kind,
            "stopping_param": param}
    return schedule, kind, param, desc


def _rule_for(kind, param, problem):
    def rule(paths: PathEnsemble) -> StoppingRule:
        n, m = paths.n_paths, paths.grid.n_steps
        if kind == "fixed":
            return StoppingRule(np.full(n, param))
        if kind == "never":
            return StoppingRule(np.full(n, m))
        pay = np.column_stack([problem.obstacle(paths.grid.time(i), paths.states[:, i])
                               for i in range(m + 1)])
        return StoppingRule(first_hit(param - pay, 0.0))
    return rule


def verify_fundamental_relation(model: GalerkinModel, cp: ControlProblem,
                                problem: ObstacleProblem, s: float, x, n_random_controls: int,
                                seed: int, config) -> dict:
    """Check ``J <= u`` for random (control, stopping) pairs and ``J ~ u`` in closed loop.

    ``config`` is an :class:`~rbsde.analysis.SolverConfig` used for the value
    and for every cost estimate. Returns a JSON-ready report; failures are
    report entries, not exceptions.
    """
    from .analysis import ValueFunction, estimate_zeta, solve_from
    from .rng import derive_seed

    if n_random_controls < 1:
        raise ValueError("n_random_controls must be >= 1")
    cfg = config.replace(seed=derive_seed(seed, 0), scheme="reflected")
    solved = solve_from(model, problem, s, x, cfg)
    sol, grid = solved.solution, solved.paths.grid
    u, u_se = sol.y0, sol.y0_se
    zeta = estimate_zeta(sol, solved.paths)
    value_fn = ValueFunction(sol, problem, grid)

    trials = []
    for j in range(n_random_controls):
        rng = np.random.default_rng(derive_seed(seed, 1, j))
        schedule, kind, param, desc = _random_trial(rng, cp, grid, u)
        controls = np.broadcast_to(cp.control_grid[schedule],
                                   (cfg.n_paths,) + cp.control_grid[schedule].shape)
        J, se = cost_J(model, cp, problem, grid, x, _rule_for(kind, param, problem),
                       controls, derive_seed(seed, 2, j))
        comb = float(np.hypot(se, u_se))
        slack = u - J
        trials.append({"trial": j, **desc, "J": J, "se": se, "slack": slack,
                       "combined_se": comb, "pass": bool(slack >= -3.0 * comb)})

    cl = closed_loop(model, cp, problem, grid, x, zeta, value_fn, cfg.n_paths,
                     derive_seed(seed, 3), cfg.n_workers)
    comb = float(np.hypot(cl.se, u_se))
    gap = u - cl.J
    closed = {"J": cl.J, "se": cl.se, "gap": gap, "combined_se": comb,
              "relative_gap": gap / abs(u) if u != 0 else float("inf"),
              "pass": bool(abs(gap) <= 0.02 * abs(u) + 3.0 * comb)}
    return {"s": float(s), "x": np.atleast_1d(x).astype(float).tolist(), "u": u, "u_se": u_se,
            "trials": trials, "closed_loop": closed,
            "passed": bool(all(t["pass"] for t in trials) and closed["pass"])}
