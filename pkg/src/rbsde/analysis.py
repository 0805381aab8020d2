"""Value function, generalized gradient and supersolution diagnostics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .backward import (BackwardSolution, PenaltySchedule, PenaltyTrace, solve_rbsde,
                       solve_reflected)
from .forward import PathEnsemble, simulate
from .model import GalerkinModel, ObstacleProblem, TimeGrid
from .regression import BasisSpec, LinearFit, Projector

Array = np.ndarray


@dataclass(frozen=True)
class SolverConfig:
    """How a value is computed: grid on ``[s, T]``, ensemble size, basis and scheme."""

    T: float = 1.0
    n_steps: int = 50
    n_paths: int = 20_000
    seed: int = 0
    basis: BasisSpec = BasisSpec()
    scheme: str = "reflected"  # or "penalized"
    schedule: PenaltySchedule = PenaltySchedule()
    penalty_kind: str = "hard"
    n_workers: int = 1

    def __post_init__(self):
        if self.scheme not in ("reflected", "penalized"):
            raise ValueError(f"scheme must be 'reflected' or 'penalized', got {self.scheme!r}")
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("n_paths and n_steps must be positive")

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Solved:
    paths: PathEnsemble
    solution: BackwardSolution
    trace: PenaltyTrace | None = None


def solve_from(model: GalerkinModel, problem: ObstacleProblem, s: float, x,
               config: SolverConfig) -> Solved:
    """Fresh ensemble from ``(s, x)`` and a backward solve with ``config``."""
    if not s < config.T:
        raise ValueError(f"need s < T, got s={s}, T={config.T}")
    grid = TimeGrid(s, config.T, config.n_steps)
    paths = simulate(model, grid, x, config.n_paths, config.seed, config.n_workers)
    if config.scheme == "reflected":
        return Solved(paths, solve_reflected(paths, problem, config.basis))
    sol, trace = solve_rbsde(paths, problem, config.schedule, config.basis, config.penalty_kind)
    return Solved(paths, sol, trace)


def evaluate_u(model: GalerkinModel, problem: ObstacleProblem, s: float, x,
               config: SolverConfig) -> tuple[float, float]:
    """``u(s, x) = Y_s`` for the ensemble started at ``(s, x)``, with its SE."""
    sol = solve_from(model, problem, s, x, config).solution
    return sol.y0, sol.y0_se


# --- value and gradient fields ----------------------------------------------


@dataclass(frozen=True)
class ZetaField:
    """Per-slice regressions of ``Z_i`` on the state: ``zeta(i, x) -> (n, k)``."""

    grid: TimeGrid
    fits: tuple
    features: object = field(default=None, repr=False)

    def _extra(self, i, x):
        return self.features(self.grid.time(i), x) if self.features is not None else None

    def __call__(self, i: int, x) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        i = min(int(i), len(self.fits) - 1)
        return self.fits[i].predict(x, self._extra(i, x))

    def std_error(self, i: int, x) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        i = min(int(i), len(self.fits) - 1)
        return self.fits[i].std_error(x, self._extra(i, x))

    def to_csv(self, fh, states: Array) -> None:
        """Evaluate every slice at ``states`` and write ``step, time, x.., zeta..`` rows."""
        states = np.atleast_2d(states)
        d = states.shape[1]
        w = csv.writer(fh, lineterminator="\n")
        k = self(0, states[:1]).shape[1]
        w.writerow(["step", "time"] + [f"x_{j + 1}" for j in range(d)]
                   + [f"zeta_{j + 1}" for j in range(k)])
        for i in range(len(self.fits)):
            z = self(i, states)
            for x, zr in zip(states, z):
                w.writerow([i, repr(float(self.grid.time(i)))] + [repr(float(v)) for v in x]
                           + [repr(float(v)) for v in zr])


def estimate_zeta(solution: BackwardSolution, paths: PathEnsemble,
                  basis: BasisSpec | None = None) -> ZetaField:
    """Regression of the raw Z targets on features of ``X_i``, per slice.

    With the solve's basis this is the solve's own Z regression (piecewise
    when the solve was localized); another basis refits every slice
    globally. Standard errors reflect the Monte Carlo noise of the raw
    targets.
    """
    if (basis is None or basis == solution.meta["basis"]) and solution.z_fits:
        return ZetaField(paths.grid, solution.z_fits, solution.meta.get("features"))
    basis = basis or solution.meta["basis"]
    feats = solution.meta.get("features") if basis.include_payoff_feature else None
    fits: list[LinearFit] = []
    for i in range(paths.grid.n_steps):
        t = paths.grid.time(i)
        x = paths.states[:, i]
        extra = feats(t, x) if feats is not None else None
        target = solution.z[:, i] if solution.z_samples is None else solution.z_samples[:, i]
        fits.append(Projector(x, basis, extra).fit(target)[0])
    return ZetaField(paths.grid, tuple(fits), feats)


@dataclass(frozen=True)
class ValueFunction:
    """Out-of-sample evaluation of the discrete value at the grid nodes.

    ``value(i, x) = max(h, C_i(x) + psi(t_i, x, C_i(x), Z_i(x)) dt)`` with the
    fitted continuation ``C_i`` and Z-regression of the solve.
    """

    solution: BackwardSolution
    problem: ObstacleProblem
    grid: TimeGrid

    def __call__(self, i: int, x) -> Array:
        return self.value(i, x)

    def value(self, i: int, x) -> Array:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = self.grid.time(i)
        if i >= self.grid.n_steps:
            return self.problem.terminal(x)
        feats = self.solution.meta.get("features")
        extra = feats(t, x) if feats is not None else None
        cont = self.solution.continuation[i].predict(x, extra)
        z = self.solution.z_fits[i].predict(x, extra)
        z = z.reshape(x.shape[0], -1)
        ytilde = cont + self.problem.generator(t, x, cont, z) * self.grid.dt
        return np.maximum(ytilde, self.problem.obstacle(t, x))


@dataclass(frozen=True)
class ValueField:
    eval_points: list
    values: Array
    std_errors: Array
    zeta: ZetaField | None = None

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        d = len(np.atleast_1d(self.eval_points[0][1]))
        w.writerow(["time"] + [f"x_{j + 1}" for j in range(d)] + ["u", "se"])
        for (t, x), u, se in zip(self.eval_points, self.values, self.std_errors):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in np.atleast_1d(x)]
                       + [repr(float(u)), repr(float(se))])


def value_field(model: GalerkinModel, problem: ObstacleProblem, points, config: SolverConfig
                ) -> ValueField:
    """``u`` at each ``(s, x)`` point, all runs sharing the configured seed."""
    vals, ses = [], []
    for s, x in points:
        v, se = evaluate_u(model, problem, s, np.atleast_1d(x), config)
        vals.append(v)
        ses.append(se)
    return ValueField(list(points), np.array(vals), np.array(ses))


# --- diagnostics --------------------------------------------------------------


def check_covariation(solution: BackwardSolution, paths: PathEnsemble, zeta_hat, xi) -> float:
    """Normalized gap between the discrete covariation of ``u(t, X)`` with ``W.xi``
    and ``int zeta.xi dt``, per path.

    Returns ``mean|sum dY (dW.xi) - sum zeta.xi dt| / mean|sum dY (dW.xi)|``
    (0 when both sums vanish).
    """
    xi = np.asarray(xi, dtype=float)
    if abs(np.linalg.norm(xi) - 1.0) > 1e-9:
        raise ValueError("xi must be a unit vector")
    grid = paths.grid
    dy = np.diff(solution.y, axis=1)
    cov = np.sum(dy * (paths.dw @ xi), axis=1)
    integral = np.zeros(paths.n_paths)
    for i in range(grid.n_steps):
        integral += zeta_hat(i, paths.states[:, i]) @ xi * grid.dt
    denom = np.mean(np.abs(cov))
    num = np.mean(np.abs(cov - integral))
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / denom)


def dominant_direction(zeta_hat, paths: PathEnsemble) -> Array:
    """Unit noise direction of the average estimated gradient (``e_1`` if it vanishes).

    The covariation residual is only informative along directions where the
    gradient is not small compared with the other components.
    """
    k = paths.dw.shape[2]
    mean = np.zeros(k)
    for i in range(paths.grid.n_steps):
        mean += np.mean(zeta_hat(i, paths.states[:, i]), axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else np.eye(k)[0]


@dataclass(frozen=True)
class SupersolutionReport:
    slack: float
    se: float
    u_s: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.slack >= -3.0 * self.se


def check_supersolution(model: GalerkinModel, problem: ObstacleProblem, s: float, t: float,
                        x, config: SolverConfig, candidate: ObstacleProblem | None = None
                        ) -> SupersolutionReport:
    """Signed slack ``u(s,x) - E[u(t, X_t)] - int_s^t E[psi(r, X, u, zeta)] dr``.

    The candidate ``u`` is the value of ``candidate`` (default: ``problem``)
    computed on one ensemble from ``(s, x)``; ``psi`` is always the generator
    of ``problem``. The time integral uses the trapezoid rule on the grid.
    """
    if not s < t <= config.T:
        raise ValueError("need s < t <= T")
    solved = solve_from(model, candidate or problem, s, x, config)
    sol, paths = solved.solution, solved.paths
    grid = paths.grid
    j = grid.index(t + 1e-12 * grid.dt)
    m = grid.n_steps
    psi = np.empty((paths.n_paths, j + 1))
    for i in range(j + 1):
        zi = sol.z[:, min(i, m - 1)]
        psi[:, i] = problem.generator(grid.time(i), paths.states[:, i], sol.y[:, i], zi)
    integral = np.zeros(paths.n_paths)
    if j > 0:
        integral = 0.5 * grid.dt * (psi[:, 0] + psi[:, j] + 2.0 * psi[:, 1:j].sum(axis=1))
    q = sol.y[:, j] + integral
    rhs = float(np.mean(q))
    se = float(np.hypot(np.std(q) / np.sqrt(q.size), sol.y0_se))
    return SupersolutionReport(sol.y0 - rhs, se, sol.y0, rhs)


@dataclass(frozen=True)
class LipschitzReport:
    max_ratio: float
    ratios: Array
    resolved: bool  # every pair separated by at least 10 value SEs


def check_lipschitz(u_eval, s: float, pairs, m: float) -> LipschitzReport:
    """Max of ``|u(s,x1) - u(s,x2)| / (|x1 - x2| (1 + |x1|^{m(m+1)} + |x2|^{m(m+1)}))``.

    ``u_eval(s, x)`` returns ``(value, se)``.
    """
    cache = {}

    def u(x):
        key = tuple(np.atleast_1d(x).tolist())
        if key not in cache:
            cache[key] = u_eval(s, np.atleast_1d(np.asarray(x, dtype=float)))
        return cache[key]

    ratios = []
    resolved = True
    e = m * (m + 1)
    for x1, x2 in pairs:
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        dx = float(np.linalg.norm(x1 - x2))
        if dx == 0.0:
            raise ValueError("pairs must be distinct")
        (u1, se1), (u2, se2) = u(x1), u(x2)
        resolved &= dx >= 10.0 * max(se1, se2)
        w = 1.0 + np.linalg.norm(x1) ** e + np.linalg.norm(x2) ** e
        ratios.append(abs(u1 - u2) / (dx * w))
    ratios = np.array(ratios)
    return LipschitzReport(float(ratios.max()), ratios, bool(resolved))


def obstacle_monotonicity(model: GalerkinModel, problem: ObstacleProblem, obstacles, points,
                          config: SolverConfig) -> Array:
    """Slack ``(u_{h'} - u_h) / SE`` for each enlarged obstacle (rows) and point (columns).

    Every run shares the configured seed, so differences are paired. Entries
    at or above -3 support the minimality of the solution. The enlarged
    problems keep ``phi`` and use the terminal fallback, since ``h'(T)`` may
    exceed it.
    """
    base = [solve_from(model, problem, s, x, config).solution for s, x in points]
    out = np.empty((len(obstacles), len(points)))
    for a, h2 in enumerate(obstacles):
        prob2 = problem.replace(obstacle=h2, terminal_fallback=True)
        for b, (s, x) in enumerate(points):
            sol2 = solve_from(model, prob2, s, x, config).solution
            diff = sol2.meta["y0_paths"] - base[b].meta["y0_paths"]
            se = float(np.std(diff) / np.sqrt(diff.size))
            gap = sol2.y0 - base[b].y0
            out[a, b] = gap / se if se > 0 else (np.inf if gap >= 0 else -np.inf)
    return out


def zeta_saturation(solution: BackwardSolution, paths: PathEnsemble,
                    basis: BasisSpec | None = None) -> tuple[Array, Array]:
    """Per-slice residual mean squares of the Z regression at ``basis`` and at
    doubled polynomial degree."""
    basis = basis or solution.meta["basis"]
    wide = replace(basis, poly_degree=max(1, 2 * basis.poly_degree))
    feats = solution.meta.get("features") if basis.include_payoff_feature else None
    ms, ms2 = [], []
    for i in range(paths.grid.n_steps):
        t = paths.grid.time(i)
        x = paths.states[:, i]
        extra = feats(t, x) if feats is not None else None
        z = solution.z[:, i]
        for b, acc in ((basis, ms), (wide, ms2)):
            fitted = Projector(x, b, extra).fit(z)[1]
            acc.append(float(np.mean((z - fitted) ** 2)))
    return np.array(ms), np.array(ms2)


def terminal_gap(model: GalerkinModel, problem: ObstacleProblem, x, config: SolverConfig,
                 dt: float) -> float:
    """``|u(T - dt, x) - phi(x)|`` from a one-step solve."""
    cfg = config.replace(n_steps=1)
    u, _ = evaluate_u(model, problem, config.T - dt, x, cfg)
    phi = float(problem.terminal(np.atleast_2d(np.asarray(x, dtype=float)))[0])
    return abs(u - phi)
