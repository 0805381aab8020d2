"""Backward induction for plain, penalized and reflected BSDEs on an ensemble.

All schemes share one regression step per node:

    C_i   = E[Y_{i+1} | X_i]                       (projection)
    Z_i   = E[(Y_{i+1} - C_i) dW_i | X_i] / dt
    Yt_i  = C_i + f(t_i, X_i, C_i, Z_i) dt         (explicit generator)

and differ in how ``Y_i`` is obtained from ``Yt_i`` and the obstacle.

With ``targets="pathwise"`` the next regression target is not ``Y_i`` but the
path value ``V_i = Y_i + s_i (V_{i+1} - C_i)`` where ``s_i = dY_i/dYt_i``
(1 off the obstacle, 0 where reflected). For the reflected scheme this is the
Longstaff-Schwartz recursion: exercised paths restart from ``h``, the others
keep their realized continuation. It removes the upward bias that projected
targets accumulate through the max when the basis is misspecified.

With ``localize`` the continuation used in the obstacle comparison is fitted
piecewise: separately on the paths where the obstacle sits above its
ensemble-wide floor (for a put, the in-the-money paths) and on the rest. A
single global polynomial otherwise bends below the floor in the flat region
and triggers spurious reflections there. Reflections at the floor still enter
the reported ``Y`` and ``K`` but not the path values, which carry the realized
continuation ``V_{i+1} + f dt`` (a put is never exercised out of the money).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .forward import PathEnsemble
from .model import ObstacleProblem
from .regression import BasisSpec, LinearFit, Projector

Array = np.ndarray


@dataclass(frozen=True)
class BackwardSolution:
    y: Array  # (n_paths, n_steps + 1)
    z: Array  # (n_paths, n_steps, k)
    k_increments: Array  # (n_paths, n_steps)
    meta: dict
    continuation: tuple = field(default=(), repr=False)  # LinearFit or PiecewiseFit per step
    z_fits: tuple = field(default=(), repr=False)
    z_samples: Array | None = field(default=None, repr=False)  # raw Z regression targets

    @property
    def y0(self) -> float:
        return float(self.meta["y0"])

    @property
    def y0_se(self) -> float:
        return float(self.meta["y0_se"])

    @property
    def k_total(self) -> Array:
        return self.k_increments.sum(axis=1)


@dataclass(frozen=True)
class PenaltySchedule:
    """Increasing penalty levels; ``tol=None`` means three standard errors of Y0."""

    levels: tuple = tuple(2.0**j for j in range(11))
    tol: float | None = None

    def __post_init__(self):
        lv = tuple(float(v) for v in self.levels)
        if not lv:
            raise ValueError("penalty levels must be nonempty")
        if lv[0] <= 0 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("penalty levels must be positive and strictly increasing")
        if self.tol is not None and self.tol <= 0:
            raise ValueError("tol must be positive")
        object.__setattr__(self, "levels", lv)


def payoff_features(problem: ObstacleProblem) -> Callable[[float, Array], Array]:
    return lambda t, x: np.column_stack([problem.obstacle(t, x), problem.terminal(x)])


# --- smooth penalty --------------------------------------------------------

# l(r) = c*6r(1-r) + 3r^2 - 2r^3 on [0, 1]; the smoothstep part integrates to
# 1/2, so c = 1/2 gives int_0^1 l = 1 with l(1) = 1.
_BUMP = 0.5


def _ell(r):
    return _BUMP * 6.0 * r * (1.0 - r) + 3.0 * r**2 - 2.0 * r**3


def _ell_integral(r):
    return _BUMP * (3.0 * r**2 - 2.0 * r**3) + r**3 - 0.5 * r**4


def smooth_penalty(y):
    """C^1 penalty ``gamma`` and its derivative.

    ``gamma(y) = 0`` for ``y >= 0``, ``-y`` for ``y <= -1`` and
    ``int_0^{-y} l(r) dr`` in between.
    """
    y = np.asarray(y, dtype=float)
    r = np.clip(-y, 0.0, 1.0)
    mid = np.where(-y >= 1.0, -y, _ell_integral(r))
    val = np.where(y >= 0.0, 0.0, mid)
    der = np.where(y >= 0.0, 0.0, np.where(-y >= 1.0, -1.0, -_ell(r)))
    if val.ndim == 0:
        return float(val), float(der)
    return val, der


def _smooth_implicit(ytilde, h, a, iters=60):
    """Solve ``y - a*gamma(y - h) = ytilde`` (strictly increasing in y)."""
    y = np.where(ytilde >= h, ytilde, 0.5 * (ytilde + h))
    lo = np.minimum(ytilde, h)
    hi = np.maximum(ytilde, h)
    for _ in range(iters):
        g, dg = smooth_penalty(y - h)
        res = y - a * g - ytilde
        lo = np.where(res < 0, y, lo)
        hi = np.where(res > 0, y, hi)
        step = y - res / (1.0 - a * dg)
        bad = (step <= lo) | (step >= hi)
        y_new = np.where(bad, 0.5 * (lo + hi), step)
        if np.max(np.abs(y_new - y), initial=0.0) < 1e-14 * (1.0 + np.max(np.abs(y))):
            y = y_new
            break
        y = y_new
    return np.where(ytilde >= h, ytilde, y)


# --- core induction ---------------------------------------------------------


def _backward(paths: PathEnsemble, generator, terminal_values, basis: BasisSpec,
              features, node_update, scheme: str, extra_meta=None, pathwise=False,
              live=None):
    grid = paths.grid
    n, m = paths.n_paths, grid.n_steps
    k = paths.dw.shape[2]
    dt = grid.dt
    basis.check_size(paths.states.shape[2], n)
    y = np.empty((n, m + 1))
    z = np.empty((n, m, k))
    zs = np.empty((n, m, k))
    dk = np.zeros((n, m))
    term = np.asarray(terminal_values, dtype=float)
    if term.shape != (n,) or not np.all(np.isfinite(term)):
        raise ValueError("terminal values must be a finite array of length n_paths")
    y[:, m] = term
    v = term
    conts: list[LinearFit | None] = [None] * m
    zfits: list[LinearFit | None] = [None] * m
    y0_se = 0.0
    for i in range(m - 1, -1, -1):
        t = grid.time(i)
        x = paths.states[:, i]
        extra = features(t, x) if features is not None else None
        proj = Projector(x, basis, extra)
        cfit, cont = proj.fit(v)
        mask = None
        if live is not None:
            mask, floor = live(t, x)
            cfit, cont = _localized(cfit, cont, mask, x, v, basis, extra, live, t, floor)
        zs[:, i] = (v - cont)[:, None] * paths.dw[:, i] / dt
        zfit, zi = proj.fit(zs[:, i])
        if live is not None:
            zfit, zi = _localized(zfit, zi, mask, x, zs[:, i], basis, extra, live, t, floor)
        ytilde = cont + generator(t, x, cont, zi) * dt
        yi, dki, slope = node_update(i, t, x, ytilde)
        if i == 0:
            y0_se = float(np.std(v) / np.sqrt(n))
            y0_paths = v.copy()
        if not pathwise:
            v = yi
        elif mask is None:
            v = yi + slope * (v - cont)
        else:
            # at the obstacle floor the target keeps the realized continuation
            v = np.where(mask, yi + slope * (v - cont), ytilde + (v - cont))
        y[:, i], dk[:, i] = yi, dki
        z[:, i] = zi
        conts[i] = cfit
        zfits[i] = zfit
    meta = {
        "scheme": scheme,
        "basis": basis,
        "dt": dt,
        # clamp round-off so the mean stays within the per-path range
        "y0": float(np.clip(np.mean(y[:, 0]), y[:, 0].min(), y[:, 0].max())),
        "y0_se": y0_se,
        "features": features,
        "targets": "pathwise" if pathwise else "projected",
        "localized": live is not None,
        "y0_paths": y0_paths,
    }
    if extra_meta:
        meta.update(extra_meta)
    return BackwardSolution(y, z, dk, meta, tuple(conts), tuple(zfits), zs)


@dataclass(frozen=True)
class PiecewiseFit:
    """Two fits split by whether the obstacle exceeds ``floor`` at time ``t``."""

    live: Callable
    t: float
    floor: float
    inside: LinearFit
    outside: LinearFit

    def _mask(self, xs):
        return self.live(self.t, np.atleast_2d(xs), self.floor)[0]

    def _combine(self, method, xs, extra):
        xs = np.atleast_2d(xs)
        mask = self._mask(xs)
        out = None
        for part, f in ((mask, self.inside), (~mask, self.outside)):
            if part.any():
                vals = getattr(f, method)(xs[part], None if extra is None else extra[part])
                if out is None:
                    out = np.empty((xs.shape[0],) + vals.shape[1:])
                out[part] = vals
        return out

    def predict(self, xs, extra=None):
        return self._combine("predict", xs, extra)

    def std_error(self, xs, extra=None):
        return self._combine("std_error", xs, extra)


def _localized(cfit, cont, mask, x, v, basis, extra, live, t, floor):
    """Refit ``v`` separately on ``mask`` and its complement.

    Keeps the global fit unless both pieces hold more than ten observations
    per feature.
    """
    n_live = int(mask.sum())
    need = 10 * basis.n_features(x.shape[1])
    if n_live <= need or mask.size - n_live <= need:
        return cfit, cont
    out = np.empty_like(cont)
    fits = []
    for part in (mask, ~mask):
        sub = Projector(x[part], basis, None if extra is None else extra[part])
        f, out[part] = sub.fit(v[part])
        fits.append(f)
    return PiecewiseFit(live, t, floor, fits[0], fits[1]), out


def _obstacle_live(problem):
    def live(t, x, floor=None):
        h = problem.obstacle(t, x)
        if floor is not None:
            return h > floor, floor
        floor = float(h.min())
        mask = h > floor
        return (mask if mask.any() else np.ones_like(mask)), floor
    return live


def solve_bsde(paths: PathEnsemble, generator, terminal_values, basis: BasisSpec = BasisSpec(),
               features=None, k_increments: Array | None = None) -> BackwardSolution:
    """Plain BSDE ``-dY = f dt [+ dK] - Z dW``, ``Y_T = terminal_values``.

    ``k_increments`` optionally adds a given nondecreasing process to the
    equation (used by comparison experiments); it is stored on the solution.
    """
    if k_increments is None:
        def node(i, t, x, ytilde):
            return ytilde, 0.0, 1.0
    else:
        kin = np.asarray(k_increments, dtype=float)
        if kin.shape != paths.dw.shape[:2] or np.any(kin < 0):
            raise ValueError("k_increments must be nonnegative with shape (n_paths, n_steps)")

        def node(i, t, x, ytilde):
            return ytilde + kin[:, i], kin[:, i], 1.0

    return _backward(paths, generator, terminal_values, basis, features, node, "plain")


def _terminal(paths: PathEnsemble, problem: ObstacleProblem) -> Array:
    """``phi(X_T)``, checked against ``h(T, X_T)`` unless the fallback is set.

    Under the fallback the obstacle binds on ``[s, T)`` only: ``Y_T = phi``
    and the first reflection happens at the last interior node.
    """
    xT = paths.states[:, -1]
    phi = problem.terminal(xT)
    if problem.terminal_fallback:
        return phi
    h_T = problem.obstacle(paths.grid.T, xT)
    below = phi < h_T - 1e-12 * (1.0 + np.abs(h_T))  # round-off is not a violation
    if np.any(below):
        p = int(np.flatnonzero(below)[0])
        raise ValueError(
            f"terminal value below obstacle on path {p}: phi={phi[p]:g} < h(T)={h_T[p]:g}; "
            "set terminal_fallback to enforce the obstacle before T only"
        )
    return phi


def _check_targets(targets):
    if targets not in ("pathwise", "projected"):
        raise ValueError(f"targets must be 'pathwise' or 'projected', got {targets!r}")
    return targets == "pathwise"


def solve_penalized(paths: PathEnsemble, problem: ObstacleProblem, penalty_n: float,
                    penalty_kind: str = "hard", basis: BasisSpec = BasisSpec(),
                    targets: str = "pathwise", localize: bool = True) -> BackwardSolution:
    """Penalized BSDE with generator ``psi + n (y - h)^-`` (or ``n*gamma(y - h)``).

    The penalty is taken implicitly at each node, so the scheme stays
    monotone for any ``n*dt``; ``dK_i = n (Y_i - h)^- dt``.
    """
    pathwise = _check_targets(targets)
    if penalty_n <= 0:
        raise ValueError("penalty_n must be positive")
    if penalty_kind not in ("hard", "smooth"):
        raise ValueError(f"unknown penalty_kind {penalty_kind!r}")
    a = penalty_n * paths.grid.dt

    def node(i, t, x, ytilde):
        h = problem.obstacle(t, x)
        if penalty_kind == "hard":
            active = ytilde < h
            yi = np.where(active, (ytilde + a * h) / (1.0 + a), ytilde)
            return yi, a * np.maximum(h - yi, 0.0), np.where(active, 1.0 / (1.0 + a), 1.0)
        yi = _smooth_implicit(ytilde, h, a)
        g, dg = smooth_penalty(yi - h)
        return yi, a * g, 1.0 / (1.0 - a * dg)

    features = payoff_features(problem) if basis.include_payoff_feature else None
    # penalization needs no compatibility between phi and h(T, .)
    terminal = problem.terminal(paths.states[:, -1])
    return _backward(paths, problem.generator, terminal, basis, features, node,
                     "penalized", {"penalty_n": float(penalty_n), "penalty_kind": penalty_kind},
                     pathwise, _obstacle_live(problem) if localize else None)


def solve_reflected(paths: PathEnsemble, problem: ObstacleProblem,
                    basis: BasisSpec = BasisSpec(), targets: str = "pathwise",
                    localize: bool = True) -> BackwardSolution:
    """Discrete reflection: ``Y_i = max(Yt_i, h(t_i, X_i))``, ``dK_i = Y_i - Yt_i``."""
    pathwise = _check_targets(targets)

    def node(i, t, x, ytilde):
        yi = np.maximum(ytilde, problem.obstacle(t, x))
        return yi, yi - ytilde, (yi == ytilde).astype(float)

    features = payoff_features(problem) if basis.include_payoff_feature else None
    return _backward(paths, problem.generator, _terminal(paths, problem), basis, features, node,
                     "reflected", None, pathwise, _obstacle_live(problem) if localize else None)


@dataclass(frozen=True)
class PenaltyTrace:
    levels: tuple
    y0: tuple
    se: tuple
    converged: bool

    def rows(self):
        return list(zip(self.levels, self.y0, self.se))


def solve_rbsde(paths: PathEnsemble, problem: ObstacleProblem,
                schedule: PenaltySchedule = PenaltySchedule(),
                basis: BasisSpec = BasisSpec(), penalty_kind: str = "hard",
                targets: str = "pathwise", localize: bool = True):
    """Run the penalized scheme along ``schedule`` until successive Y0 agree.

    Without an explicit ``schedule.tol`` the stopping tolerance is three
    standard errors of the pathwise difference between the two levels (the
    levels share the ensemble, so this is much tighter than the SE of Y0).
    A level at which the penalty never acts solves every higher level as
    well, so the run stops there. Returns ``(solution, trace)``;
    ``trace.converged`` is False when the levels run out before the tolerance
    is met.
    """
    levels, y0s, ses = [], [], []
    sol = prev = None
    converged = False
    for n in schedule.levels:
        sol = solve_penalized(paths, problem, n, penalty_kind, basis, targets, localize)
        levels.append(n)
        y0s.append(sol.y0)
        ses.append(sol.y0_se)
        if not np.any(sol.k_increments):
            converged = True
            break
        if prev is not None:
            if schedule.tol is not None:
                tol = schedule.tol
            else:
                diff = sol.meta["y0_paths"] - prev.meta["y0_paths"]
                tol = 3.0 * float(np.std(diff)) / np.sqrt(diff.size)
            # a round-off floor so that exactly flat traces count as converged
            if abs(y0s[-1] - y0s[-2]) <= max(tol, 1e-12 * (1.0 + abs(y0s[-1]))):
                converged = True
                break
        prev = sol
    return sol, PenaltyTrace(tuple(levels), tuple(y0s), tuple(ses), converged)


@dataclass(frozen=True)
class NormReport:
    sup_y: float
    z_quadratic: float
    k_terminal: float


def lp_norms(sol: BackwardSolution, p: float) -> NormReport:
    """Sample estimates of ``E sup|Y|^p``, ``E (int |Z|^2 dt)^{p/2}`` and ``E K_T^p``."""
    if p < 2:
        raise ValueError("p must be >= 2")
    dt = sol.meta["dt"]
    sup_y = np.mean(np.max(np.abs(sol.y), axis=1) ** p)
    zq = np.mean((np.sum(sol.z**2, axis=(1, 2)) * dt) ** (p / 2))
    kt = np.mean(sol.k_total**p)
    return NormReport(float(sup_y), float(zq), float(kt))


def martingale_residuals(sol: BackwardSolution, paths: PathEnsemble, generator) -> Array:
    """Per-step residuals ``Y_{i+1} - Y_i + f dt + dK_i - Z_i dW_i``, (n_paths, n_steps).

    ``f`` is evaluated as in the scheme, at the projected value ``Y_i - f dt - dK_i``.
    """
    grid = paths.grid
    m = grid.n_steps
    out = np.empty((paths.n_paths, m))
    for i in range(m):
        t = grid.time(i)
        x = paths.states[:, i]
        cont = sol.continuation[i].predict(x, _extra_for(sol, t, x))
        f = generator(t, x, cont, sol.z[:, i])
        zdw = np.sum(sol.z[:, i] * paths.dw[:, i], axis=1)
        out[:, i] = sol.y[:, i + 1] - sol.y[:, i] + f * grid.dt + sol.k_increments[:, i] - zdw
    return out


def _extra_for(sol, t, x):
    feats = sol.meta.get("features")
    return feats(t, x) if feats is not None else None
