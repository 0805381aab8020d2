"""Least-squares conditional expectations across a path ensemble."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np

Array = np.ndarray


class RegressionError(ValueError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis in the state, optionally augmented with payoff columns.

    ``ridge`` is relative: the Tikhonov weight actually used is
    ``ridge * trace(Phi^T Phi) / n_columns`` on the standardized design.
    """

    poly_degree: int = 2
    include_payoff_feature: bool = True
    ridge: float = 1e-10

    def __post_init__(self):
        if self.poly_degree < 0:
            raise ValueError("poly_degree must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    def n_features(self, state_dim: int) -> int:
        n = comb(state_dim + self.poly_degree, self.poly_degree)
        return n + (2 if self.include_payoff_feature else 0)

    def check_size(self, state_dim: int, n_paths: int) -> None:
        p = self.n_features(state_dim)
        if 10 * p >= n_paths:
            raise ValueError(
                f"basis has {p} features; need fewer than n_paths/10 = {n_paths / 10:g}"
            )


def polynomial_features(xs: Array, degree: int) -> Array:
    """All monomials of total degree <= ``degree``, constant column first."""
    xs = np.asarray(xs, dtype=float)
    n, d = xs.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for idx in combinations_with_replacement(range(d), deg):
            c = xs[:, idx[0]].copy()
            for j in idx[1:]:
                c *= xs[:, j]
            cols.append(c)
    return np.column_stack(cols)


def _raw_features(xs, basis, extra, x_center=0.0, x_scale=1.0):
    phi = polynomial_features((xs - x_center) / x_scale, basis.poly_degree)
    if basis.include_payoff_feature and extra is not None:
        phi = np.column_stack([phi, extra])
    return phi


@dataclass(frozen=True)
class LinearFit:
    """A fitted projection that can be evaluated at new states."""

    basis: BasisSpec
    x_center: Array  # state standardization applied before forming monomials
    x_scale: Array
    keep: Array  # raw non-constant columns retained
    center: Array
    scale: Array
    coef: Array  # (1 + n_kept, q)
    cov_factor: Array  # design @ cov_factor has row norms equal to the leverages
    resid_std: Array  # (q,)
    n_obs: int
    squeeze: bool

    def _design(self, xs, extra=None):
        raw = _raw_features(np.atleast_2d(xs), self.basis, extra,
                            self.x_center, self.x_scale)[:, 1:]
        cols = (raw[:, self.keep] - self.center) / self.scale
        return np.column_stack([np.ones(raw.shape[0]), cols])

    def predict(self, xs, extra=None) -> Array:
        out = self._design(xs, extra) @ self.coef
        return out[:, 0] if self.squeeze else out

    def std_error(self, xs, extra=None) -> Array:
        """Standard error of the fitted conditional mean at ``xs``."""
        lev = np.sqrt(np.sum((self._design(xs, extra) @ self.cov_factor) ** 2, axis=1))
        out = lev[:, None] * self.resid_std[None, :]
        return out[:, 0] if self.squeeze else out


class Projector:
    """Least-squares projector onto the basis span at fixed sample states.

    The decomposition is computed once, so several target vectors can be
    projected on the same states cheaply.
    """

    def __init__(self, xs, basis: BasisSpec, extra=None):
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        if not np.all(np.isfinite(xs)) or (extra is not None and not np.all(np.isfinite(extra))):
            raise RegressionError("non-finite regression inputs")
        # monomials of the standardized state span the same space but are far
        # better conditioned when the state sits away from the origin
        self.x_center = xs.mean(axis=0)
        sd = xs.std(axis=0)
        self.x_scale = np.where(sd > 1e-12 * (1.0 + np.abs(self.x_center)), sd, 1.0)
        raw = _raw_features(xs, basis, extra, self.x_center, self.x_scale)[:, 1:]
        n = xs.shape[0]
        if raw.shape[1] + 1 >= n:
            raise RegressionError(
                f"need more paths ({n}) than features ({raw.shape[1] + 1})"
            )
        center = raw.mean(axis=0)
        scale = raw.std(axis=0)
        keep = scale > 1e-12 * (1.0 + np.abs(center))
        self.basis = basis
        self.keep = keep
        self.center = center[keep]
        self.scale = scale[keep]
        self.cols = (raw[:, keep] - self.center) / self.scale
        self.n = n
        self.n_cols = 1 + self.cols.shape[1]
        # the intercept is the sample mean (columns are centered, hence
        # orthogonal to it); only the remaining coefficients are ridged
        if self.cols.shape[1]:
            u, s, vt = np.linalg.svd(self.cols, full_matrices=False)
        else:
            u, s, vt = np.zeros((n, 0)), np.zeros(0), np.zeros((0, 0))
        if s.size and basis.ridge == 0.0:
            if s[-1] <= 1e-10 * s[0]:
                raise RegressionError(
                    "rank-deficient normal equations; use a positive ridge"
                )
            filt = 1.0 / s
        elif s.size:
            lam = basis.ridge * np.sum(s**2) / s.size
            filt = s / (s**2 + lam)
        else:
            filt = s
        self.u = u
        q = vt.shape[1]
        self.cov_factor = np.zeros((1 + q, 1 + s.size))
        self.cov_factor[0, 0] = 1.0 / np.sqrt(n)
        self.cov_factor[1:, 1:] = vt.T * filt

    @property
    def design(self) -> Array:
        return np.column_stack([np.ones(self.n), self.cols])

    def fit(self, targets) -> tuple[LinearFit, Array]:
        """Return the fitted model and its in-sample predictions."""
        y = np.asarray(targets, dtype=float)
        squeeze = y.ndim == 1
        y2 = y[:, None] if squeeze else y
        if not np.all(np.isfinite(y2)):
            raise RegressionError("non-finite regression targets")
        mu = y2.mean(axis=0)
        rest = self.cov_factor[1:, 1:] @ (self.u.T @ (y2 - mu))
        coef = np.vstack([mu[None, :], rest])
        fitted = mu + self.cols @ rest
        dof = max(self.n - self.n_cols, 1)
        resid_std = np.sqrt(np.sum((y2 - fitted) ** 2, axis=0) / dof)
        fit = LinearFit(self.basis, self.x_center, self.x_scale, self.keep, self.center,
                        self.scale, coef, self.cov_factor, resid_std, self.n, squeeze)
        return fit, (fitted[:, 0] if squeeze else fitted)


def fit(xs, targets, basis: BasisSpec, extra=None) -> LinearFit:
    return Projector(xs, basis, extra).fit(targets)[0]


def fit_predict(xs, targets, basis: BasisSpec, extra=None) -> Array:
    """Least-squares projection of ``targets`` on the basis, evaluated in-sample."""
    return Projector(xs, basis, extra).fit(targets)[1]
