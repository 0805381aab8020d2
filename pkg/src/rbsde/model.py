"""Forward model, obstacle-problem data and sampled hypothesis checks.

Coefficient functions are vectorized over a leading batch axis:

    drift(t, x)          x: (n, d)             -> (n, d)
    diffusion(t, x)      x: (n, d)             -> (n, d, k)
    generator(t, x, y, z) x: (n, d), y: (n,), z: (n, k) -> (n,)
    terminal(x)          x: (n, d)             -> (n,)
    obstacle(t, x)       x: (n, d)             -> (n,)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import expm

Array = np.ndarray


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = s + i*dt`` on ``[s, T]``."""

    s: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (0.0 <= self.s < self.T):
            raise ValueError(f"need 0 <= s < T, got s={self.s}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.n_steps

    @property
    def times(self) -> Array:
        return self.s + np.arange(self.n_steps + 1) * self.dt

    def time(self, i: int) -> float:
        return self.s + i * self.dt

    def index(self, t: float) -> int:
        """Grid index of the last node at or before ``t``."""
        i = int(np.floor((t - self.s) / self.dt + 1e-9))
        return min(max(i, 0), self.n_steps)


def _frozen_array(a) -> Array:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GalerkinModel:
    """Finite truncation of ``dX = (AX + F(t,X)) dt + G(t,X) dW``."""

    state_dim: int
    noise_dim: int
    a_matrix: Array
    drift: Callable[[float, Array], Array]
    diffusion: Callable[[float, Array], Array]
    lipschitz_bound: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1:
            raise ValueError("state_dim and noise_dim must be >= 1")
        a = _frozen_array(self.a_matrix)
        if a.shape != (self.state_dim, self.state_dim):
            raise ValueError(
                f"a_matrix must be {self.state_dim}x{self.state_dim}, got {a.shape}"
            )
        if self.lipschitz_bound < 0:
            raise ValueError("lipschitz_bound must be nonnegative")
        object.__setattr__(self, "a_matrix", a)

    @property
    def is_diagonal(self) -> bool:
        a = self.a_matrix
        return bool(np.all(a == np.diag(np.diag(a))))

    def semigroup(self, dt: float) -> Array:
        """``exp(dt*A)``; the diagonal case returns only the diagonal."""
        if self.is_diagonal:
            return np.exp(dt * np.diag(self.a_matrix))
        return expm(dt * self.a_matrix)


@dataclass(frozen=True)
class ObstacleProblem:
    """Generator, terminal datum and obstacle of the reflected backward equation.

    ``terminal_fallback`` accepts data with ``phi < h(T, .)``: the reflected
    scheme then keeps ``Y_T = phi`` and enforces the obstacle before ``T`` only.
    """

    generator: Callable[[float, Array, Array, Array], Array]
    terminal: Callable[[Array], Array]
    obstacle: Callable[[float, Array], Array]
    growth_m: float = 0.0
    lipschitz_L: float = 1.0
    terminal_fallback: bool = False

    def __post_init__(self):
        if self.growth_m < 0:
            raise ValueError("growth_m must be nonnegative")
        if self.lipschitz_L <= 0:
            raise ValueError("lipschitz_L must be positive")

    def replace(self, **changes) -> "ObstacleProblem":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class Violation:
    invariant: str
    detail: str
    witness: dict = field(default_factory=dict)


def _sample_states(rng: np.random.Generator, n: int, d: int) -> Array:
    # mix of scales so that both small and large states are probed
    scale = np.exp(rng.uniform(np.log(0.1), np.log(200.0), size=(n, 1)))
    return rng.standard_normal((n, d)) * scale


def validate_model(
    model: GalerkinModel,
    problem: ObstacleProblem,
    sample_size: int = 256,
    seed: int = 0,
    slack: float = 1e-9,
    horizon: float = 1.0,
) -> list[Violation]:
    """Check the sampled Lipschitz and compatibility hypotheses.

    Returns a list of violations (empty when every check passes). Each
    violation carries the first witness found. The result is a pure function
    of the arguments.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    rng = np.random.default_rng(seed)
    d, k = model.state_dim, model.noise_dim
    n = sample_size
    t = rng.uniform(0.0, horizon, size=n)
    x1 = _sample_states(rng, n, d)
    x2 = x1 + _sample_states(rng, n, d) * rng.uniform(0.0, 1.0, size=(n, 1))
    dx = np.linalg.norm(x1 - x2, axis=1)
    out: list[Violation] = []

    def first(mask, name, detail, **arrays):
        idx = np.flatnonzero(mask)
        if idx.size:
            j = int(idx[0])
            wit = {key: np.asarray(v[j]).tolist() for key, v in arrays.items()}
            out.append(Violation(name, detail, wit))

    lip = model.lipschitz_bound
    f1 = np.stack([model.drift(t[j], x1[j : j + 1])[0] for j in range(n)])
    f2 = np.stack([model.drift(t[j], x2[j : j + 1])[0] for j in range(n)])
    df = np.linalg.norm(f1 - f2, axis=1)
    first(df > lip * dx + slack, "drift_lipschitz",
          f"|F(t,x)-F(t,x')| exceeds {lip}*|x-x'|", t=t, x=x1, x_prime=x2)

    g1 = np.stack([model.diffusion(t[j], x1[j : j + 1])[0] for j in range(n)])
    g2 = np.stack([model.diffusion(t[j], x2[j : j + 1])[0] for j in range(n)])
    if g1.shape[1:] != (d, k):
        out.append(Violation("diffusion_shape", f"G(t,x) has shape {g1.shape[1:]}, expected {(d, k)}"))
    else:
        dg = np.linalg.norm((g1 - g2).reshape(n, -1), axis=1)
        first(dg > lip * dx + slack, "diffusion_lipschitz",
              f"|G(t,x)-G(t,x')|_F exceeds {lip}*|x-x'|", t=t, x=x1, x_prime=x2)

    L = problem.lipschitz_L
    y1 = rng.standard_normal(n) * 10.0
    y2 = rng.standard_normal(n) * 10.0
    z1 = rng.standard_normal((n, k)) * 10.0
    z2 = rng.standard_normal((n, k)) * 10.0
    p1 = np.array([problem.generator(t[j], x1[j : j + 1], y1[j : j + 1], z1[j : j + 1])[0] for j in range(n)])
    p2 = np.array([problem.generator(t[j], x1[j : j + 1], y2[j : j + 1], z2[j : j + 1])[0] for j in range(n)])
    bound = L * (np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=1))
    first(np.abs(p1 - p2) > bound + slack, "generator_lipschitz",
          f"|psi(t,x,y,z)-psi(t,x,y',z')| exceeds {L}*(|y-y'|+|z-z'|)",
          t=t, x=x1, y=y1, y_prime=y2, z=z1, z_prime=z2)

    phi = problem.terminal(x1)
    h_T = problem.obstacle(horizon, x1)
    if not problem.terminal_fallback:
        first(phi < h_T - slack, "terminal_dominates_obstacle",
              "phi(x) < h(T,x)", x=x1, phi=phi, h=h_T)
    return out
