"""Ready-made models and obstacle problems used by the demos, tests and CLI."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import ControlProblem, hamiltonian_generator
from .model import GalerkinModel, ObstacleProblem
from .regression import BasisSpec

Array = np.ndarray

INACTIVE = -1.0e6  # obstacle level that never binds


@dataclass(frozen=True)
class Preset:
    name: str
    model: GalerkinModel
    problem: ObstacleProblem
    x0: Array
    horizon: float
    n_steps: int
    basis: BasisSpec
    control: ControlProblem | None = None
    params: dict = field(default_factory=dict)


def _zeros_drift(t, x):
    return np.zeros_like(x)


def _zero_generator(t, x, y, z):
    return np.zeros(x.shape[0])


def frozen(variant: str = "hinge", n_steps: int = 50) -> Preset:
    """Deterministic state (A = F = G = 0) with piecewise-linear data.

    ``hinge``: phi(x) = x, h(x) = 1 - |x - 1|.  ``lift``: phi = 0, h = 1, so the
    obstacle lifts the value above the terminal datum on ``[s, T)``.
    """
    if variant == "hinge":
        def terminal(x):
            return x[:, 0].copy()

        def obstacle(t, x):
            return 1.0 - np.abs(x[:, 0] - 1.0)
        fallback = False
    elif variant == "lift":
        def terminal(x):
            return np.zeros(x.shape[0])

        def obstacle(t, x):
            return np.ones(x.shape[0])
        fallback = True
    else:
        raise ValueError(f"unknown frozen variant {variant!r}")
    model = GalerkinModel(1, 1, [[0.0]], _zeros_drift,
                          lambda t, x: np.zeros((x.shape[0], 1, 1)), 0.0, "frozen")
    problem = ObstacleProblem(_zero_generator, terminal, obstacle, 0.0, 1.0, fallback)
    return Preset(f"frozen-{variant}", model, problem, np.array([0.0]), 1.0, n_steps,
                  BasisSpec(1, True), params={"variant": variant})


def _exercise_dates(T, n_dates):
    def on_date(t):
        k = t * n_dates / T
        return abs(k - round(k)) < 1e-9 * max(1, n_dates)
    return on_date


def _gbm(rate, vol, name):
    return GalerkinModel(1, 1, [[rate]], _zeros_drift, lambda t, x: vol * x[:, :, None],
                         vol, name)


def bermudan_put(spot: float = 100.0, strike: float = 100.0, rate: float = 0.05,
                 vol: float = 0.2, T: float = 1.0, n_dates: int = 50,
                 steps_per_date: int = 1) -> Preset:
    """Discounted Bermudan put under geometric dynamics.

    ``psi = -r y`` and ``phi = h = (K - x)^+`` on the exercise dates. Between
    dates (``steps_per_date > 1``) the obstacle is parked far below the value.
    """
    on_date = _exercise_dates(T, n_dates)

    def payoff(x):
        return np.maximum(strike - x[:, 0], 0.0)

    def obstacle(t, x):
        if steps_per_date == 1 or on_date(t):
            return payoff(x)
        return np.full(x.shape[0], INACTIVE)

    problem = ObstacleProblem(lambda t, x, y, z: -rate * y, payoff, obstacle, 0.0, rate)
    params = dict(spot=spot, strike=strike, rate=rate, vol=vol, T=T, n_dates=n_dates,
                  steps_per_date=steps_per_date)
    return Preset("bermudan_put", _gbm(rate, vol, "gbm"), problem, np.array([spot]), T,
                  n_dates * steps_per_date, BasisSpec(3, True), params=params)


def heat_obstacle(d: int = 4, noise: float = 0.5, level: float = 0.5, x1: float = 0.5,
                  n_steps: int = 50) -> Preset:
    """Galerkin truncation of a stochastic heat equation with an obstacle on mode 1.

    ``A = diag(-pi^2 k^2)``, ``G = noise * I``; ``phi = h = (level - x_1)^+`` and
    ``psi = 0``. Only the first mode enters the data, so refining ``d``
    should leave the value unchanged.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    a = np.diag(-(np.pi * np.arange(1, d + 1)) ** 2)

    def diffusion(t, x):
        return np.broadcast_to(noise * np.eye(d), (x.shape[0], d, d)).copy()

    def payoff(x):
        return np.maximum(level - x[:, 0], 0.0)

    model = GalerkinModel(d, d, a, _zeros_drift, diffusion, 0.0, f"heat-{d}")
    problem = ObstacleProblem(_zero_generator, payoff, lambda t, x: payoff(x), 0.0, 1.0)
    x0 = np.zeros(d)
    x0[0] = x1
    return Preset(f"heat_obstacle-{d}", model, problem, x0, 1.0, n_steps, BasisSpec(1, True),
                  params=dict(d=d, noise=noise, level=level, x1=x1))


def control_stop(spot: float = 100.0, strike: float = 100.0, vol: float = 0.2,
                 T: float = 1.0, n_dates: int = 50, cost: float = 20.0,
                 n_controls: int = 21) -> Preset:
    """Bermudan-put dynamics steered by a bounded drift control.

    ``R(x, a) = a`` on a uniform grid of ``[-1, 1]``, running reward
    ``l = -cost a^2 / 2``, no discounting; ``psi`` is the Hamiltonian.
    """
    cp = ControlProblem(
        control_grid=np.linspace(-1.0, 1.0, n_controls),
        feedback=lambda x, a: np.reshape(a, (-1, 1)) * np.ones((np.shape(x)[0], 1)),
        r_bound=1.0,
        running_cost=lambda t, x, a: -0.5 * cost * np.asarray(a, dtype=float) ** 2,
    )

    def payoff(x):
        return np.maximum(strike - x[:, 0], 0.0)

    problem = ObstacleProblem(hamiltonian_generator(cp), payoff, lambda t, x: payoff(x), 0.0,
                              cp.r_bound)
    params = dict(spot=spot, strike=strike, vol=vol, T=T, n_dates=n_dates, cost=cost,
                  n_controls=n_controls)
    return Preset("control_stop", _gbm(0.0, vol, "gbm-driftless"), problem, np.array([spot]),
                  T, n_dates, BasisSpec(3, True), cp, params)


def linear(a=(1.0, -0.5), n_steps: int = 100) -> Preset:
    """Brownian state with ``phi = <a, x>`` and an obstacle that never binds."""
    a = np.asarray(a, dtype=float)
    d = a.size
    model = GalerkinModel(d, d, np.zeros((d, d)), _zeros_drift,
                          lambda t, x: np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy(),
                          0.0, "brownian")
    problem = ObstacleProblem(_zero_generator, lambda x: x @ a,
                              lambda t, x: np.full(x.shape[0], INACTIVE), 0.0, 1.0)
    return Preset("linear", model, problem, np.zeros(d), 1.0, n_steps, BasisSpec(1, False),
                  params={"a": a.tolist()})


def scalar_brownian(sigma: float = 1.0, n_steps: int = 50) -> Preset:
    """``dX = sigma dW`` with ``phi = x`` and an inactive obstacle."""
    model = GalerkinModel(1, 1, [[0.0]], _zeros_drift,
                          lambda t, x: np.full((x.shape[0], 1, 1), sigma), 0.0, "scalar")
    problem = ObstacleProblem(_zero_generator, lambda x: x[:, 0].copy(),
                              lambda t, x: np.full(x.shape[0], INACTIVE), 0.0, 1.0)
    return Preset("scalar", model, problem, np.array([0.0]), 1.0, n_steps, BasisSpec(1, False),
                  params={"sigma": sigma})


PRESETS = {
    "frozen": frozen,
    "bermudan_put": bermudan_put,
    "heat_obstacle": heat_obstacle,
    "control_stop": control_stop,
    "linear": linear,
    "scalar": scalar_brownian,
}


def get_preset(name: str, **params) -> Preset:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)
