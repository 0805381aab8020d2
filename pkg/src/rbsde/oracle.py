"""Recombining binomial tree for Bermudan puts (independent pricing oracle)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class OracleResult:
    price: float
    exercise_times: np.ndarray  # (n_dates + 1,) including t=0
    boundary: np.ndarray  # highest exercised spot per date, nan if none


def binomial_oracle(spot: float, strike: float, rate: float, vol: float, T: float,
                    n_exercise_dates: int, steps_per_date: int = 40) -> OracleResult:
    """Bermudan put exercisable at ``t_k = k T / n_exercise_dates``, k = 0..n.

    Cox-Ross-Rubinstein tree with ``n_exercise_dates * steps_per_date`` steps.
    With ``vol == 0`` the deterministic path is evaluated directly.
    """
    if min(spot, strike, T) <= 0 or n_exercise_dates < 1 or vol < 0:
        raise ValueError("spot, strike, T must be positive, n_exercise_dates >= 1, vol >= 0")
    dates = np.arange(n_exercise_dates + 1) * (T / n_exercise_dates)
    if vol == 0.0:
        s_path = spot * np.exp(rate * dates)
        pay = np.exp(-rate * dates) * np.maximum(strike - s_path, 0.0)
        bnd = np.where(pay > 0, s_path, np.nan)
        return OracleResult(float(pay.max()), dates, bnd)

    n = n_exercise_dates * steps_per_date
    dt = T / n
    up = np.exp(vol * np.sqrt(dt))
    down = 1.0 / up
    disc = np.exp(-rate * dt)
    p = (np.exp(rate * dt) - down) / (up - down)
    if not 0.0 < p < 1.0:
        raise ValueError(f"risk-neutral probability {p:.6f} outside (0, 1); refine the tree")

    def spots(i):
        j = np.arange(i + 1)
        return spot * up ** (i - j) * down**j

    s = spots(n)
    value = np.maximum(strike - s, 0.0)
    boundary = np.full(n_exercise_dates + 1, np.nan)
    ex = value > 0
    if ex.any():
        boundary[-1] = s[ex].max()
    for i in range(n - 1, -1, -1):
        value = disc * (p * value[:-1] + (1.0 - p) * value[1:])
        if i % steps_per_date == 0:
            s = spots(i)
            payoff = np.maximum(strike - s, 0.0)
            ex = (payoff > 0) & (payoff >= value)
            if ex.any():
                boundary[i // steps_per_date] = s[ex].max()
            value = np.maximum(value, payoff)
    return OracleResult(float(value[0]), dates, boundary)


def black_scholes_put(spot, strike, rate, vol, T) -> float:
    d1 = (np.log(spot / strike) + (rate + 0.5 * vol**2) * T) / (vol * np.sqrt(T))
    d2 = d1 - vol * np.sqrt(T)
    return float(strike * np.exp(-rate * T) * norm.cdf(-d2) - spot * norm.cdf(-d1))
