"""Closed-form benchmark schedules and costs for the execution game.

Covers the general two-player open-loop equilibrium of the aggregate-impact
game (hyperbolic-sine form, arbitrary risk aversion and inventories), its
symmetric risk-neutral grid implementation, the discrete constant-kernel
equilibrium of the own-impact game (geometric trades), TWAP, and
simulator-based evaluation of arbitrary schedule pairs.

All benchmark IS points are produced by the simulator at sigma=0; the closed
forms here act as independent cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .market import (
    Convention,
    MarketConfigError,
    MarketParams,
    run_schedule_pair,
)

__all__ = [
    "Schedule",
    "EquilibriumParams",
    "DegenerateRatioError",
    "equilibrium_params",
    "sz_general_inventory",
    "agg_nash_inventory",
    "agg_nash_grid_schedule",
    "agg_nash_rate",
    "agg_nash_continuous_is",
    "own_nash_grid_schedule",
    "twap_schedule",
    "twap_is_closed_form",
    "evaluate_schedule_is",
    "deterministic_is_quadratic",
    "best_response_schedule",
    "benchmark_table",
]


class DegenerateRatioError(ValueError):
    """Raised when the discrete own-impact equilibrium ratio is degenerate."""


@dataclass(frozen=True)
class Schedule:
    """A full liquidation schedule for one player."""

    trades: np.ndarray
    player: int = 0
    provenance: str = "Custom"

    def __post_init__(self):
        object.__setattr__(self, "trades", np.asarray(self.trades, dtype=float))

    def __len__(self) -> int:
        return len(self.trades)

    def inventory_path(self, q0: float) -> np.ndarray:
        return np.concatenate(([q0], q0 - np.cumsum(self.trades)))


@dataclass(frozen=True)
class EquilibriumParams:
    """Derived equilibrium constants for both impact conventions."""

    beta_agg: float
    beta_own: float
    Lambda: float
    rho: float
    nu_sigma: float
    nu_delta: float
    Q: float
    Qtilde: float


def equilibrium_params(params: MarketParams) -> EquilibriumParams:
    k, a, lam, sig = params.kappa, params.a, params.lambda_risk, params.sigma
    q10, q20 = params.q0[0], params.q0[1] if params.n_players > 1 else params.q0[0]
    Lambda = 2 * a / (k * params.tau) + 0.5
    return EquilibriumParams(
        beta_agg=k / (3 * a),
        beta_own=k / (2 * a),
        Lambda=Lambda,
        rho=1 - 1 / Lambda,
        nu_sigma=math.sqrt(k * k + 12 * a * lam * sig * sig) / (6 * a),
        nu_delta=math.sqrt(k * k + 4 * a * lam * sig * sig) / (2 * a),
        Q=q10 + q20,
        Qtilde=q10 - q20,
    )


_CLAMP = 350.0


def _sinh_ratio(x: float, y: float) -> float:
    """sinh(x)/sinh(y), stable for large arguments (clamped at |.|>350)."""
    if y == 0.0:
        raise ZeroDivisionError("sinh ratio undefined at zero denominator")
    if max(abs(x), abs(y)) <= _CLAMP:
        return math.sinh(x) / math.sinh(y)
    sign = math.copysign(1.0, x) * math.copysign(1.0, y) if x != 0 else 0.0
    if x == 0.0:
        return 0.0
    ax, ay = abs(x), abs(y)
    return sign * math.exp(ax - ay) * (1 - math.exp(-2 * ax)) / (1 - math.exp(-2 * ay))


def _coth(x: float) -> float:
    if abs(x) > _CLAMP:
        return math.copysign(1.0, x)
    return math.cosh(x) / math.sinh(x)


def sz_general_inventory(t: float, params: MarketParams, q10: float, q20: float):
    """General two-player equilibrium inventories at time t.

    Symmetric component decays at exp(-kappa t / 6a) with hyperbolic-sine
    time-to-go factor; antisymmetric component grows at exp(+kappa t / 2a).
    """
    T = params.horizon
    if T <= 0:
        raise MarketConfigError("horizon must be positive for the equilibrium")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    eq = equilibrium_params(params)
    k, a = params.kappa, params.a
    Q, Qt = q10 + q20, q10 - q20
    big_sigma = Q * math.exp(-k * t / (6 * a)) * _sinh_ratio((T - t) * eq.nu_sigma, T * eq.nu_sigma)
    big_delta = Qt * math.exp(k * t / (2 * a)) * _sinh_ratio((T - t) * eq.nu_delta, T * eq.nu_delta)
    return 0.5 * (big_sigma + big_delta), 0.5 * (big_sigma - big_delta)


def agg_nash_inventory(t: float, params: MarketParams) -> float:
    """Symmetric risk-neutral equilibrium inventory (aggregate impact)."""
    beta = equilibrium_params(params).beta_agg
    T = params.horizon
    return params.q0[0] * math.expm1(beta * (T - t)) / math.expm1(beta * T)


def agg_nash_rate(t: float, params: MarketParams) -> float:
    """Liquidation rate of the symmetric aggregate-impact equilibrium."""
    beta = equilibrium_params(params).beta_agg
    T = params.horizon
    return beta * params.q0[0] * math.exp(beta * (T - t)) / math.expm1(beta * T)


def agg_nash_grid_schedule(params: MarketParams, player: int = 0) -> Schedule:
    """Grid schedule by forward differences of the aggregate-impact path."""
    beta = equilibrium_params(params).beta_agg
    T, tau, n = params.horizon, params.tau, params.n_slices
    m = np.arange(1, n + 1)
    v = (
        params.q0[player]
        * np.exp(beta * (T - m * tau))
        * math.expm1(beta * tau)
        / math.expm1(beta * T)
    )
    return Schedule(trades=v, player=player, provenance="AggNashGrid")


def agg_nash_continuous_is(params: MarketParams) -> float:
    """Analytical continuous-time equilibrium cost, kappa*q0^2*(1 + coth(kappa T/6a)/3)."""
    k, a, q0 = params.kappa, params.a, params.q0[0]
    return k * q0 * q0 * (1 + _coth(k * params.horizon / (6 * a)) / 3)


def own_nash_grid_schedule(params: MarketParams, player: int = 0) -> Schedule:
    """Discrete constant-kernel equilibrium: geometric trades with ratio rho."""
    eq = equilibrium_params(params)
    if eq.Lambda <= 1:
        raise DegenerateRatioError(
            f"Lambda={eq.Lambda} <= 1: geometric ratio degenerate"
        )
    n = params.n_slices
    m = np.arange(1, n + 1)
    v = params.q0[player] * (1 - eq.rho) * eq.rho ** (m - 1) / (1 - eq.rho**n)
    return Schedule(trades=v, player=player, provenance="OwnNashGrid")


def twap_schedule(params: MarketParams, player: int = 0) -> Schedule:
    n = params.n_slices
    return Schedule(
        trades=np.full(n, params.q0[player] / n), player=player, provenance="TWAP"
    )


def twap_is_closed_form(params: MarketParams, convention: Convention | str) -> float:
    """Closed-form symmetric two-player TWAP cost under either convention."""
    k, a, q0, n, T = params.kappa, params.a, params.q0[0], params.n_slices, params.horizon
    perm = k * q0 * q0 * (n - 1) / n
    temp = (2 if Convention(convention) is Convention.AGGREGATE else 1) * a * q0 * q0 / T
    return perm + temp


def _trades_of(s) -> np.ndarray:
    return s.trades if isinstance(s, Schedule) else np.asarray(s, dtype=float)


def evaluate_schedule_is(
    params: MarketParams,
    schedules,
    n_episodes: int = 1,
    seed: int = 0,
):
    """Monte-Carlo IS statistics of a schedule pair over seeded episodes.

    Returns (mean, std) arrays per player; with sigma=0 the std is zero and
    the mean is the single-episode shortfall.
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    trades = [_trades_of(s) for s in schedules]
    out = np.empty((n_episodes, params.n_players))
    for ep in range(n_episodes):
        rec = run_schedule_pair(params, trades, seed=seed, episode=ep)
        out[ep] = rec.shortfalls()
    return out.mean(axis=0), out.std(axis=0)


def deterministic_is_quadratic(
    params: MarketParams,
    opponent,
    cost_model: str = "simulator",
    include_reward_penalty: bool = False,
):
    """Quadratic form (H, b) of the sigma=0 expected shortfall of one player.

    IS(x) = x'Hx/2 + b'x given the opponent's fixed schedule. ``simulator``
    prices each slice at the pre-slice mid (the environment's law);
    ``kernel`` additionally charges half of the current slice's aggregate
    permanent impact, which is the convention under which the constant-kernel
    geometric equilibrium is exactly stationary. ``include_reward_penalty``
    adds the training reward's own-quadratic term a*x^2 to the objective.
    """
    n = params.n_slices
    w = _trades_of(opponent)
    k, c = params.kappa, params.a / params.tau
    L = np.tril(np.ones((n, n)), -1)
    w_prev = L @ w
    h = k * (L + L.T)
    b = k * w_prev.copy()
    if params.convention is Convention.AGGREGATE:
        h = h + 2 * c * np.eye(n)
        b = b + c * w
    else:
        h = h + 2 * c * np.eye(n)
    if cost_model == "kernel":
        h = h + k * np.eye(n)
        b = b + 0.5 * k * w
    elif cost_model != "simulator":
        raise ValueError(f"unknown cost model {cost_model!r}")
    if include_reward_penalty:
        h = h + 2 * params.a * np.eye(n)
    return h, b


def _project_capped_simplex(x: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {v >= 0, sum v = total}."""
    u = np.sort(x)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(x) + 1)
    rho = idx[u - (css - total) / idx > 0][-1]
    lam = (css[rho - 1] - total) / rho
    return np.maximum(x - lam, 0.0)


def best_response_schedule(
    params: MarketParams,
    opponent,
    cost_model: str = "simulator",
    include_reward_penalty: bool = False,
    q0: float | None = None,
    n_iter: int = 100_000,
    tol: float = 1e-10,
) -> Schedule:
    """Projected-gradient minimizer of the deterministic shortfall.

    Fixed step 1/L with L the largest eigenvalue of the quadratic form;
    stops early once the iterate moves less than ``tol`` in sup norm.
    """
    h, b = deterministic_is_quadratic(
        params, opponent, cost_model=cost_model, include_reward_penalty=include_reward_penalty
    )
    q0 = params.q0[0] if q0 is None else q0
    lip = float(np.linalg.eigvalsh(h)[-1])
    x = np.full(params.n_slices, q0 / params.n_slices)
    for _ in range(n_iter):
        grad = h @ x + b
        x_new = _project_capped_simplex(x - grad / lip, q0)
        if np.max(np.abs(x_new - x)) < tol:
            x = x_new
            break
        x = x_new
    return Schedule(trades=x, provenance="Custom")


def benchmark_table(params: MarketParams) -> dict:
    """All benchmark constants, schedules and simulator IS points."""
    eq = equilibrium_params(params)
    agg = agg_nash_grid_schedule(params)
    own = own_nash_grid_schedule(params)
    tw = twap_schedule(params)
    quiet = MarketParams.from_dict({**params.to_dict(), "sigma": 0.0})
    agg_env = quiet.with_convention(Convention.AGGREGATE)
    own_env = quiet.with_convention(Convention.OWN)
    is_points = {
        "agg_nash": float(evaluate_schedule_is(agg_env, [agg, agg])[0][0]),
        "own_nash": float(evaluate_schedule_is(own_env, [own, own])[0][0]),
        "twap_agg": float(evaluate_schedule_is(agg_env, [tw, tw])[0][0]),
        "twap_own": float(evaluate_schedule_is(own_env, [tw, tw])[0][0]),
    }
    return {
        "beta_agg": eq.beta_agg,
        "beta_own": eq.beta_own,
        "Lambda": eq.Lambda,
        "rho": eq.rho,
        "schedules": {
            "agg_nash": agg.trades.tolist(),
            "own_nash": own.trades.tolist(),
            "twap": tw.trades.tolist(),
        },
        "is_points": is_points,
        "continuous_is": agg_nash_continuous_is(params),
    }
