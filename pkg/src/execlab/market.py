"""Discrete-time K-player Almgren-Chriss execution environment.

Midprice takes permanent impact from aggregate flow plus Gaussian noise;
execution prices take temporary impact either from aggregate slice flow
(shared execution price) or from each player's own flow only. Episodes are
value-semantics state machines: every function returns fresh state, so any
number of episodes can run in parallel from independent seeds.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "Convention",
    "MarketParams",
    "EnvState",
    "StepOutcome",
    "EpisodeRecord",
    "MarketConfigError",
    "InfeasibleActionError",
    "InfeasibleScheduleError",
    "EpisodeFinishedError",
    "IncompleteRecordError",
    "env_init",
    "env_step",
    "step_reward",
    "run_schedule_pair",
    "implementation_shortfall",
    "noise_stream",
    "table1_params",
]

SCHEDULE_SUM_TOL = 1e-9


class MarketConfigError(ValueError):
    """Raised for invalid market parameters."""


class InfeasibleActionError(ValueError):
    """Raised when a submitted trade violates inventory or sign constraints."""


class InfeasibleScheduleError(ValueError):
    """Raised when a full schedule violates feasibility."""


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an episode that already reached the horizon."""


class IncompleteRecordError(ValueError):
    """Raised when an episode record does not cover all N slices."""


class Convention(str, Enum):
    AGGREGATE = "aggregate"
    OWN = "own"


@dataclass(frozen=True)
class MarketParams:
    """Impact, volatility and grid constants for the execution game.

    ``reward_own_penalty`` toggles the extra own-quadratic term ``-a v^2``
    in the per-step reward (on by default; off only for sensitivity runs).
    """

    kappa: float = 0.001
    a: float = 0.002
    sigma: float = 1e-9
    s0: float = 10.0
    horizon: float = 10.0
    n_slices: int = 10
    q0: tuple[float, ...] = (100.0, 100.0)
    convention: Convention = Convention.AGGREGATE
    lambda_risk: float = 0.0
    reward_own_penalty: bool = True

    def __post_init__(self):
        if not self.kappa > 0:
            raise MarketConfigError(f"kappa must be > 0, got {self.kappa}")
        if not self.a > 0:
            raise MarketConfigError(f"a must be > 0, got {self.a}")
        if self.sigma < 0:
            raise MarketConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.n_slices < 1:
            raise MarketConfigError(f"n_slices must be >= 1, got {self.n_slices}")
        if self.horizon <= 0:
            raise MarketConfigError(f"horizon must be > 0, got {self.horizon}")
        if self.lambda_risk < 0:
            raise MarketConfigError(f"lambda_risk must be >= 0, got {self.lambda_risk}")
        if len(self.q0) < 1 or any(not q > 0 for q in self.q0):
            raise MarketConfigError(f"all initial inventories must be > 0, got {self.q0}")
        object.__setattr__(self, "convention", Convention(self.convention))

    @property
    def tau(self) -> float:
        """Grid spacing T/N (held exact by construction)."""
        return self.horizon / self.n_slices

    @property
    def n_players(self) -> int:
        return len(self.q0)

    def with_convention(self, convention: Convention | str) -> "MarketParams":
        return replace(self, convention=Convention(convention))

    def to_dict(self) -> dict:
        d = {
            "kappa": self.kappa,
            "a": self.a,
            "sigma": self.sigma,
            "s0": self.s0,
            "horizon": self.horizon,
            "n_slices": self.n_slices,
            "q0": list(self.q0),
            "convention": self.convention.value,
            "lambda_risk": self.lambda_risk,
            "reward_own_penalty": self.reward_own_penalty,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MarketParams":
        d = dict(d)
        if "q0" in d:
            d["q0"] = tuple(d["q0"])
        return cls(**d)


def table1_params(convention: Convention | str = Convention.AGGREGATE, **overrides) -> MarketParams:
    """Baseline experiment parameters (kappa=0.001, a=0.002, S0=10, T=N=10, q0=100)."""
    return MarketParams(convention=Convention(convention), **overrides)


@dataclass
class EnvState:
    """Episode state after ``t`` completed slices.

    ``noise`` carries the pre-drawn per-slice standard normals so that the
    state remains a pure value (same seed, same stream, no hidden RNG).
    """

    t: int
    mid: float
    inv: np.ndarray
    cash: np.ndarray
    noise: np.ndarray

    @property
    def done(self) -> bool:
        return self.t >= len(self.noise)


@dataclass(frozen=True)
class StepOutcome:
    exec_prices: np.ndarray
    trades: np.ndarray
    rewards: np.ndarray
    noise: float
    mid_after: float


@dataclass
class EpisodeRecord:
    """Full per-step trace of one rollout plus per-player shortfall."""

    params: MarketParams
    steps: list[StepOutcome] = field(default_factory=list)

    @property
    def n_players(self) -> int:
        return self.params.n_players

    def trades_matrix(self) -> np.ndarray:
        """(N, K) array of executed trades."""
        return np.array([s.trades for s in self.steps])

    def inventory_paths(self) -> np.ndarray:
        """(N+1, K) remaining inventory, from q0 down to zero."""
        v = self.trades_matrix()
        q0 = np.asarray(self.params.q0, dtype=float)
        return np.vstack([q0, q0 - np.cumsum(v, axis=0)])

    def final_cash(self) -> np.ndarray:
        cash = np.zeros(self.n_players)
        for s in self.steps:
            cash = cash + s.trades * s.exec_prices
        return cash

    def shortfalls(self) -> np.ndarray:
        return np.array(
            [implementation_shortfall(self, i) for i in range(self.n_players)]
        )

    def to_json(self) -> str:
        doc = {
            "params": self.params.to_dict(),
            "steps": [
                {
                    "t": m + 1,
                    "mid": s.mid_after,
                    "xi": s.noise,
                    "trades": list(map(float, s.trades)),
                    "exec_prices": list(map(float, s.exec_prices)),
                    "rewards": list(map(float, s.rewards)),
                }
                for m, s in enumerate(self.steps)
            ],
            "is": list(map(float, self.shortfalls())),
        }
        return json.dumps(doc, sort_keys=True)

    def to_csv(self) -> str:
        k = self.n_players
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = (
            ["t", "mid", "xi"]
            + [f"v_{i}" for i in range(k)]
            + [f"exec_{i}" for i in range(k)]
            + [f"cash_{i}" for i in range(k)]
            + [f"reward_{i}" for i in range(k)]
        )
        w.writerow(header)
        cash = np.zeros(k)
        for m, s in enumerate(self.steps):
            cash = cash + s.trades * s.exec_prices
            row = (
                [m + 1, repr(s.mid_after), repr(s.noise)]
                + [repr(float(x)) for x in s.trades]
                + [repr(float(x)) for x in s.exec_prices]
                + [repr(float(x)) for x in cash]
                + [repr(float(x)) for x in s.rewards]
            )
            w.writerow(row)
        return buf.getvalue()


def noise_stream(seed: int, episode: int, n: int) -> np.ndarray:
    """Per-slice standard normals from a counter-based Philox stream.

    Keyed by (seed, episode) so paired rollouts can share a stream exactly
    (common random numbers) without storing it.
    """
    bg = np.random.Philox(key=np.uint64(seed) ^ np.uint64(0x9E3779B97F4A7C15),
                          counter=[0, 0, 0, np.uint64(episode)])
    return np.random.Generator(bg).standard_normal(n)


def env_init(params: MarketParams, seed: int, episode: int = 0) -> EnvState:
    """Fresh episode state: t=0, mid=S0, full inventories, zero cash."""
    k = params.n_players
    return EnvState(
        t=0,
        mid=params.s0,
        inv=np.array(params.q0, dtype=float),
        cash=np.zeros(k),
        noise=noise_stream(seed, episode, params.n_slices),
    )


def step_reward(exec_price: float, trade: float, params: MarketParams, player: int) -> float:
    """Per-step reward: uniform mark-to-market allocation plus trade revenue
    minus the own temporary-impact penalty (if enabled)."""
    r = -params.s0 * params.q0[player] / params.n_slices + exec_price * trade
    if params.reward_own_penalty:
        r -= params.a * trade * trade
    return r


def env_step(params: MarketParams, state: EnvState, actions: Sequence[float]) -> tuple[EnvState, StepOutcome]:
    """Advance one slice given per-player trades (in shares).

    The final slice must liquidate exactly: the caller passes the remaining
    inventory, anything else is rejected rather than clamped.
    """
    n, k = params.n_slices, params.n_players
    if state.t >= n:
        raise EpisodeFinishedError(f"episode already finished at t={state.t}")
    v = np.asarray(actions, dtype=float)
    if v.shape != (k,):
        raise InfeasibleActionError(f"expected {k} actions, got shape {v.shape}")
    if np.any(v < 0):
        raise InfeasibleActionError(f"negative trade in {v}")
    if np.any(v > state.inv + 1e-9):
        raise InfeasibleActionError(f"trade exceeds inventory: {v} > {state.inv}")
    if state.t == n - 1:
        if np.any(np.abs(v - state.inv) > 1e-6):
            raise InfeasibleActionError(
                f"terminal slice must liquidate fully: {v} != {state.inv}"
            )
        v = state.inv.copy()  # terminal inventory becomes exactly zero

    total = v.sum()
    xi = float(state.noise[state.t])
    mid_after = state.mid - params.kappa * total + params.sigma * math.sqrt(params.tau) * xi
    if params.convention is Convention.AGGREGATE:
        exec_prices = np.full(k, state.mid - params.a * total / params.tau)
    else:
        exec_prices = state.mid - params.a * v / params.tau
    rewards = np.array([step_reward(exec_prices[i], v[i], params, i) for i in range(k)])
    new_state = EnvState(
        t=state.t + 1,
        mid=mid_after,
        inv=state.inv - v,
        cash=state.cash + v * exec_prices,
        noise=state.noise,
    )
    outcome = StepOutcome(
        exec_prices=exec_prices, trades=v, rewards=rewards, noise=xi, mid_after=mid_after
    )
    return new_state, outcome


def validate_schedule(params: MarketParams, trades: np.ndarray, player: int) -> np.ndarray:
    """Check feasibility and enforce exact liquidation via the last slice."""
    v = np.asarray(trades, dtype=float).copy()
    if v.shape != (params.n_slices,):
        raise InfeasibleScheduleError(
            f"schedule must have {params.n_slices} slices, got {v.shape}"
        )
    if np.any(v < 0):
        raise InfeasibleScheduleError(f"negative slice in schedule for player {player}")
    q0 = params.q0[player]
    if abs(q0 - v.sum()) > SCHEDULE_SUM_TOL * max(1.0, q0):
        raise InfeasibleScheduleError(
            f"schedule sums to {v.sum()} != q0={q0} for player {player}"
        )
    # last slice set to the sequentially-depleted remaining inventory, so the
    # terminal state is exactly zero under the env's step-by-step accounting
    remaining = q0
    for x in v[:-1]:
        remaining -= x
    if remaining < 0:
        raise InfeasibleScheduleError("terminal correction made last slice negative")
    v[-1] = remaining
    return v


def simulate_pair(params: MarketParams, trades: np.ndarray, noise: np.ndarray):
    """Vectorized rollout of pre-validated (N, K) trades with given noise.

    Returns (mids_after, exec_prices, rewards, shortfalls); bit-identical to
    stepping env_step slice by slice.
    """
    n, k = trades.shape
    total = trades.sum(axis=1)
    # sequential accumulation, bit-identical to stepping env_step slice by slice
    mids_after = np.empty(n)
    mid = params.s0
    srt = params.sigma * math.sqrt(params.tau)
    for m in range(n):
        mid = mid - params.kappa * total[m] + srt * noise[m]
        mids_after[m] = mid
    mids_before = np.concatenate(([params.s0], mids_after[:-1]))
    if params.convention is Convention.AGGREGATE:
        exec_prices = np.repeat(
            (mids_before - params.a * total / params.tau)[:, None], k, axis=1
        )
    else:
        exec_prices = mids_before[:, None] - params.a * trades / params.tau
    q0 = np.asarray(params.q0, dtype=float)
    rewards = -params.s0 * q0 / n + exec_prices * trades
    if params.reward_own_penalty:
        rewards = rewards - params.a * trades**2
    revenue = np.zeros(k)
    for m in range(n):  # sequential, matching the env's cash accumulation
        revenue = revenue + trades[m] * exec_prices[m]
    shortfalls = q0 * params.s0 - revenue
    return mids_after, exec_prices, rewards, shortfalls


def run_schedule_pair(
    params: MarketParams,
    schedules: Sequence[np.ndarray],
    seed: int,
    episode: int = 0,
) -> EpisodeRecord:
    """Execute one full episode of pre-committed schedules.

    Deterministic given (params, schedules, seed, episode): the noise stream
    depends only on (seed, episode), which is what gives common random
    numbers across paired rollouts.
    """
    if len(schedules) != params.n_players:
        raise InfeasibleScheduleError(
            f"need {params.n_players} schedules, got {len(schedules)}"
        )
    v = np.column_stack(
        [validate_schedule(params, s, i) for i, s in enumerate(schedules)]
    )
    noise = noise_stream(seed, episode, params.n_slices)
    mids_after, exec_prices, rewards, _ = simulate_pair(params, v, noise)
    record = EpisodeRecord(params=params)
    for m in range(params.n_slices):
        record.steps.append(
            StepOutcome(
                exec_prices=exec_prices[m],
                trades=v[m],
                rewards=rewards[m],
                noise=float(noise[m]),
                mid_after=float(mids_after[m]),
            )
        )
    return record


def implementation_shortfall(record: EpisodeRecord, player: int) -> float:
    """q0*S0 minus realized execution revenue for one player."""
    params = record.params
    if len(record.steps) != params.n_slices:
        raise IncompleteRecordError(
            f"record has {len(record.steps)} steps, expected {params.n_slices}"
        )
    revenue = sum(s.trades[player] * s.exec_prices[player] for s in record.steps)
    return params.q0[player] * params.s0 - revenue
