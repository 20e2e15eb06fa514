"""Ex-ante schedule learners.

Model-free: perturbation rollouts with common random numbers, ridge-fitted
reward gradient, first-order surrogate descent through the softplus-normalized
schedule parameterization. Model-based: the same surrogate step driven by the
exact adjoint gradient of the deterministic cumulative reward through the
TWAP-anchored parameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .market import (
    Convention,
    MarketParams,
    noise_stream,
    simulate_pair,
    validate_schedule,
)
from .networks import ModelBasedScheduleNet, TimeOnlyScheduleNet
from .optim import AdamState, adam_init, adam_step
from .seeding import derive_seed, rng_for

__all__ = [
    "ScheduleLearnerConfig",
    "ScheduleTrainingLog",
    "RankDeficiencyError",
    "TrainingDivergedError",
    "schedule_from_params",
    "sample_perturbations",
    "apply_perturbation",
    "estimate_gradient",
    "ea_update",
    "mb_local_dynamics",
    "mb_reward_gradient",
    "mb_update",
    "train_schedule_learners",
]

FEASIBILITY_PENALTY = 1e3


class RankDeficiencyError(np.linalg.LinAlgError):
    """Unregularized gradient fit with fewer perturbations than dimensions."""


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss or gradient during schedule learning."""


@dataclass(frozen=True)
class ScheduleLearnerConfig:
    variant: str = "mf"  # mf | mb
    n_perturbations: int = 16
    scale: float = 0.5  # shares
    ridge: float = 1e-6
    lr: float = 1e-3
    n_updates: int = 2000
    scheme: str = "simultaneous"  # simultaneous | alternating
    early_stop_tol: float = 1e-4
    early_stop_patience: int = 50
    net_width: int = 64

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"perturbation scale must be > 0, got {self.scale}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.n_perturbations < 1:
            raise ValueError("need at least one perturbation")
        if self.variant not in ("mf", "mb"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.scheme not in ("simultaneous", "alternating"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleLearnerConfig":
        return cls(**d)


def build_schedule_net(cfg: ScheduleLearnerConfig, params: MarketParams, player: int):
    cls = TimeOnlyScheduleNet if cfg.variant == "mf" else ModelBasedScheduleNet
    return cls(n_slices=params.n_slices, q0=params.q0[player], width=cfg.net_width)


def schedule_from_params(net, theta: np.ndarray) -> np.ndarray:
    """The current schedule implied by the learner parameters."""
    u, _ = net.forward(theta)
    return u


def sample_perturbations(
    n: int, scale: float, n_slices: int, rng: np.random.Generator
) -> np.ndarray:
    """Gaussian perturbations projected onto the zero-sum subspace, so every
    perturbed schedule still sums to the initial inventory."""
    eps = rng.normal(0.0, scale, size=(n, n_slices))
    return eps - eps.mean(axis=1, keepdims=True)


def apply_perturbation(schedule: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Perturb, clip negatives, and rebalance the clip residual onto the
    largest slice so the sum is preserved exactly."""
    pert = np.maximum(schedule + eps, 0.0)
    resid = schedule.sum() - pert.sum()
    if resid != 0.0:
        pert[int(np.argmax(pert))] += resid
    return pert


def estimate_gradient(
    base_reward: float,
    perturbed_rewards: np.ndarray,
    perturbations: np.ndarray,
    ridge: float,
) -> np.ndarray:
    """Ridge-regression fit of g from reward differences, dR ~= g'eps."""
    e = np.asarray(perturbations, dtype=float)
    dr = np.asarray(perturbed_rewards, dtype=float) - base_reward
    n, dim = e.shape
    gram = e.T @ e
    if ridge == 0.0:
        if np.linalg.matrix_rank(gram) < dim:
            raise RankDeficiencyError(
                f"{n} perturbations cannot identify a {dim}-dim gradient without ridge"
            )
    else:
        gram = gram + ridge * np.eye(dim)
    return np.linalg.solve(gram, e.T @ dr)


@dataclass
class _Learner:
    net: object
    theta: np.ndarray
    opt: AdamState


def _surrogate_update(learner: _Learner, g: np.ndarray, feasibility_penalty: bool):
    """One Adam step on L = -(1/N) g'U(theta) (+ squared hinge on negative
    slices for the TWAP-anchored parameterization)."""
    n = len(g)
    u, cache = learner.net.forward(learner.theta, want_cache=True)
    upstream = -np.asarray(g) / n
    if feasibility_penalty:
        upstream = upstream + FEASIBILITY_PENALTY * 2.0 * np.minimum(u, 0.0)
    loss = float(-(g @ u) / n)
    if feasibility_penalty:
        loss += float(FEASIBILITY_PENALTY * np.sum(np.minimum(u, 0.0) ** 2))
    grads = learner.net.gradient(cache, upstream)
    if not np.all(np.isfinite(grads)) or not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite surrogate loss/gradient: {loss}")
    learner.theta, learner.opt = adam_step(learner.theta, grads, learner.opt)
    return loss


def ea_update(learner: _Learner, g: np.ndarray) -> float:
    """Model-free surrogate step through the softplus normalization."""
    return _surrogate_update(learner, g, feasibility_penalty=False)


def mb_update(learner: _Learner, g: np.ndarray) -> float:
    """Model-based surrogate step; infeasible slices draw a quadratic
    penalty instead of being clipped, keeping gradients informative."""
    return _surrogate_update(learner, g, feasibility_penalty=True)


def mb_local_dynamics(params: MarketParams):
    """Local derivatives of the private deterministic transition: identity
    state propagation, action pushes inventory down 1:1 and the mid down by
    the permanent impact of the own trade."""
    a_mat = np.eye(2)
    b_vec = np.array([-1.0, -params.kappa])
    return a_mat, b_vec


def mb_reward_gradient(
    params: MarketParams, schedule: np.ndarray, opponent: np.ndarray, player: int = 0
) -> np.ndarray:
    """Exact gradient of the deterministic cumulative reward w.r.t. the
    schedule, by backward (adjoint) accumulation through the private
    dynamics."""
    n = params.n_slices
    u = np.asarray(schedule, dtype=float)
    w = np.asarray(opponent, dtype=float)
    c = params.a / params.tau
    a_mat, b_vec = mb_local_dynamics(params)
    # deterministic mid before each slice
    mids = params.s0 - params.kappa * np.concatenate(
        ([0.0], np.cumsum(u + w)[:-1])
    )
    g = np.zeros(n)
    lam = np.zeros(2)  # adjoint of (inventory, mid)
    for t in reversed(range(n)):
        if params.convention is Convention.AGGREGATE:
            dr_du = mids[t] - c * (2 * u[t] + w[t])
        else:
            dr_du = mids[t] - 2 * c * u[t]
        if params.reward_own_penalty:
            dr_du -= 2 * params.a * u[t]
        g[t] = dr_du + b_vec @ lam
        dr_dx = np.array([0.0, u[t]])  # reward reads the pre-slice mid
        lam = dr_dx + a_mat.T @ lam
    return g


@dataclass
class ScheduleTrainingLog:
    """Per-update trace of one training run."""

    seed: int
    config: ScheduleLearnerConfig
    schedules: np.ndarray  # (updates, 2, N)
    is_pairs: np.ndarray  # (updates, 2)
    grad_norms: np.ndarray  # (updates, 2)
    losses: np.ndarray  # (updates, 2)
    final_schedules: np.ndarray = field(init=False)
    n_updates_run: int = 0

    def __post_init__(self):
        self.final_schedules = self.schedules[-1] if len(self.schedules) else None


def _cumulative_rewards(params, trades, noise):
    _, _, rewards, shortfalls = simulate_pair(params, trades, noise)
    return rewards.sum(axis=0), shortfalls


def train_schedule_learners(
    params: MarketParams,
    cfg: ScheduleLearnerConfig,
    seed: int,
    fixed_opponent: np.ndarray | None = None,
) -> ScheduleTrainingLog:
    """Joint two-player training (or fixed-opponent mode for player 1).

    Per update: one base rollout pair under common random numbers, n
    perturbation rollouts per learning player against the opponent's current
    base schedule, gradient estimation, and a surrogate parameter step.
    """
    n = params.n_slices
    if cfg.variant == "mf" and cfg.n_perturbations < n:
        raise ValueError(
            f"n_perturbations={cfg.n_perturbations} < N={n}: gradient unidentifiable"
        )
    players = [0] if fixed_opponent is not None else [0, 1]
    learners: dict[int, _Learner] = {}
    for k in players:
        net = build_schedule_net(cfg, params, k)
        theta = net.init_params(rng_for(seed, k, "sched-init"))
        learners[k] = _Learner(net=net, theta=theta, opt=adam_init(net.n_params, cfg.lr))
    pert_rngs = {k: rng_for(seed, k, "sched-pert") for k in players}

    hist_sched = np.zeros((cfg.n_updates, 2, n))
    hist_is = np.zeros((cfg.n_updates, 2))
    hist_g = np.zeros((cfg.n_updates, 2))
    hist_loss = np.full((cfg.n_updates, 2), np.nan)
    calm = 0
    u_done = cfg.n_updates

    for upd in range(cfg.n_updates):
        sched = {}
        for k in (0, 1):
            if fixed_opponent is not None and k == 1:
                sched[k] = np.asarray(fixed_opponent, dtype=float)
            else:
                sched[k] = schedule_from_params(learners[k].net, learners[k].theta)
        noise = noise_stream(derive_seed(seed, upd, "sched-crn"), 0, n)
        base = np.column_stack(
            [validate_schedule(params, sched[0], 0), validate_schedule(params, sched[1], 1)]
        )
        base_r, base_is = _cumulative_rewards(params, base, noise)
        hist_sched[upd, 0], hist_sched[upd, 1] = sched[0], sched[1]
        hist_is[upd] = base_is

        active = players
        if cfg.scheme == "alternating" and fixed_opponent is None:
            active = [upd % 2]
        grads = {}
        for k in active:
            if cfg.variant == "mb":
                grads[k] = mb_reward_gradient(params, sched[k], sched[1 - k], player=k)
            else:
                eps = sample_perturbations(cfg.n_perturbations, cfg.scale, n, pert_rngs[k])
                pr = np.empty(cfg.n_perturbations)
                eff = np.empty_like(eps)
                for l in range(cfg.n_perturbations):
                    pert = apply_perturbation(sched[k], eps[l])
                    eff[l] = pert - sched[k]
                    pair = (
                        np.column_stack([pert, base[:, 1]])
                        if k == 0
                        else np.column_stack([base[:, 0], pert])
                    )
                    r, _ = _cumulative_rewards(params, pair, noise)
                    pr[l] = r[k]
                grads[k] = estimate_gradient(base_r[k], pr, eff, cfg.ridge)
        for k in active:
            hist_g[upd, k] = float(np.max(np.abs(grads[k])))
            step = ea_update if cfg.variant == "mf" else mb_update
            hist_loss[upd, k] = step(learners[k], grads[k])
        if fixed_opponent is not None:
            hist_g[upd, 1] = 0.0

        if max(hist_g[upd, k] for k in active) < cfg.early_stop_tol:
            calm += 1
            if calm >= cfg.early_stop_patience:
                u_done = upd + 1
                break
        else:
            calm = 0

    return ScheduleTrainingLog(
        seed=seed,
        config=cfg,
        schedules=hist_sched[:u_done],
        is_pairs=hist_is[:u_done],
        grad_norms=hist_g[:u_done],
        losses=hist_loss[:u_done],
        n_updates_run=u_done,
    )
