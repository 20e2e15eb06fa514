"""Two independent DDQN agents trained jointly with simultaneous moves.

Each agent owns its Q-network (baseline MLP, price-conditioned, or
history-aware), replay memory, Adam state and Polyak-averaged target
network. Exploration is epsilon-greedy over the admissible discrete trade
grid, with forced full liquidation on the final slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .market import MarketParams, env_init, env_step
from .networks import BaselineQNet, FiLMQNet, HistoryQNet
from .optim import adam_init, adam_step
from .seeding import derive_seed, rng_for

__all__ = [
    "DQNConfig",
    "ReplayBuffer",
    "DQNAgent",
    "TestStats",
    "DQNRunResult",
    "admissible_actions",
    "epsilon_at",
    "select_action",
    "ddqn_targets",
    "train_ddqn_pair",
    "greedy_eval",
    "normalize_price",
    "denormalize_price",
]


@dataclass(frozen=True)
class DQNConfig:
    """Training hyperparameters; defaults follow the baseline replication."""

    variant: str = "baseline"  # baseline | film | history
    gamma: float = 1.0
    lr: float = 2e-4
    replay_capacity: int = 15000
    batch_size: int = 128
    tau_polyak: float = 5e-3
    eps_start: float = 1.0
    eps_min: float = 0.05
    eps_floor_episode: int = 4000
    episodes: int = 10000
    test_episodes: int = 500
    m_act: int = 20
    train_every: int = 1
    dtype: str = "float32"
    ig_every: int = 0  # 0 disables the attribution series
    ig_steps: int = 64

    def __post_init__(self):
        if not 0 < self.tau_polyak <= 1:
            raise ValueError(f"tau_polyak must be in (0,1], got {self.tau_polyak}")
        if not 0 <= self.eps_min <= self.eps_start <= 1:
            raise ValueError(
                f"need 0 <= eps_min <= eps_start <= 1, got {self.eps_min}, {self.eps_start}"
            )
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must be in [0,1], got {self.gamma}")
        if self.variant not in ("baseline", "film", "history"):
            raise ValueError(f"unknown variant {self.variant!r}")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DQNConfig":
        return cls(**d)


def build_qnet(cfg: DQNConfig, params: MarketParams):
    if cfg.variant == "baseline":
        return BaselineQNet(dtype=cfg.dtype)
    if cfg.variant == "film":
        return FiLMQNet(dtype=cfg.dtype)
    return HistoryQNet(n_slices=params.n_slices, dtype=cfg.dtype)


# feature normalization (affine, invertible)

def normalize_price(mid: float, s0: float) -> float:
    return (mid - s0) / s0


def denormalize_price(p: float, s0: float) -> float:
    return p * s0 + s0


def admissible_actions(
    inventory: float, t: int, params: MarketParams, m_act: int, player: int = 0
) -> np.ndarray:
    """Discrete trades available at slice t, ascending.

    Before the final slice: the grid {0, q0/m, 2q0/m, ...} capped at the
    remaining inventory. On the final slice: exactly the remaining inventory.
    """
    n = params.n_slices
    if not 0 <= t < n:
        raise ValueError(f"t={t} outside [0, {n})")
    if t == n - 1:
        return np.array([inventory])
    step = params.q0[player] / m_act
    k_max = min(int(np.floor(inventory / step + 1e-9)), m_act)
    return np.arange(k_max + 1) * step


def epsilon_at(episode: int, cfg: DQNConfig) -> float:
    """Multiplicative decay from eps_start to eps_min, then held at the floor."""
    if cfg.eps_floor_episode <= 0 or cfg.eps_min >= cfg.eps_start:
        return cfg.eps_min
    r = (cfg.eps_min / cfg.eps_start) ** (1.0 / cfg.eps_floor_episode)
    return max(cfg.eps_min, cfg.eps_start * r**episode)


def select_action(
    q_values: np.ndarray, actions: np.ndarray, eps: float, rng: np.random.Generator
) -> float:
    """Uniform over the admissible set w.p. eps, else greedy (first max, so
    ties break toward the smallest action)."""
    if len(actions) == 0:
        raise ValueError("empty admissible set")
    if rng.random() < eps:
        return float(actions[rng.integers(len(actions))])
    return float(actions[int(np.argmax(q_values))])


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored as column arrays."""

    def __init__(self, capacity: int, columns: dict[str, int], dtype="float32"):
        self.capacity = capacity
        self.cols = {
            name: np.zeros((capacity, width) if width > 1 else capacity, dtype=dtype)
            for name, width in columns.items()
        }
        self.idx = 0
        self.size = 0

    def add(self, **values) -> None:
        for name, v in values.items():
            self.cols[name][self.idx] = v
        self.idx = (self.idx + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size < batch:
            raise ValueError(f"buffer holds {self.size} < batch {batch}")
        idx = rng.choice(self.size, size=batch, replace=False)
        return {name: col[idx] for name, col in self.cols.items()}


def _transition_columns(variant: str, n: int) -> dict[str, int]:
    cols = {
        "s": 3,  # normalized (price, inventory, time)
        "a": 1,  # normalized action
        "r": 1,
        "s2": 3,
        "done": 1,
        "next_inv": 1,  # raw shares, to rebuild the admissible set
        "next_t": 1,
    }
    if variant == "history":
        cols["hist"] = 3 * n
        cols["hist2"] = 3 * n
    return cols


class DQNAgent:
    """One player's learner: online/target nets, Adam state, replay memory."""

    def __init__(self, cfg: DQNConfig, params: MarketParams, player: int, run_seed: int):
        self.cfg = cfg
        self.market = params
        self.player = player
        self.q0 = params.q0[player]
        self.net = build_qnet(cfg, params)
        self.params = self.net.init_params(rng_for(run_seed, player, "init"))
        self.target = self.params.copy()
        self.opt = adam_init(self.net.n_params, cfg.lr, dtype=cfg.dtype)
        self.replay = ReplayBuffer(
            cfg.replay_capacity,
            _transition_columns(cfg.variant, params.n_slices),
            dtype=cfg.dtype,
        )
        self._replay_rng = rng_for(run_seed, player, "replay")
        self._action_step = self.q0 / cfg.m_act

    # feature assembly -----------------------------------------------------

    def static_feats(self, mid: float, inv: float, t: int) -> np.ndarray:
        return np.array(
            [
                normalize_price(mid, self.market.s0),
                inv / self.q0,
                t / self.market.n_slices,
            ],
            dtype=self.cfg.dtype,
        )

    def history_block(self, mids: list[float], own_actions: list[float], t: int) -> np.ndarray:
        """[p_0..p_{N-1} | u_{-1}..u_{N-2} | m_0..m_{N-1}] at decision time t."""
        n = self.market.n_slices
        block = np.zeros(3 * n, dtype=self.cfg.dtype)
        k = min(t + 1, n)
        block[:k] = [normalize_price(m, self.market.s0) for m in mids[:k]]
        if k > 1:
            block[n + 1 : n + k] = np.asarray(own_actions[: k - 1]) / self.q0
        block[2 * n : 2 * n + k] = 1.0
        return block

    def _rows(self, feats: np.ndarray, actions: np.ndarray) -> np.ndarray:
        rows = np.empty((len(actions), 4), dtype=self.cfg.dtype)
        rows[:, :3] = feats
        rows[:, 3] = actions / self.q0
        return rows

    def q_values(self, feats: np.ndarray, actions: np.ndarray, hist: np.ndarray | None = None,
                 params: np.ndarray | None = None) -> np.ndarray:
        """Q(s, a) for every candidate action of a single state."""
        params = self.params if params is None else params
        rows = self._rows(feats, actions)
        if self.cfg.variant != "history":
            out, _ = self.net.forward(params, rows)
            return out
        n = self.market.n_slices
        pooled = self.net.encode_history_np(
            params, hist[None, :n], hist[None, n : 2 * n], hist[None, 2 * n :]
        )
        pooled_rows = np.repeat(pooled, len(actions), axis=0)
        return self.net.q_from_parts_np(params, pooled_rows, rows)

    # learning -------------------------------------------------------------

    def train_step(self) -> float:
        """One sampled mini-batch: double-Q targets, MSE step, Polyak update."""
        cfg = self.cfg
        batch = self.replay.sample(cfg.batch_size, self._replay_rng)
        y = ddqn_targets(self, batch)
        if cfg.variant != "history":
            rows = np.concatenate([batch["s"], batch["a"][:, None]], axis=1)
        else:
            rows = np.concatenate(
                [batch["s"], batch["a"][:, None], batch["hist"]], axis=1
            )
        q, cache = self.net.forward(self.params, rows, want_cache=True)
        err = q - y
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite Bellman loss {loss}")
        upstream = (2.0 / cfg.batch_size) * err
        grads = self.net.gradient(cache, upstream)
        self.params, self.opt = adam_step(self.params, grads, self.opt)
        self.target = cfg.tau_polyak * self.params + (1 - cfg.tau_polyak) * self.target
        self.target = self.target.astype(self.params.dtype, copy=False)
        return loss


def _next_action_sets(agent: DQNAgent, next_inv: np.ndarray, next_t: np.ndarray):
    """Flattened admissible sets for a batch of next states.

    Returns (counts, flat_actions); rows at the final slice contribute their
    single forced liquidation trade.
    """
    cfg, market = agent.cfg, agent.market
    step = agent._action_step
    last = next_t.astype(int) == market.n_slices - 1
    counts = np.minimum(np.floor(next_inv / step + 1e-9).astype(int), cfg.m_act) + 1
    counts[last] = 1
    maxc = counts.max()
    ar = np.arange(maxc)
    mask = ar[None, :] < counts[:, None]
    flat = (np.broadcast_to(ar, mask.shape)[mask] * step).astype(float)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    flat[offsets[last]] = next_inv[last]
    return counts, flat, offsets


def ddqn_targets(agent: DQNAgent, batch: dict[str, np.ndarray]) -> np.ndarray:
    """y = r + (1-d) * gamma * Q_target(s', argmax_a' Q_online(s', a'))."""
    cfg = agent.cfg
    y = batch["r"].astype(cfg.dtype).copy()
    live = batch["done"] < 0.5
    if cfg.gamma == 0.0 or not np.any(live):
        return y
    next_inv = batch["next_inv"][live].astype(float)
    next_t = batch["next_t"][live]
    if np.any(next_t.astype(int) >= agent.market.n_slices):
        raise ValueError("non-terminal transition with exhausted horizon")
    counts, flat_actions, offsets = _next_action_sets(agent, next_inv, next_t)
    feats2 = batch["s2"][live]
    rows = np.empty((len(flat_actions), 4), dtype=cfg.dtype)
    rows[:, :3] = np.repeat(feats2, counts, axis=0)
    rows[:, 3] = flat_actions / agent.q0
    if cfg.variant != "history":
        q_online, _ = agent.net.forward(agent.params, rows)
    else:
        n = agent.market.n_slices
        hist2 = batch["hist2"][live]
        pooled = agent.net.encode_history_np(
            agent.params, hist2[:, :n], hist2[:, n : 2 * n], hist2[:, 2 * n :]
        )
        pooled_rows = np.repeat(pooled, counts, axis=0)
        q_online = agent.net.q_from_parts_np(agent.params, pooled_rows, rows)
    # segmented argmax; actions ascend within a segment so the first max wins
    seg_max = np.maximum.reduceat(q_online, offsets)
    hit = np.flatnonzero(q_online == np.repeat(seg_max, counts))
    seg_of_hit = np.searchsorted(offsets, hit, side="right") - 1
    _, first = np.unique(seg_of_hit, return_index=True)
    best_rows = rows[hit[first]]
    if cfg.variant != "history":
        q_eval, _ = agent.net.forward(agent.target, best_rows)
    else:
        pooled_t = agent.net.encode_history_np(
            agent.target, hist2[:, :n], hist2[:, n : 2 * n], hist2[:, 2 * n :]
        )
        q_eval = agent.net.q_from_parts_np(agent.target, pooled_t, best_rows)
    y[live] += cfg.gamma * q_eval.astype(cfg.dtype)
    return y


@dataclass
class TestStats:
    """Greedy out-of-sample evaluation summary."""

    is_pairs: np.ndarray  # (M, K)
    inventory_paths: np.ndarray  # (N+1, K) averaged over episodes
    centroid: np.ndarray  # per-player mean IS / N

    def to_dict(self) -> dict:
        return {
            "is_pairs": self.is_pairs.tolist(),
            "inventory_paths": self.inventory_paths.tolist(),
            "centroid": self.centroid.tolist(),
        }


@dataclass
class DQNRunResult:
    config: DQNConfig
    market: MarketParams
    seed: int
    log: dict[str, np.ndarray]
    test: TestStats
    agents: list


def _episode(params, agents, seed_env, episode, eps, rngs, train: bool):
    """One joint episode; returns (IS pair, per-agent mean loss, trades)."""
    n, k = params.n_slices, params.n_players
    cfg = agents[0].cfg
    state = env_init(params, seed_env, episode=episode)
    mids = [state.mid]
    own_actions: list[list[float]] = [[] for _ in range(k)]
    losses = [[] for _ in range(k)]
    trades = np.zeros((n, k))
    revenue = np.zeros(k)
    feats = [None] * k
    hists = [None] * k
    for t in range(n):
        actions = np.empty(k)
        for i, ag in enumerate(agents):
            acts = admissible_actions(state.inv[i], t, params, cfg.m_act, player=i)
            feats[i] = ag.static_feats(state.mid, state.inv[i], t)
            hists[i] = (
                ag.history_block(mids, own_actions[i], t)
                if cfg.variant == "history"
                else None
            )
            # draw first so Q is only evaluated on the greedy branch; the
            # action law is identical to select_action
            if train and rngs[i].random() < eps:
                actions[i] = acts[rngs[i].integers(len(acts))]
            else:
                qv = ag.q_values(feats[i], acts, hist=hists[i])
                actions[i] = acts[int(np.argmax(qv))]
        state, out = env_step(params, state, actions)
        mids.append(state.mid)
        trades[t] = out.trades
        revenue = revenue + out.trades * out.exec_prices
        for i, ag in enumerate(agents):
            own_actions[i].append(float(out.trades[i]))
            if train:
                done = 1.0 if t == n - 1 else 0.0
                tr = {
                    "s": feats[i],
                    "a": out.trades[i] / ag.q0,
                    "r": out.rewards[i],
                    "s2": ag.static_feats(state.mid, state.inv[i], t + 1)
                    if t < n - 1
                    else np.zeros(3, dtype=cfg.dtype),
                    "done": done,
                    "next_inv": state.inv[i],
                    "next_t": t + 1,
                }
                if cfg.variant == "history":
                    tr["hist"] = hists[i]
                    tr["hist2"] = (
                        ag.history_block(mids, own_actions[i], t + 1)
                        if t < n - 1
                        else np.zeros(3 * n, dtype=cfg.dtype)
                    )
                ag.replay.add(**tr)
                if (
                    ag.replay.size >= cfg.batch_size
                    and (t + 1) % cfg.train_every == 0
                ):
                    losses[i].append(ag.train_step())
    is_pair = np.asarray(params.q0) * params.s0 - revenue
    mean_loss = [float(np.mean(l)) if l else math.nan for l in losses]
    return is_pair, mean_loss, trades


def train_ddqn_pair(
    params: MarketParams,
    cfg: DQNConfig,
    seed: int,
    progress=None,
) -> DQNRunResult:
    """Joint training of two independent agents with simultaneous moves.

    Logs the per-episode shortfall pair, exploration rate, Bellman losses and
    (optionally, via cfg.ig_every) the integrated-gradients attribution of
    agent 0 on a fixed probe grid.
    """
    agents = [DQNAgent(cfg, params, i, seed) for i in range(params.n_players)]
    env_seed = derive_seed(seed, 0, "env")
    n_ep = cfg.episodes
    log = {
        "episode": np.arange(n_ep),
        "eps": np.zeros(n_ep),
        "is_p0": np.zeros(n_ep),
        "is_p1": np.zeros(n_ep),
        "loss_p0": np.full(n_ep, math.nan),
        "loss_p1": np.full(n_ep, math.nan),
    }
    ig_rows = []
    probe = None
    if cfg.ig_every > 0 and cfg.variant != "history":
        from .diagnostics import build_probe_grid

        probe = build_probe_grid(params, m_act=cfg.m_act)
    for e in range(n_ep):
        eps = epsilon_at(e, cfg)
        rngs = [rng_for(seed, e, f"explore{i}") for i in range(len(agents))]
        is_pair, mean_loss, _ = _episode(params, agents, env_seed, e, eps, rngs, True)
        log["eps"][e] = eps
        log["is_p0"][e], log["is_p1"][e] = is_pair[0], is_pair[1]
        log["loss_p0"][e], log["loss_p1"][e] = mean_loss[0], mean_loss[1]
        if probe is not None and (e + 1) % cfg.ig_every == 0:
            from .diagnostics import ig_summary

            summ = ig_summary(agents[0].net, agents[0].params, probe, m=cfg.ig_steps)
            ig_rows.append((e, summ["price"], summ["inventory"], summ["time"]))
        if progress is not None and (e + 1) % 500 == 0:
            progress(e + 1, n_ep)
    test = greedy_eval(agents, params, cfg.test_episodes, seed)
    log["ig"] = np.array(ig_rows) if ig_rows else np.zeros((0, 4))
    return DQNRunResult(
        config=cfg, market=params, seed=seed, log=log, test=test, agents=agents
    )


def greedy_eval(agents, params: MarketParams, m_episodes: int, seed: int) -> TestStats:
    """Out-of-sample joint evaluation with greedy action selection."""
    k = params.n_players
    n = params.n_slices
    test_seed = derive_seed(seed, 1, "test")
    is_pairs = np.zeros((m_episodes, k))
    paths = np.zeros((n + 1, k))
    rngs = [np.random.default_rng(0) for _ in range(k)]  # unused at eps=0
    for m in range(m_episodes):
        is_pair, _, trades = _episode(
            params, agents, test_seed, m, 0.0, rngs, train=False
        )
        is_pairs[m] = is_pair
        q0 = np.asarray(params.q0)
        paths += np.vstack([q0, q0 - np.cumsum(trades, axis=0)])
    paths /= m_episodes
    centroid = is_pairs.mean(axis=0) / n
    return TestStats(is_pairs=is_pairs, inventory_paths=paths, centroid=centroid)
