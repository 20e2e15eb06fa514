"""Post-hoc analysis: integrated-gradients attributions, supra-competitive
quadrant statistics, rolling shares, transition matrices, centroid distances
and average inventory paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import MarketParams

__all__ = [
    "ProbeGrid",
    "build_probe_grid",
    "integrated_gradients",
    "ig_summary",
    "classify_quadrant",
    "QUADRANTS",
    "rolling_share",
    "transition_stats",
    "centroid_distances",
    "average_inventory_paths",
]

QUADRANTS = ("SW", "SE", "NW", "NE")


@dataclass(frozen=True)
class ProbeGrid:
    """Fixed off-policy probe set: normalized states plus admissible-action
    metadata, held constant across training for comparability."""

    states: np.ndarray  # (G, 3) normalized (price, inventory, time)
    counts: np.ndarray  # admissible actions per state
    flat_actions: np.ndarray  # normalized candidate actions, concatenated
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def build_probe_grid(
    params: MarketParams,
    n_price: int = 9,
    n_inv: int = 9,
    price_span: float = 0.05,
    m_act: int = 20,
    player: int = 0,
) -> ProbeGrid:
    """Cartesian grid over normalized (price, inventory, time).

    Inventories span (0, q0]; at the final slice the admissible set collapses
    to the forced liquidation trade.
    """
    from .dqn import admissible_actions

    n = params.n_slices
    prices = np.linspace(-price_span, price_span, n_price)
    invs = np.linspace(1.0 / n_inv, 1.0, n_inv)
    q0 = params.q0[player]
    states, counts, acts = [], [], []
    for p in prices:
        for u in invs:
            for t in range(n):
                states.append((p, u, t / n))
                a = admissible_actions(u * q0, t, params, m_act, player=player)
                counts.append(len(a))
                acts.append(a / q0)
    flat = np.concatenate(acts)
    counts = np.asarray(counts)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return ProbeGrid(
        states=np.asarray(states), counts=counts, flat_actions=flat, offsets=offsets
    )


def integrated_gradients(net, params, x: np.ndarray, x0: np.ndarray, m: int = 64) -> np.ndarray:
    """Riemann-sum path attribution of the scalar output from x0 to x.

    IG_j = (x_j - x0_j) * (1/m) * sum_{l=1..m} df/dx_j at x0 + (l/m)(x - x0).
    Satisfies completeness up to the O(1/m) quadrature error.
    """
    if m < 1:
        raise ValueError(f"need m >= 1, got {m}")
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    alphas = np.arange(1, m + 1)[:, None] / m
    pts = x0[None, :] + alphas * (x - x0)[None, :]
    out, cache = net.forward(params.astype(np.float64, copy=False), pts, want_cache=True)
    _, gin = net.gradient(cache, np.ones_like(out), want_input_grad=True)
    return (x - x0) * gin.mean(axis=0)


def _greedy_rows(net, params, grid: ProbeGrid, dtype) -> np.ndarray:
    """(G, 4) rows of probe states with their greedy-action coordinate."""
    rows = np.empty((len(grid.flat_actions), 4), dtype=dtype)
    rows[:, :3] = np.repeat(grid.states, grid.counts, axis=0)
    rows[:, 3] = grid.flat_actions
    q, _ = net.forward(params, rows)
    seg_max = np.maximum.reduceat(q, grid.offsets)
    hit = np.flatnonzero(q == np.repeat(seg_max, grid.counts))
    seg = np.searchsorted(grid.offsets, hit, side="right") - 1
    _, first = np.unique(seg, return_index=True)
    return rows[hit[first]].astype(float)


def ig_summary(net, params, grid: ProbeGrid, m: int = 64) -> dict[str, float]:
    """Mean absolute attribution per feature over the probe grid.

    The baseline input zeroes price/inventory/time (initial conditions under
    the normalization) while keeping the explained greedy action fixed, so
    the action's attribution is exactly zero and reported separately.
    """
    rows = _greedy_rows(net, params, grid, dtype=params.dtype)
    g = len(rows)
    m_steps = m
    alphas = np.arange(1, m_steps + 1, dtype=float) / m_steps
    # batch all interpolation points in one forward pass
    pts = np.empty((g * m_steps, 4))
    base = rows.copy()
    base[:, :3] = 0.0
    diff = rows - base
    for i, al in enumerate(alphas):
        pts[i * g : (i + 1) * g] = base + al * diff
    p64 = params.astype(np.float64, copy=False)
    out, cache = net.forward(p64, pts, want_cache=True)
    _, gin = net.gradient(cache, np.ones_like(out), want_input_grad=True)
    avg = gin.reshape(m_steps, g, 4).mean(axis=0)
    ig = diff * avg
    mean_abs = np.abs(ig).mean(axis=0)
    return {
        "price": float(mean_abs[0]),
        "inventory": float(mean_abs[1]),
        "time": float(mean_abs[2]),
        "action": float(mean_abs[3]),
    }


def classify_quadrant(is_pair, benchmark) -> str:
    """Quadrant of an IS pair relative to a benchmark point; ties go to the
    non-SW side so supra-competitive counts are never inflated."""
    below0 = is_pair[0] < benchmark[0]
    below1 = is_pair[1] < benchmark[1]
    if below0 and below1:
        return "SW"
    if below1:
        return "SE"
    if below0:
        return "NW"
    return "NE"


def rolling_share(labels, window: int = 20, target: str = "SW") -> np.ndarray:
    """Trailing-window fraction of episodes labelled ``target``; the first
    window-1 entries use the available prefix."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    hits = np.asarray([1.0 if l == target else 0.0 for l in labels])
    out = np.empty(len(hits))
    csum = np.concatenate(([0.0], np.cumsum(hits)))
    for i in range(len(hits)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def transition_stats(labels):
    """Occupancy frequencies and row-normalized transition matrix over the
    four quadrants; rows never visited are emitted as NaN."""
    labels = list(labels)
    if len(labels) < 2:
        raise ValueError("need at least 2 labels for transitions")
    idx = {q: i for i, q in enumerate(QUADRANTS)}
    occ = np.zeros(4)
    counts = np.zeros((4, 4))
    for l in labels:
        occ[idx[l]] += 1
    for a, b in zip(labels[:-1], labels[1:]):
        counts[idx[a], idx[b]] += 1
    occ /= len(labels)
    rows = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        trans = np.where(rows > 0, counts / np.where(rows > 0, rows, 1), np.nan)
    return occ, trans


def centroid_distances(per_run_is_pairs, nash_point, twap_point, n_slices: int):
    """Per-run centroids in the (IS_0/N, IS_1/N) plane and the run-averaged
    Euclidean distances to the Nash and TWAP benchmark points."""
    nash = np.asarray(nash_point, dtype=float)
    twap = np.asarray(twap_point, dtype=float)
    cents = np.array(
        [np.asarray(p).mean(axis=0) / n_slices for p in per_run_is_pairs]
    )
    if cents.size == 0:
        raise ValueError("need at least one run")
    d_n = float(np.linalg.norm(cents - nash, axis=1).mean())
    d_t = float(np.linalg.norm(cents - twap, axis=1).mean())
    return cents, d_n, d_t


def average_inventory_paths(paths) -> np.ndarray:
    """Mean inventory path over episodes; input (M, N+1, K) or a list."""
    arr = np.asarray(paths, dtype=float)
    if arr.ndim != 3:
        raise ValueError(f"expected (episodes, N+1, players), got {arr.shape}")
    lengths = {a.shape for a in arr}
    if len(lengths) != 1:
        raise ValueError("records disagree on path length")
    return arr.mean(axis=0)
