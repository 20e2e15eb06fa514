"""The five fixed network variants over flat parameter vectors.

Each network owns a parameter layout (flat vector with named views), an
initializer, a forward pass written once against the engine protocol, and a
gradient routine that replays the recorded tape. Q-networks map batches of
feature rows to per-row values; schedule networks map their implicit time
grid to a full trade schedule.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import NumpyEngine, PoolingDegenerateError, Tape, TapeEngine

__all__ = [
    "ParamLayout",
    "BaselineQNet",
    "FiLMQNet",
    "HistoryQNet",
    "TimeOnlyScheduleNet",
    "ModelBasedScheduleNet",
    "network_from_dict",
    "save_checkpoint",
    "load_checkpoint",
]


class ParamLayout:
    """Named views into a single flat parameter vector."""

    def __init__(self, entries: list[tuple[str, tuple[int, ...], str]]):
        self.entries = entries
        self.slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        off = 0
        for name, shape, _init in entries:
            size = math.prod(shape) if shape else 1
            self.slices[name] = (off, off + size, shape)
            off += size
        self.n_params = off

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        lo, hi, shape = self.slices[name]
        return flat[lo:hi].reshape(shape)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: self.view(flat, name) for name in self.slices}

    def init(self, rng: np.random.Generator, dtype) -> np.ndarray:
        flat = np.zeros(self.n_params, dtype=dtype)
        for name, shape, init in self.entries:
            v = self.view(flat, name)
            if init == "zero":
                continue
            if init.startswith("const:"):
                v[...] = float(init.split(":")[1])
            elif init.startswith("fan:"):
                bound = 1.0 / math.sqrt(int(init.split(":")[1]))
                v[...] = rng.uniform(-bound, bound, size=shape)
            else:
                raise ValueError(f"unknown init {init!r}")
        return flat


_LAYOUT_CACHE: dict = {}


class _Network:
    """Shared forward/gradient plumbing for all variants."""

    @property
    def layout(self) -> ParamLayout:
        lay = _LAYOUT_CACHE.get(self)
        if lay is None:
            lay = _LAYOUT_CACHE[self] = self._build_layout()
        return lay

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return self.layout.init(rng, self.dtype)

    @property
    def n_params(self) -> int:
        return self.layout.n_params

    def forward(self, params: np.ndarray, inputs, want_cache: bool = False):
        """Evaluate the network; with ``want_cache`` the recorded tape is
        returned for a later gradient call."""
        if want_cache:
            tape = Tape()
            eng = TapeEngine(tape)
            leaves = {n: tape.leaf(v) for n, v in self.layout.views(params).items()}
            x_leaf = tape.leaf(np.asarray(inputs)) if inputs is not None else None
            out = self._forward(eng, leaves, x_leaf)
            return out.value, (tape, leaves, x_leaf, out)
        eng = NumpyEngine()
        out = self._forward(eng, self.layout.views(params), np.asarray(inputs) if inputs is not None else None)
        return out, None

    def gradient(self, cache, upstream, want_input_grad: bool = False):
        """Exact gradient of upstream-weighted output w.r.t. all parameters
        (flat vector) and, on request, the input."""
        tape, leaves, x_leaf, out = cache
        tape.backward(out, upstream)
        flat = np.zeros(self.layout.n_params, dtype=self.dtype)
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                lo, hi, shape = self.layout.slices[name]
                flat[lo:hi] = np.asarray(leaf.grad).reshape(-1)
        if want_input_grad:
            if x_leaf is None:
                raise ValueError("network has no explicit input")
            g = x_leaf.grad
            gin = np.zeros_like(x_leaf.value) if g is None else np.asarray(g)
            return flat, gin
        return flat

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = type(self).__name__
        return d


@dataclass(frozen=True)
class BaselineQNet(_Network):
    """Plain value network on (price, inventory, time, action) rows."""

    in_dim: int = 4
    width: int = 128
    depth: int = 5
    dtype: str = "float32"

    def _build_layout(self) -> ParamLayout:
        entries = []
        dims = [self.in_dim] + [self.width] * self.depth + [1]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            entries.append((f"l{i}_w", (a, b), f"fan:{a}"))
            entries.append((f"l{i}_b", (b,), f"fan:{a}"))
        return ParamLayout(entries)

    def _forward(self, eng, p, x):
        h = x
        for i in range(self.depth):
            h = eng.silu(eng.add(eng.matmul(h, p[f"l{i}_w"]), p[f"l{i}_b"]))
        out = eng.add(eng.matmul(h, p[f"l{self.depth}_w"]), p[f"l{self.depth}_b"])
        return eng.reshape(out, (-1,))


@dataclass(frozen=True)
class FiLMQNet(_Network):
    """Price-conditioned value network: learned price rescaling, bounded
    feature-wise modulation of each residual block, and an additive
    price-skip output head."""

    in_dim: int = 4
    trunk_width: int = 128
    price_width: int = 64
    n_blocks: int = 3
    film_bound: float = 1.0
    res_scale: float = 0.1
    eta_init: float = 1e-3
    dtype: str = "float32"

    def _build_layout(self) -> ParamLayout:
        h, c = self.trunk_width, self.price_width
        entries = [
            ("log_cp", (1,), "zero"),
            ("base0_w", (self.in_dim, h), f"fan:{self.in_dim}"),
            ("base0_b", (h,), f"fan:{self.in_dim}"),
            ("base1_w", (h, h), f"fan:{h}"),
            ("base1_b", (h,), f"fan:{h}"),
            ("price0_w", (1, c), "fan:1"),
            ("price0_b", (c,), "fan:1"),
            ("price1_w", (c, c), f"fan:{c}"),
            ("price1_b", (c,), f"fan:{c}"),
        ]
        for l in range(self.n_blocks):
            entries += [
                (f"film{l}_w", (c, 2 * h), "zero"),
                (f"film{l}_b", (2 * h,), "zero"),
                (f"ln{l}_g", (h,), "const:1"),
                (f"ln{l}_b", (h,), "zero"),
                (f"blk{l}0_w", (h, h), f"fan:{h}"),
                (f"blk{l}0_b", (h,), f"fan:{h}"),
                (f"blk{l}1_w", (h, h), f"fan:{h}"),
                (f"blk{l}1_b", (h,), f"fan:{h}"),
            ]
        entries += [
            ("head_w", (h, 1), f"fan:{h}"),
            ("head_b", (1,), f"fan:{h}"),
            ("skip_w", (c, 1), f"fan:{c}"),
            ("skip_b", (1,), f"fan:{c}"),
            ("log_eta", (1,), f"const:{math.log(self.eta_init)}"),
        ]
        return ParamLayout(entries)

    def _forward(self, eng, p, x):
        h_dim = self.trunk_width
        price = eng.mul(eng.slice_cols(x, 0, 1), eng.exp(p["log_cp"]))
        xt = eng.concat([price, eng.slice_cols(x, 1, self.in_dim)], axis=-1)
        h = eng.silu(eng.add(eng.matmul(xt, p["base0_w"]), p["base0_b"]))
        h = eng.silu(eng.add(eng.matmul(h, p["base1_w"]), p["base1_b"]))
        c = eng.silu(eng.add(eng.matmul(price, p["price0_w"]), p["price0_b"]))
        c = eng.silu(eng.add(eng.matmul(c, p["price1_w"]), p["price1_b"]))
        for l in range(self.n_blocks):
            gb = eng.add(eng.matmul(c, p[f"film{l}_w"]), p[f"film{l}_b"])
            gamma = eng.mul(eng.tanh(eng.slice_cols(gb, 0, h_dim)), self.film_bound)
            beta = eng.slice_cols(gb, h_dim, 2 * h_dim)
            mod = eng.add(eng.mul(h, eng.add(gamma, 1.0)), beta)
            u = eng.layer_norm(mod, p[f"ln{l}_g"], p[f"ln{l}_b"])
            u = eng.silu(eng.add(eng.matmul(u, p[f"blk{l}0_w"]), p[f"blk{l}0_b"]))
            u = eng.add(eng.matmul(u, p[f"blk{l}1_w"]), p[f"blk{l}1_b"])
            h = eng.add(h, eng.mul(u, self.res_scale))
        trunk = eng.add(eng.matmul(h, p["head_w"]), p["head_b"])
        skip = eng.mul(eng.add(eng.matmul(c, p["skip_w"]), p["skip_b"]), eng.exp(p["log_eta"]))
        return eng.reshape(eng.add(trunk, skip), (-1,))

    def film_modulations(self, params: np.ndarray, x: np.ndarray) -> list[np.ndarray]:
        """Multiplicative modulations per block (diagnostic; numpy path)."""
        eng = NumpyEngine()
        p = self.layout.views(params)
        price = np.exp(p["log_cp"]) * x[..., 0:1]
        c = eng.silu(price @ p["price0_w"] + p["price0_b"])
        c = eng.silu(c @ p["price1_w"] + p["price1_b"])
        mods = []
        for l in range(self.n_blocks):
            gb = c @ p[f"film{l}_w"] + p[f"film{l}_b"]
            mods.append(self.film_bound * np.tanh(gb[..., : self.trunk_width]))
        return mods


@dataclass(frozen=True)
class HistoryQNet(_Network):
    """History-aware value network: token sequence of (price, lagged own
    action) per episode position, masked encoder, masked average pooling,
    fused with a static branch over (price, inventory, time, action).

    Input rows are ``[static(4) | price_hist(N) | action_hist(N) | mask(N)]``.
    """

    n_slices: int = 10
    in_static: int = 4
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    ffn_width: int = 128
    static_width: int = 64
    fusion_width: int = 128
    dtype: str = "float32"

    @property
    def in_dim(self) -> int:
        return self.in_static + 3 * self.n_slices

    def _build_layout(self) -> ParamLayout:
        d, f = self.d_model, self.ffn_width
        s, z = self.static_width, self.fusion_width
        entries = [
            ("tok_w", (2, d), "fan:2"),
            ("tok_b", (d,), "fan:2"),
            ("pos", (self.n_slices, d), f"fan:{d}"),
        ]
        for l in range(self.n_layers):
            entries += [
                (f"enc{l}_ln1_g", (d,), "const:1"),
                (f"enc{l}_ln1_b", (d,), "zero"),
                (f"enc{l}_q_w", (d, d), f"fan:{d}"),
                (f"enc{l}_q_b", (d,), f"fan:{d}"),
                (f"enc{l}_k_w", (d, d), f"fan:{d}"),
                (f"enc{l}_k_b", (d,), f"fan:{d}"),
                (f"enc{l}_v_w", (d, d), f"fan:{d}"),
                (f"enc{l}_v_b", (d,), f"fan:{d}"),
                (f"enc{l}_o_w", (d, d), f"fan:{d}"),
                (f"enc{l}_o_b", (d,), f"fan:{d}"),
                (f"enc{l}_ln2_g", (d,), "const:1"),
                (f"enc{l}_ln2_b", (d,), "zero"),
                (f"enc{l}_f1_w", (d, f), f"fan:{d}"),
                (f"enc{l}_f1_b", (f,), f"fan:{d}"),
                (f"enc{l}_f2_w", (f, d), f"fan:{f}"),
                (f"enc{l}_f2_b", (d,), f"fan:{f}"),
            ]
        entries += [
            ("lnf_g", (d,), "const:1"),
            ("lnf_b", (d,), "zero"),
            ("stat0_w", (self.in_static, s), f"fan:{self.in_static}"),
            ("stat0_b", (s,), f"fan:{self.in_static}"),
            ("stat1_w", (s, s), f"fan:{s}"),
            ("stat1_b", (s,), f"fan:{s}"),
            ("fuse0_w", (d + s, z), f"fan:{d + s}"),
            ("fuse0_b", (z,), f"fan:{d + s}"),
            ("fuse1_w", (z, z), f"fan:{z}"),
            ("fuse1_b", (z,), f"fan:{z}"),
            ("out_w", (z, 1), f"fan:{z}"),
            ("out_b", (1,), f"fan:{z}"),
        ]
        return ParamLayout(entries)

    def _attention_bias(self, mask: np.ndarray) -> np.ndarray:
        """(B,1,N,N) additive bias: causal and restricted to valid keys."""
        n = self.n_slices
        neg = np.asarray(-1e9, dtype=self.dtype)
        causal = np.triu(np.ones((n, n), dtype=bool), k=1)
        key_invalid = mask[:, None, :] < 0.5
        bias = np.where(causal[None] | key_invalid, neg, np.asarray(0, dtype=self.dtype))
        return bias[:, None]

    def _split_input(self, x):
        n = self.n_slices
        s = self.in_static
        return x[..., :s], x[..., s : s + n], x[..., s + n : s + 2 * n], x[..., s + 2 * n :]

    def _encode(self, eng, p, prices, actions, bias, counts):
        n, d, nh = self.n_slices, self.d_model, self.n_heads
        dh = d // nh
        scale = 1.0 / math.sqrt(dh)
        tok = eng.concat(
            [eng.reshape(prices, (-1, n, 1)), eng.reshape(actions, (-1, n, 1))], axis=-1
        )
        h = eng.add(eng.add(eng.matmul(tok, p["tok_w"]), p["tok_b"]), p["pos"])
        for l in range(self.n_layers):
            x = eng.layer_norm(h, p[f"enc{l}_ln1_g"], p[f"enc{l}_ln1_b"])
            q = eng.add(eng.matmul(x, p[f"enc{l}_q_w"]), p[f"enc{l}_q_b"])
            k = eng.add(eng.matmul(x, p[f"enc{l}_k_w"]), p[f"enc{l}_k_b"])
            v = eng.add(eng.matmul(x, p[f"enc{l}_v_w"]), p[f"enc{l}_v_b"])
            q = eng.transpose(eng.reshape(q, (-1, n, nh, dh)), (0, 2, 1, 3))
            k = eng.transpose(eng.reshape(k, (-1, n, nh, dh)), (0, 2, 1, 3))
            v = eng.transpose(eng.reshape(v, (-1, n, nh, dh)), (0, 2, 1, 3))
            scores = eng.mul(eng.matmul(q, eng.transpose(k, (0, 1, 3, 2))), scale)
            att = eng.masked_softmax(scores, bias)
            o = eng.matmul(att, v)
            o = eng.reshape(eng.transpose(o, (0, 2, 1, 3)), (-1, n, d))
            h = eng.add(h, eng.add(eng.matmul(o, p[f"enc{l}_o_w"]), p[f"enc{l}_o_b"]))
            x2 = eng.layer_norm(h, p[f"enc{l}_ln2_g"], p[f"enc{l}_ln2_b"])
            u = eng.gelu(eng.add(eng.matmul(x2, p[f"enc{l}_f1_w"]), p[f"enc{l}_f1_b"]))
            u = eng.add(eng.matmul(u, p[f"enc{l}_f2_w"]), p[f"enc{l}_f2_b"])
            h = eng.add(h, u)
        h = eng.layer_norm(h, p["lnf_g"], p["lnf_b"])
        # masked average pooling over valid positions
        mask_col = counts["mask"][..., None]
        pooled = eng.sum_axis(eng.mul(h, mask_col), axis=1)
        return eng.mul(pooled, counts["inv_count"])

    def _static_branch(self, eng, p, static):
        s = eng.gelu(eng.add(eng.matmul(static, p["stat0_w"]), p["stat0_b"]))
        return eng.gelu(eng.add(eng.matmul(s, p["stat1_w"]), p["stat1_b"]))

    def _fusion(self, eng, p, fused):
        f = eng.gelu(eng.add(eng.matmul(fused, p["fuse0_w"]), p["fuse0_b"]))
        f = eng.gelu(eng.add(eng.matmul(f, p["fuse1_w"]), p["fuse1_b"]))
        return eng.reshape(eng.add(eng.matmul(f, p["out_w"]), p["out_b"]), (-1,))

    def _mask_consts(self, mask_np: np.ndarray):
        counts = mask_np.sum(axis=-1)
        if np.any(counts < 0.5):
            raise PoolingDegenerateError("all-zero history mask")
        return {
            "mask": mask_np.astype(self.dtype),
            "inv_count": (1.0 / counts).astype(self.dtype)[..., None],
        }

    def _forward(self, eng, p, x):
        x_np = x.value if hasattr(x, "value") else x
        mask_np = np.asarray(x_np[..., self.in_static + 2 * self.n_slices :])
        counts = self._mask_consts(mask_np)
        bias = self._attention_bias(mask_np)
        s0 = self.in_static
        n = self.n_slices
        static = eng.slice_cols(x, 0, s0)
        prices = eng.slice_cols(x, s0, s0 + n)
        actions = eng.slice_cols(x, s0 + n, s0 + 2 * n)
        pooled = self._encode(eng, p, prices, actions, bias, counts)
        stat = self._static_branch(eng, p, static)
        return self._fusion(eng, p, eng.concat([pooled, stat], axis=-1))

    # fast inference helpers for the action sweep: the sequence embedding is
    # shared across candidate actions of one state
    def encode_history_np(self, params, prices, actions, mask):
        eng = NumpyEngine()
        p = self.layout.views(params)
        counts = self._mask_consts(np.asarray(mask))
        bias = self._attention_bias(np.asarray(mask))
        return self._encode(eng, p, np.asarray(prices), np.asarray(actions), bias, counts)

    def q_from_parts_np(self, params, pooled_rows, static_rows):
        eng = NumpyEngine()
        p = self.layout.views(params)
        stat = self._static_branch(eng, p, static_rows)
        return self._fusion(eng, p, np.concatenate([pooled_rows, stat], axis=-1))


def _schedule_layout(width: int, n_slices: int) -> ParamLayout:
    return ParamLayout(
        [
            ("l0_w", (1, width), "fan:1"),
            ("l0_b", (width,), "fan:1"),
            ("l1_w", (width, width), f"fan:{width}"),
            ("l1_b", (width,), f"fan:{width}"),
            ("l2_w", (width, 1), f"fan:{width}"),
            ("l2_b", (1,), f"fan:{width}"),
            ("slice_bias", (n_slices,), "zero"),
        ]
    )


class _ScheduleNet(_Network):
    def _build_layout(self) -> ParamLayout:
        return _schedule_layout(self.width, self.n_slices)

    def time_grid(self) -> np.ndarray:
        n = self.n_slices
        return (np.arange(n, dtype=self.dtype) / n).reshape(n, 1)

    def _scores(self, eng, p, x):
        h = eng.silu(eng.add(eng.matmul(x, p["l0_w"]), p["l0_b"]))
        h = eng.silu(eng.add(eng.matmul(h, p["l1_w"]), p["l1_b"]))
        z = eng.add(eng.matmul(h, p["l2_w"]), p["l2_b"])
        return eng.add(eng.reshape(z, (-1,)), p["slice_bias"])

    def forward(self, params, inputs=None, want_cache: bool = False):
        if inputs is None:
            inputs = self.time_grid()
        return super().forward(params, inputs, want_cache=want_cache)


@dataclass(frozen=True)
class TimeOnlyScheduleNet(_ScheduleNet):
    """Softplus-normalized schedule: non-negative trades summing to q0 by
    construction."""

    n_slices: int = 10
    q0: float = 100.0
    width: int = 64
    dtype: str = "float64"

    def _forward(self, eng, p, x):
        z = self._scores(eng, p, x)
        w = eng.softplus(z)
        total = eng.sum_axis(w, axis=0, keepdims=True)
        return eng.mul(eng.div(w, total), self.q0)


@dataclass(frozen=True)
class ModelBasedScheduleNet(_ScheduleNet):
    """TWAP-anchored schedule: free offsets on the first N-1 slices, terminal
    slice takes the residual (possibly negative; the trainer penalizes)."""

    n_slices: int = 10
    q0: float = 100.0
    width: int = 64
    dtype: str = "float64"

    def _forward(self, eng, p, x):
        z = self._scores(eng, p, x)
        twap = np.full(self.n_slices, self.q0 / self.n_slices, dtype=self.dtype)
        head = eng.add(eng.slice_cols(z, 0, self.n_slices - 1), twap[:-1])
        resid = eng.sub(self.q0, eng.sum_axis(head, axis=0, keepdims=True))
        return eng.concat([head, resid], axis=-1)


_VARIANTS = {
    "BaselineQNet": BaselineQNet,
    "FiLMQNet": FiLMQNet,
    "HistoryQNet": HistoryQNet,
    "TimeOnlyScheduleNet": TimeOnlyScheduleNet,
    "ModelBasedScheduleNet": ModelBasedScheduleNet,
}


def network_from_dict(d: dict):
    d = dict(d)
    cls = _VARIANTS[d.pop("variant")]
    return cls(**d)


def save_checkpoint(path, net, params: np.ndarray) -> None:
    """Flat binary parameter vector plus a JSON spec header; exact round trip."""
    spec = json.dumps(net.to_dict(), sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, spec=np.frombuffer(spec.encode(), dtype=np.uint8), params=params)


def load_checkpoint(path):
    with np.load(path) as z:
        spec = json.loads(z["spec"].tobytes().decode())
        params = z["params"]
    return network_from_dict(spec), params
