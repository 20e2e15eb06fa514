"""Bias-corrected Adam over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["AdamState", "adam_init", "adam_step"]


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float, dtype="float64", **kwargs) -> AdamState:
    return AdamState(
        m=np.zeros(n_params, dtype=dtype),
        v=np.zeros(n_params, dtype=dtype),
        step=0,
        lr=lr,
        **kwargs,
    )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState):
    """One update; returns fresh (params, state), inputs untouched."""
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.m.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = m / (1 - state.beta1**t)
    vhat = v / (1 - state.beta2**t)
    new_params = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new_params.astype(params.dtype, copy=False), replace(state, m=m, v=v, step=t)
