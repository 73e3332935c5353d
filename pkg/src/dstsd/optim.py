"""SGD with momentum, AdamW, and global-norm gradient clipping.

Parameters and gradients are plain numpy arrays; updates happen in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "sgd"  # "sgd" | "adamw"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: list[dict[str, np.ndarray]] = field(default_factory=list)

    @classmethod
    def sgd(cls, lr=1e-3, momentum=0.9, weight_decay=0.0):
        return cls(kind="sgd", lr=lr, momentum=momentum, weight_decay=weight_decay)

    @classmethod
    def adamw(cls, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        return cls(kind="adamw", lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   weight_decay=weight_decay)


def optimizer_step(state: OptimizerState, params: Sequence[np.ndarray],
                   grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
    """Apply one update to ``params`` in place and return them."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to optimizer")
    if not state.buffers:
        state.buffers = [dict() for _ in params]
    state.step_count += 1
    t = state.step_count

    if state.kind == "sgd":
        for p, g, buf in zip(params, grads, state.buffers):
            d = g + state.weight_decay * p if state.weight_decay else g
            if state.momentum:
                v = buf.get("v")
                v = d.copy() if v is None else state.momentum * v + d
                buf["v"] = v
                d = v
            p -= state.lr * d
    elif state.kind == "adamw":
        b1, b2 = state.beta1, state.beta2
        for p, g, buf in zip(params, grads, state.buffers):
            m = buf.get("m", np.zeros_like(p))
            v = buf.get("v", np.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            buf["m"], buf["v"] = m, v
            if state.weight_decay:
                p -= state.lr * state.weight_decay * p
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    else:
        raise ValueError(f"unknown optimizer kind {state.kind!r}")
    return params


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale all gradients together when their joint L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total <= max_norm or total == 0.0:
        return [g for g in grads]
    scale = max_norm / total
    return [g * scale for g in grads]
