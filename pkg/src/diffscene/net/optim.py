"""AdamW with bias correction and decoupled weight decay."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from diffscene.core.errors import ShapeError
from diffscene.net.model import Params

DEFAULT_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AdamWState:
    """First and second moments (float64) per tensor, plus the step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = DEFAULT_BETAS,
    weight_decay: float = 0.0,
    eps: float = ADAM_EPS,
) -> tuple[Params, AdamWState]:
    """Apply one AdamW update to the tensors named in *grads*.

    Neither *params* nor *state* is modified; new objects are returned.
    Tensors without a gradient entry are carried over untouched.

    Raises:
        ShapeError: If a gradient does not match its tensor's shape.
    """
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    m_new = dict(state.m)
    v_new = dict(state.v)
    updated: dict[str, np.ndarray] = {}
    for name in sorted(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"Gradient for {name} has shape {g.shape}, tensor has {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_new[name], v_new[name] = m, v
        step_size = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p64 = p.astype(np.float64)
        if weight_decay:
            p64 = p64 * (1.0 - lr * weight_decay)
        updated[name] = (p64 - step_size).astype(p.dtype)
    return params.replace(**updated), AdamWState(step=step, m=m_new, v=v_new)
