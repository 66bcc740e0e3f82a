"""Adam parameter updates.

One documented update rule used by every trainable model in the package:

    m_t = b1*m_{t-1} + (1-b1)*g        mhat = m_t / (1 - b1^t)
    v_t = b2*v_{t-1} + (1-b2)*g^2      vhat = v_t / (1 - b2^t)
    p_t = p_{t-1} - lr * mhat / (sqrt(vhat) + eps)

Defaults: lr=1e-3, b1=0.9, b2=0.999, eps=1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capsanom.errors import TrainingError
from capsanom.tensor import Tensor


@dataclass
class AdamHyperParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def sgd_adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    hyper: AdamHyperParams,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam step over a parameter list; pure and deterministic.

    Raises:
        TrainingError: If any gradient entry is non-finite.
    """
    if len(params) != len(grads):
        raise TrainingError(
            f"adam: {len(params)} params but {len(grads)} gradients"
        )
    if not state.m:
        state = AdamState(
            step=state.step,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )
    t = state.step + 1
    new_params: list[np.ndarray] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise TrainingError(
                f"adam: param {i} shape {p.shape} != gradient shape {g.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"adam: non-finite gradient for param {i}")
        m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * (g * g)
        mhat = m / (1.0 - hyper.beta1**t)
        vhat = v / (1.0 - hyper.beta2**t)
        new_params.append(p - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Stateful wrapper that applies :func:`sgd_adam_step` to tensors in place."""

    def __init__(self, params: list[Tensor], hyper: AdamHyperParams | None = None):
        self.params = list(params)
        self.hyper = hyper or AdamHyperParams()
        self.state = AdamState()

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise TrainingError(f"adam: parameter {p.name!r} has no gradient")
            grads.append(p.grad)
        updated, self.state = sgd_adam_step(
            [p.data for p in self.params], grads, self.state, self.hyper
        )
        for p, new in zip(self.params, updated):
            p.data = new

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
