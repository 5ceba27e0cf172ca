from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MODES = ("gd", "adam", "adamw")


@dataclass(frozen=True)
class OptimizerConfig:
    mode: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown optimizer mode {self.mode!r}; expected one of {MODES}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_update(
    state: OptimizerState | None,
    params: list[np.ndarray],
    grads: list[np.ndarray],
    config: OptimizerConfig,
) -> tuple[OptimizerState, list[np.ndarray]]:
    """One step of GD / Adam / AdamW.  Returns new state and new parameter arrays.

    ``gd`` is state-free: ``p - lr * g``. ``adam`` folds weight decay into the
    gradient, ``adamw`` applies it decoupled from the moment estimates.
    """
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"param {i}: shape {np.shape(p)} but grad shape {np.shape(g)}")
    state = state if state is not None else OptimizerState()
    lr = config.lr

    if config.mode == "gd":
        return state, [p - lr * g for p, g in zip(params, grads)]

    if state.step == 0 or not state.m:
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
    else:
        if len(state.m) != len(params) or any(a.shape != np.shape(p) for a, p in zip(state.m, params)):
            raise ValueError("optimizer state does not match parameter shapes")
        m, v = state.m, state.v
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_params, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if config.mode == "adam" and config.weight_decay:
            g = g + config.weight_decay * p
        mi = b1 * mi + (1.0 - b1) * g
        vi = b2 * vi + (1.0 - b2) * g * g
        update = (mi / bc1) / (np.sqrt(vi / bc2) + config.eps)
        if config.mode == "adamw" and config.weight_decay:
            p = p * (1.0 - lr * config.weight_decay)
        new_params.append(p - lr * update)
        new_m.append(mi)
        new_v.append(vi)
    return OptimizerState(step, new_m, new_v), new_params
