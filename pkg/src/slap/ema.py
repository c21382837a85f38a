"""Exponential-moving-average update of target towers."""

from __future__ import annotations

from dataclasses import dataclass

from slap.errors import StructuralError

DEFAULT_TAU = 0.95


@dataclass
class EmaState:
    tau: float = DEFAULT_TAU
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


def ema_update(target, context, tau):
    """In place: ``target <- tau * target + (1 - tau) * context`` for every entry.

    ``target`` and ``context`` are ``{name: Tensor}`` maps with identical keys
    and shapes.  Arrays are replaced, not mutated, so no tape node or
    stop-gradient alias ever observes a half-updated value.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if set(target) != set(context):
        diff = sorted(set(target) ^ set(context))
        raise StructuralError(f"target/context parameter names differ: {diff[:5]}")
    for name, t in target.items():
        c = context[name]
        if t.shape != c.shape:
            raise StructuralError(f"{name}: target shape {t.shape} != context shape {c.shape}")
    for name, t in target.items():
        c = context[name].data
        # endpoints short-circuit so signed zeros survive bitwise
        if tau == 1.0:
            continue
        t.data = c.copy() if tau == 0.0 else tau * t.data + (1.0 - tau) * c
    return target


def _branch(tower, target):
    params = tower.target_params() if target else tower.context_params()
    buffers = tower.target_buffers() if target else tower.context_buffers()
    keep = ("encoder.", "projector.")
    merged = {**params, **buffers}
    return {k: v for k, v in merged.items() if k.startswith(keep)}


def update_towers(model, state):
    """One EMA step for both modality towers of ``model`` (parameters and
    normalization running statistics alike); bumps ``state.step_count``."""
    for tower in (model.tower_a, model.tower_t):
        ema_update(_branch(tower, True), _branch(tower, False), state.tau)
    state.step_count += 1
    return state
