"""Central/local optimizers and learning-rate schedules.

The local optimizer in the simulation loop is plain SGD (applied inline by
the engine); this module provides the central optimizer family (SGD, Adam,
AdaGrad, LARS, LAMB) plus the constant / exponential-decay / step-decay
schedules. ``apply`` is a pure function: it returns fresh parameter and
state trees and never mutates its inputs.

LARS and LAMB rescale each layer's update by the trust ratio
||theta_layer|| / ||update_layer||; a zero numerator or denominator pins the
ratio to 1 so freshly zero-initialized layers do not divide by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigError
from .param_tree import ParamTree, zeros_like


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    EXPONENTIAL_DECAY = "exponential_decay"
    STEP_DECAY = "step_decay"


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    kind: ScheduleKind = ScheduleKind.CONSTANT
    decay_start: int = 0
    decay_rate: float = 1.0
    transition_steps: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("schedule base_lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError("schedule decay_rate must be in (0, 1]")
        if self.transition_steps < 1:
            raise ConfigError("schedule transition_steps must be >= 1")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at a step index (constant before decay_start)."""
    if step < 0:
        raise ValueError("step index must be >= 0")
    if schedule.kind == ScheduleKind.CONSTANT or step < schedule.decay_start:
        return schedule.base_lr
    progress = (step - schedule.decay_start) / schedule.transition_steps
    if schedule.kind == ScheduleKind.STEP_DECAY:
        progress = float(np.floor(progress))
    return schedule.base_lr * schedule.decay_rate**progress


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"
    ADAGRAD = "adagrad"
    LARS = "lars"
    LAMB = "lamb"


@dataclass(frozen=True)
class OptimizerHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    momentum: float = 0.0
    weight_decay: float = 0.0
    trust_clip: float = 0.0  # 0 disables clipping of the trust ratio


@dataclass(frozen=True)
class OptimizerState:
    kind: OptimizerKind
    hyper: OptimizerHyper
    step_count: int
    first_moment: ParamTree
    second_moment: ParamTree


def init_state(
    kind: OptimizerKind, template: ParamTree, hyper: OptimizerHyper = OptimizerHyper()
) -> OptimizerState:
    zero = zeros_like(template)
    return OptimizerState(kind, hyper, 0, zero, zero)


def _trust_ratio(param_norm: float, update_norm: float, clip: float) -> float:
    if param_norm == 0.0 or update_norm == 0.0:
        return 1.0
    ratio = param_norm / update_norm
    if clip > 0.0:
        ratio = min(ratio, clip)
    return ratio


def apply(
    state: OptimizerState, params: ParamTree, grad: ParamTree, lr: float
) -> tuple[ParamTree, OptimizerState]:
    """One optimizer step; returns (new params, new state)."""
    params.require_congruent(grad)
    params.require_congruent(state.first_moment)
    h = state.hyper
    t = state.step_count + 1
    new_params: list[np.ndarray] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []

    for (name, p), g, m, v in zip(
        params.items(), grad.arrays(), state.first_moment.arrays(),
        state.second_moment.arrays(),
    ):
        if state.kind == OptimizerKind.SGD:
            if h.momentum > 0.0:
                m = h.momentum * m + g
                step = m
            else:
                step = g
            new_params.append(p - lr * step)
        elif state.kind == OptimizerKind.ADAGRAD:
            v = v + g * g
            new_params.append(p - lr * g / (np.sqrt(v) + h.epsilon))
        elif state.kind == OptimizerKind.ADAM:
            m = h.beta1 * m + (1.0 - h.beta1) * g
            v = h.beta2 * v + (1.0 - h.beta2) * g * g
            mhat = m / (1.0 - h.beta1**t)
            vhat = v / (1.0 - h.beta2**t)
            new_params.append(p - lr * mhat / (np.sqrt(vhat) + h.epsilon))
        elif state.kind == OptimizerKind.LARS:
            direction = g + h.weight_decay * p if h.weight_decay > 0.0 else g
            ratio = _trust_ratio(
                float(np.linalg.norm(p)), float(np.linalg.norm(direction)),
                h.trust_clip,
            )
            if h.momentum > 0.0:
                m = h.momentum * m + ratio * direction
                step = m
            else:
                step = ratio * direction
            new_params.append(p - lr * step)
        elif state.kind == OptimizerKind.LAMB:
            m = h.beta1 * m + (1.0 - h.beta1) * g
            v = h.beta2 * v + (1.0 - h.beta2) * g * g
            mhat = m / (1.0 - h.beta1**t)
            vhat = v / (1.0 - h.beta2**t)
            direction = mhat / (np.sqrt(vhat) + h.epsilon)
            if h.weight_decay > 0.0:
                direction = direction + h.weight_decay * p
            ratio = _trust_ratio(
                float(np.linalg.norm(p)), float(np.linalg.norm(direction)),
                h.trust_clip,
            )
            new_params.append(p - lr * ratio * direction)
        else:  # pragma: no cover - enum is exhaustive
            raise ConfigError(f"unknown optimizer kind {state.kind!r}")
        new_m.append(m)
        new_v.append(v)

    next_state = replace(
        state,
        step_count=t,
        first_moment=params.replace(new_m),
        second_moment=params.replace(new_v),
    )
    return params.replace(new_params), next_state
