# -*- coding: utf-8 -*-
'''
Optimizer submodule: grouped AdamW with decoupled weight decay and global-norm
gradient clipping.
'''

import logging
from dataclasses import dataclass, field
import numpy as np
from .tensor import TensorNode
from .exceptions import NonFiniteGradientError

__all__ = ["ParamGroup", "AdamWState", "AdamW", "adamw_step", "global_grad_norm", "clip_global_norm"]


@dataclass
class ParamGroup:
    '''
    Named parameters sharing optimizer hyperparameters.

    Attributes:
        name (str): group name ("base" or "router")
        params (dict[str, TensorNode]): parameters by qualified name
        lr (float): learning rate used by the next step
        weight_decay (float): decoupled weight decay coefficient
        betas (tuple[float, float]): moment decay rates
        eps (float): denominator regularizer
    '''
    name: str
    params: dict
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8


@dataclass
class AdamWState:
    '''
    Moment estimates keyed by parameter name, and the number of completed steps.
    '''
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(groups:'list[ParamGroup]', state:AdamWState) -> None:
    '''
    Apply one AdamW update to every parameter holding a gradient.

    The whole step is rejected before any parameter moves if a gradient holds a
    NaN or an infinity.

    Args:
        groups (list[ParamGroup]): parameter groups with their hyperparameters
        state (AdamWState): moments and step counter, updated in place

    Raises:
        NonFiniteGradientError: if a gradient is not finite.
    '''
    bad = [name for group in groups for name, p in group.params.items()
           if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        logging.warning("Rejected optimizer step %d: non-finite gradients in %s", state.step, ", ".join(bad))
        raise NonFiniteGradientError("Non-finite gradient in {}.".format(", ".join(bad)))

    t = state.step + 1
    for group in groups:
        beta1, beta2 = group.betas
        correction1 = 1.0 - beta1 ** t
        correction2 = 1.0 - beta2 ** t
        for name, p in group.params.items():
            if p.grad is None:
                continue
            if name not in state.m:
                state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
            m = state.m[name]
            v = state.v[name]
            m *= beta1
            m += (1.0 - beta1) * p.grad
            v *= beta2
            v += (1.0 - beta2) * p.grad * p.grad
            if group.weight_decay:
                p.data -= (group.lr * group.weight_decay) * p.data
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= (group.lr * m_hat / (np.sqrt(v_hat) + group.eps)).astype(p.dtype)
    state.step = t


class AdamW(object):
    '''
    AdamW optimizer over named parameter groups.

    Attributes:
        groups (list[ParamGroup]): parameter groups
        state (AdamWState): optimizer state
    '''

    def __init__(self, groups:'list[ParamGroup]', state:AdamWState|None=None):
        '''
        Constructor.

        Args:
            groups (list[ParamGroup]): disjoint parameter groups
            state (AdamWState or None): state to resume from

        Raises:
            ValueError: if a parameter appears in two groups.
        '''
        seen = set()
        for group in groups:
            for name in group.params:
                if name in seen:
                    raise ValueError("Parameter '{}' belongs to more than one group.".format(name))
                seen.add(name)
        self.groups = list(groups)
        self.state = state if state is not None else AdamWState()

    def get_group(self, name:str) -> ParamGroup:
        for group in self.groups:
            if group.name == name:
                return group
        raise KeyError(name)

    def parameters(self) -> 'list[TensorNode]':
        return [p for group in self.groups for p in group.params.values()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        adamw_step(self.groups, self.state)


def global_grad_norm(params) -> float:
    '''
    L2 norm of all gradients taken together.

    Args:
        params (iterable[TensorNode]): parameters; those without gradient are skipped

    Returns:
        float: global norm
    '''
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm:float) -> float:
    '''
    Rescale gradients so that their global L2 norm does not exceed max_norm.

    Args:
        params (iterable[TensorNode]): parameters holding gradients
        max_norm (float): maximum allowed norm

    Returns:
        float: applied scale factor (1.0 when no clipping happened)

    Raises:
        ValueError: if max_norm is not strictly positive.
    '''
    if max_norm <= 0:
        raise ValueError("Maximum norm must be strictly positive.")
    params = list(params)
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = (p.grad * factor).astype(p.grad.dtype)
    return factor
