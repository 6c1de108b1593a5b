# -*- coding: UTF-8 -*-

from dataclasses import dataclass
from typing import Tuple

import torch

from utils.exceptions import ContractError, ValidationError


@dataclass
class AdamWState:
    step: int
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor

    @classmethod
    def zeros_like(cls, param: torch.Tensor) -> "AdamWState":
        return cls(0, torch.zeros_like(param), torch.zeros_like(param))


def adamw_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    state: AdamWState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> Tuple[torch.Tensor, AdamWState]:
    """
    One AdamW update with decoupled weight decay and bias correction.
    Pure: returns new tensors and leaves its inputs untouched.
    """
    if grad.shape != param.shape or state.exp_avg.shape != param.shape:
        raise ContractError(
            "adamw_step: param {}, grad {} and state {} shapes differ".format(
                tuple(param.shape), tuple(grad.shape), tuple(state.exp_avg.shape)
            )
        )
    beta1, beta2 = betas
    step = state.step + 1
    param = param * (1.0 - lr * weight_decay)
    exp_avg = state.exp_avg * beta1 + grad * (1.0 - beta1)
    exp_avg_sq = state.exp_avg_sq * beta2 + grad * grad * (1.0 - beta2)

    bias_correction1 = 1.0 - beta1 ** step
    bias_correction2 = 1.0 - beta2 ** step
    denom = exp_avg_sq.sqrt() / (bias_correction2 ** 0.5) + eps
    param = param - (lr / bias_correction1) * exp_avg / denom
    return param, AdamWState(step, exp_avg, exp_avg_sq)


class AdamW(torch.optim.Optimizer):
    """
    AdamW optimizer whose update is ``adamw_step``.

    Args:
        params: Iterable of parameters to optimize or dicts defining parameter groups.
        lr: Learning rate.
        betas: Coefficients used for computing running averages of gradient and its square.
        eps: Term added to the denominator to improve numerical stability.
        weight_decay: Decoupled weight decay coefficient.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr <= 0:
            raise ValidationError("Invalid learning rate: {}".format(lr))
        if not 0.0 < betas[0] < 1.0 or not 0.0 < betas[1] < 1.0:
            raise ValidationError("Invalid betas: {}".format(betas))
        if eps <= 0:
            raise ValidationError("Invalid epsilon value: {}".format(eps))
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super(AdamW, self).__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                current = AdamWState(state["step"], state["exp_avg"], state["exp_avg_sq"])
                new_p, updated = adamw_step(
                    p, p.grad, current, group["lr"], tuple(group["betas"]),
                    group["eps"], group["weight_decay"],
                )
                p.copy_(new_p)
                state["step"] = updated.step
                state["exp_avg"] = updated.exp_avg
                state["exp_avg_sq"] = updated.exp_avg_sq
        return loss

    def set_lr(self, lr: float):
        for group in self.param_groups:
            group["lr"] = lr
