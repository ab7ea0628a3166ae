import math
from typing import List, Sequence, Tuple

import torch

from evsign import tensor_core as tc


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor],
              grads: Sequence[torch.Tensor],
              exp_avgs: Sequence[torch.Tensor],
              exp_avg_sqs: Sequence[torch.Tensor],
              steps: Sequence[int],
              lr: float,
              beta1: float = 0.9,
              beta2: float = 0.999,
              eps: float = 1e-8,
              weight_decay: float = 1e-3):
    """
    One classic Adam update, in place.

    Weight decay is L2: ``wd * p`` is added to the gradient before the moments,
    not applied to the parameters directly. ``steps`` are the 1-based step
    counts after this update, used for bias correction.
    """
    for p, g, m, v, step in zip(params, grads, exp_avgs, exp_avg_sqs, steps):
        tc.assert_finite(g, "gradient passed to adam_step")
        if weight_decay != 0:
            g = g.add(p, alpha=weight_decay)
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        bias_correction1 = 1 - beta1 ** step
        bias_correction2_sqrt = math.sqrt(1 - beta2 ** step)
        denom = (v.sqrt() / bias_correction2_sqrt).add_(eps)
        p.addcdiv_(m, denom, value=-lr / bias_correction1)


class Adam(torch.optim.Optimizer):
    """``torch.optim.Optimizer`` front end for :func:`adam_step`."""

    def __init__(self, params, lr=3e-5, betas: Tuple[float, float] = (0.9, 0.999), eps=1e-8, weight_decay=1e-3):
        if lr <= 0:
            raise ValueError(f"Invalid learning rate: {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"Invalid betas: {betas}")
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    def set_lr(self, lr: float):
        for group in self.param_groups:
            group["lr"] = lr

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            params, grads, exp_avgs, exp_avg_sqs, steps = [], [], [], [], []
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state["exp_avg_sq"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                state["step"] += 1
                params.append(p)
                grads.append(p.grad)
                exp_avgs.append(state["exp_avg"])
                exp_avg_sqs.append(state["exp_avg_sq"])
                steps.append(state["step"])
            beta1, beta2 = group["betas"]
            adam_step(params, grads, exp_avgs, exp_avg_sqs, steps, group["lr"],
                      beta1, beta2, group["eps"], group["weight_decay"])
        return loss


def cosine_lr(epoch: float, total_epochs: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total)) / 2."""
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * epoch / total_epochs))
