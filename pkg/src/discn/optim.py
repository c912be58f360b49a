from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import torch


@dataclass
class Parameter:
    """A named trainable tensor together with its momentum buffer."""
    name: str
    tensor: torch.Tensor
    velocity: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = torch.zeros_like(self.tensor)
        if self.velocity.shape != self.tensor.shape:
            raise ValueError(f"velocity shape {tuple(self.velocity.shape)} != {tuple(self.tensor.shape)}")


def sgd_step(params, grads, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """v <- momentum*v + (grad + weight_decay*w);  w <- w - lr*v."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p.tensor)
            p.velocity.mul_(momentum).add_(g + weight_decay * p.tensor)
            p.tensor.sub_(lr * p.velocity)


class MomentumSGD:
    def __init__(self, named_params: Iterable[Tuple[str, torch.Tensor]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [Parameter(name, t) for name, t in named_params]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self):
        sgd_step(self.params, [p.tensor.grad for p in self.params],
                 self.lr, self.momentum, self.weight_decay)

    def velocities(self) -> Dict[str, torch.Tensor]:
        return {p.name: p.velocity for p in self.params}
