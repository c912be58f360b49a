"""Central finite-difference checks for autograd gradients."""
from typing import Callable, Optional, Sequence

import numpy as np
import torch


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(fn: Callable[[], torch.Tensor], t: torch.Tensor, index, h: float = 1e-3,
                 stencil: int = 3) -> float:
    """Central difference; ``stencil=5`` uses the fourth-order five-point rule."""
    with torch.no_grad():
        orig = t[index].item()

        def at(x):
            t[index] = x
            return fn().item()

        if stencil == 3:
            d = (at(orig + h) - at(orig - h)) / (2 * h)
        elif stencil == 5:
            d = (-at(orig + 2 * h) + 8 * at(orig + h) - 8 * at(orig - h) + at(orig - 2 * h)) / (12 * h)
        else:
            raise ValueError(f"stencil must be 3 or 5, got {stencil}")
        t[index] = orig
    return d


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], h: float = 1e-3,
                    max_coords: Optional[int] = None, seed: int = 0, stencil: int = 3,
                    floor: float = 1e-8) -> float:
    """Max relative error between autograd and finite differences.

    ``fn`` recomputes a scalar from the (mutable) ``tensors``. With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    probed. ``floor`` bounds the denominator, so gradients below it are
    compared absolutely against ``floor``.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, list(tensors), allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = np.arange(t.numel())
        if max_coords is not None and t.numel() > max_coords:
            flat = rng.choice(flat, size=max_coords, replace=False)
        for i in flat:
            idx = np.unravel_index(int(i), tuple(t.shape))
            num = numeric_grad(fn, t, idx, h, stencil)
            worst = max(worst, relative_error(g[idx].item(), num, floor))
    return worst
