"""Differentiable primitives used by every block of the network.

Tensors are plain ``torch.Tensor`` objects; the functions here pin down the
shape contracts (and the error raised when they are violated) so the model
code never relies on torch's broadcasting to hide a wiring mistake.
"""
import math
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError


def window_count(size: int, k: int, p: int, s: int) -> int:
    """Number of k-windows along one axis of length ``size``."""
    if k < 1 or s < 1 or p < 0:
        raise DimensionError(f"invalid window k={k}, p={p}, s={s}")
    if size + 2 * p < k:
        raise DimensionError(f"window {k} larger than padded extent {size}+2*{p}")
    return (size + 2 * p - k) // s + 1


def covers(size: int, k: int, p: int, s: int) -> bool:
    """True when every original pixel lies inside at least one window."""
    n = window_count(size, k, p, s)
    hit = [False] * size
    for w in range(n):
        for i in range(max(0, w * s - p), min(size, w * s - p + k)):
            hit[i] = True
    return all(hit)


def unfold(image: torch.Tensor, k: int, p: int, s: int) -> torch.Tensor:
    """Split an image into flattened k x k windows.

    ``image`` is ``C x H x W`` or ``N x C x H x W``; the result is
    ``n x C*k*k`` (resp. ``N x n x C*k*k``) with windows in row-major order
    and each window flattened channel-first.
    """
    batched = image.dim() == 4
    if image.dim() not in (3, 4):
        raise DimensionError(f"unfold expects CxHxW or NxCxHxW, got {tuple(image.shape)}")
    x = image if batched else image.unsqueeze(0)
    window_count(x.shape[-2], k, p, s)
    window_count(x.shape[-1], k, p, s)
    cols = F.unfold(x, kernel_size=k, padding=p, stride=s)  # N x Ck^2 x n
    tokens = cols.transpose(1, 2)
    return tokens if batched else tokens[0]


def fold(tokens: torch.Tensor, k: int, p: int, s: int, H: int, W: int) -> torch.Tensor:
    """Count-normalised inverse of :func:`unfold`.

    Overlapping window contributions are summed and divided by the number of
    windows covering each pixel, so ``fold(unfold(x)) == x`` whenever every
    pixel is covered.
    """
    batched = tokens.dim() == 3
    if tokens.dim() not in (2, 3):
        raise DimensionError(f"fold expects n x d or N x n x d tokens, got {tuple(tokens.shape)}")
    t = tokens if batched else tokens.unsqueeze(0)
    n_expected = window_count(H, k, p, s) * window_count(W, k, p, s)
    if t.shape[1] != n_expected:
        raise DimensionError(
            f"token count {t.shape[1]} does not match {n_expected} windows on a {H}x{W} grid "
            f"(k={k}, p={p}, s={s})"
        )
    if t.shape[2] % (k * k):
        raise DimensionError(f"token dim {t.shape[2]} not divisible by k*k={k * k}")
    cols = t.transpose(1, 2)
    summed = F.fold(cols, output_size=(H, W), kernel_size=k, padding=p, stride=s)
    ones = torch.ones(1, k * k, n_expected, dtype=t.dtype, device=t.device)
    count = F.fold(ones, output_size=(H, W), kernel_size=k, padding=p, stride=s)
    out = summed / count.clamp(min=1.0)
    return out if batched else out[0]


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    return torch.softmax(x, dim=axis)   # max-subtracted internally


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}")
    return F.linear(x, weight, bias)


def concat(tensors: Sequence[torch.Tensor], axis: int = 0) -> torch.Tensor:
    shapes = [list(t.shape) for t in tensors]
    ref = shapes[0]
    for sh in shapes[1:]:
        if len(sh) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(sh, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat along {axis}: incompatible shapes {shapes}")
    return torch.cat(list(tensors), dim=axis)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def channel_project(x: torch.Tensor, weight: torch.Tensor, stride: int = 1) -> torch.Tensor:
    """1x1 convolution used to lift a skip branch to a new channel count."""
    if weight.shape[-2:] != (1, 1):
        raise DimensionError(f"channel projection needs a 1x1 kernel, got {tuple(weight.shape)}")
    return conv2d(x, weight, stride=stride)


def he_normal_(w: torch.Tensor) -> torch.Tensor:
    """He-normal init, std = sqrt(2 / fan_in); fan_in is every dim but the first."""
    fan_in = math.prod(w.shape[1:]) if w.dim() > 1 else w.shape[0]
    with torch.no_grad():
        return w.normal_(0.0, math.sqrt(2.0 / fan_in))


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> None:
    """Backpropagate a scalar loss; parameters it cannot reach get zero grads."""
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
