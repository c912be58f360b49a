"""Salient-attention (SAA) block: image/token conversions, tokens-to-token
hierarchy, cross-modality fusion, reversal T2T decoding and token attention.

Token tensors are ``N x n x d`` with tokens ordered row-major over a square
``grid_side x grid_side`` grid, which is also the order produced by
:func:`discn.tensor.unfold`.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import covers, fold, he_normal_, softmax, unfold, window_count

Split = Tuple[int, int, int]


@dataclass
class SaaConfig:
    image_size: int = 64
    channels: int = 3
    # (k, p, s) for I2T, then for each of the two T2T levels
    schedule: Tuple[Split, Split, Split] = ((4, 0, 4), (3, 1, 2), (3, 1, 2))
    heads: int = 1
    ff_ratio: float = 1.0
    # width of the q/k/v projections; None keeps them full rank (d x d)
    attn_dim: Optional[int] = 32
    use_positional_encoding: bool = True
    # amplitude of the sinusoid; at 1.0 it drowns sparse [0, 1] heatmap tokens
    pos_scale: float = 0.02

    def __post_init__(self):
        self.schedule = tuple(tuple(int(v) for v in split) for split in self.schedule)
        self.validate()

    def validate(self):
        if len(self.schedule) != 3:
            raise ConfigurationError("schedule needs (k, p, s) for I2T and two T2T levels")
        side = self.image_size
        for level, (k, p, s) in enumerate(self.schedule):
            try:
                nxt = window_count(side, k, p, s)
            except DimensionError as exc:
                raise ConfigurationError(f"split {level}: {exc}") from None
            if not covers(side, k, p, s):
                raise ConfigurationError(
                    f"split {level} (k={k}, p={p}, s={s}) leaves pixels of a {side}-grid uncovered"
                )
            side = nxt
        if self.pos_scale < 0:
            raise ConfigurationError("pos_scale must be >= 0")
        if self.heads < 1 or self.ff_ratio <= 0:
            raise ConfigurationError("heads must be >= 1 and ff_ratio > 0")
        for d in self.token_dims():
            w = self.width(d)
            if w % self.heads:
                raise ConfigurationError(f"attention width {w} not divisible by {self.heads} heads")

    def grid_sides(self) -> List[int]:
        sides, side = [], self.image_size
        for k, p, s in self.schedule:
            side = window_count(side, k, p, s)
            sides.append(side)
        return sides

    def token_counts(self) -> List[int]:
        return [g * g for g in self.grid_sides()]

    def token_dims(self) -> List[int]:
        dims, d = [], self.channels
        for k, _, _ in self.schedule:
            d = d * k * k
            dims.append(d)
        return dims

    def width(self, dim: int) -> int:
        return dim if self.attn_dim is None else min(dim, self.attn_dim)

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "schedule": tuple(tuple(s) for s in d["schedule"])})


@dataclass
class TokenSet:
    tokens: torch.Tensor
    level: int
    grid_side: int

    def __post_init__(self):
        if self.tokens.dim() != 3 or self.tokens.shape[1] != self.grid_side ** 2:
            raise DimensionError(
                f"tokens {tuple(self.tokens.shape)} inconsistent with grid side {self.grid_side}"
            )

    def to_map(self) -> torch.Tensor:
        """N x n x d tokens -> N x d x g x g feature map."""
        N, _, d = self.tokens.shape
        return self.tokens.transpose(1, 2).reshape(N, d, self.grid_side, self.grid_side)


def _linear(i, o, bias=True):
    lin = nn.Linear(i, o, bias=bias)
    he_normal_(lin.weight)
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


def sinusoid_encoding(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos * torch.exp(-math.log(10000.0) * idx / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)[:, : d // 2]
    return pe.float()


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward, both with residual adds."""

    def __init__(self, dim: int, width: Optional[int] = None, heads: int = 1, ff_ratio: float = 1.0):
        super().__init__()
        width = dim if width is None else width
        self.dim, self.width, self.heads = dim, width, heads
        self.norm1 = nn.LayerNorm(dim)
        self.q = _linear(dim, width)
        self.k = _linear(dim, width)
        self.v = _linear(dim, width)
        self.proj = _linear(width, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = max(1, int(round(ff_ratio * width)))
        self.ff = nn.Sequential(_linear(dim, hidden), nn.GELU(), _linear(hidden, dim))
        self.last_attention = None

    def attention(self, x):
        N, n, _ = x.shape
        h, hd = self.heads, self.width // self.heads
        q = self.q(x).view(N, n, h, hd).transpose(1, 2)
        k = self.k(x).view(N, n, h, hd).transpose(1, 2)
        attn = softmax((q / math.sqrt(hd)) @ k.transpose(-2, -1), axis=-1)
        return attn

    def forward(self, x):
        if isinstance(x, TokenSet):
            return TokenSet(self.forward(x.tokens), x.level, x.grid_side)
        N, n, _ = x.shape
        h, hd = self.heads, self.width // self.heads
        y = self.norm1(x)
        attn = self.attention(y)
        self.last_attention = attn.detach()
        v = self.v(y).view(N, n, h, hd).transpose(1, 2)
        mixed = (attn @ v).transpose(1, 2).reshape(N, n, self.width)
        x = x + self.proj(mixed)
        return x + self.ff(self.norm2(x))


def _transformer(cfg: SaaConfig, dim: int) -> TransformerLayer:
    return TransformerLayer(dim, cfg.width(dim), cfg.heads, cfg.ff_ratio)


class ImageToTokens(nn.Module):
    def __init__(self, cfg: SaaConfig):
        super().__init__()
        self.cfg = cfg
        self.k, self.p, self.s = cfg.schedule[0]
        n0, d0 = cfg.token_counts()[0], cfg.token_dims()[0]
        self.register_buffer("pos", sinusoid_encoding(n0, d0), persistent=False)

    def forward(self, images: torch.Tensor) -> TokenSet:
        c = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected N x {c.channels} x {c.image_size} x {c.image_size}, got {tuple(images.shape)}"
            )
        t = unfold(images, self.k, self.p, self.s)
        if c.use_positional_encoding:
            t = t + c.pos_scale * self.pos.to(t.dtype)
        return TokenSet(t, 0, c.grid_sides()[0])


class TokensToToken(nn.Module):
    """Transformer -> reshape to a map -> soft split -> transformer."""

    def __init__(self, cfg: SaaConfig, level: int):
        super().__init__()
        dims, sides = cfg.token_dims(), cfg.grid_sides()
        self.level = level
        self.k, self.p, self.s = cfg.schedule[level + 1]
        self.in_side, self.out_side = sides[level], sides[level + 1]
        self.inner = _transformer(cfg, dims[level])
        self.outer = _transformer(cfg, dims[level + 1])

    def forward(self, t: TokenSet) -> TokenSet:
        if t.level != self.level or t.grid_side != self.in_side:
            raise DimensionError(f"T2T level {self.level} got level {t.level} / grid {t.grid_side}")
        x = TokenSet(self.inner(t.tokens), t.level, t.grid_side).to_map()
        high = unfold(x, self.k, self.p, self.s)
        return TokenSet(self.outer(high), self.level + 1, self.out_side)


class CrossModalityTransformer(nn.Module):
    """Each stream queries the other; the two results are stacked along the
    token axis and mixed back to ``n`` tokens by a learned ``n x 2n`` matrix."""

    def __init__(self, n: int, dim: int, width: Optional[int] = None):
        super().__init__()
        width = dim if width is None else width
        self.n, self.dim, self.width = n, dim, width
        self.norm_o, self.norm_d = nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.q_o, self.k_o, self.v_o = _linear(dim, width), _linear(dim, width), _linear(dim, width)
        self.q_d, self.k_d, self.v_d = _linear(dim, width), _linear(dim, width), _linear(dim, width)
        # a low-rank value path needs a way back up to the token dim
        self.out_o = _linear(width, dim) if width != dim else nn.Identity()
        self.out_d = _linear(width, dim) if width != dim else nn.Identity()
        self.mix = nn.Parameter(torch.empty(n, 2 * n))
        he_normal_(self.mix)
        self.last_attention = None

    def forward(self, t_o: TokenSet, t_d: TokenSet) -> TokenSet:
        if t_o.tokens.shape != t_d.tokens.shape or t_o.tokens.shape[1:] != (self.n, self.dim):
            raise DimensionError(
                f"CMT expects two N x {self.n} x {self.dim} token sets, got "
                f"{tuple(t_o.tokens.shape)} and {tuple(t_d.tokens.shape)}"
            )
        xo, xd = self.norm_o(t_o.tokens), self.norm_d(t_d.tokens)
        qo, ko, vo = self.q_o(xo), self.k_o(xo), self.v_o(xo)
        qd, kd, vd = self.q_d(xd), self.k_d(xd), self.v_d(xd)
        scale = math.sqrt(self.width)
        a_o = softmax((qo / scale) @ kd.transpose(1, 2), axis=-1)
        a_d = softmax((qd / scale) @ ko.transpose(1, 2), axis=-1)
        self.last_attention = (a_o.detach(), a_d.detach())
        c_o = self.out_d(a_o @ vd)
        c_d = self.out_o(a_d @ vo)
        stacked = torch.cat([c_o, c_d], dim=1)  # N x 2n x d
        fused = torch.einsum("ij,bjd->bid", self.mix, stacked)
        return TokenSet(fused, t_o.level, t_o.grid_side)


class ReverseTokensToToken(nn.Module):
    """Fold level ``i+1`` tokens back onto the level ``i`` grid, run a
    transformer, then add the skip tokens of the same level."""

    def __init__(self, cfg: SaaConfig, level: int):
        super().__init__()
        dims, sides = cfg.token_dims(), cfg.grid_sides()
        self.level = level
        self.k, self.p, self.s = cfg.schedule[level + 1]
        self.side, self.high_side = sides[level], sides[level + 1]
        self.dim = dims[level]
        self.transformer = _transformer(cfg, dims[level])

    def forward(self, t_high: TokenSet, skip: TokenSet) -> TokenSet:
        if t_high.level != self.level + 1 or t_high.grid_side != self.high_side:
            raise DimensionError(f"reverse T2T to level {self.level} got level {t_high.level}")
        if skip.tokens.shape[1:] != (self.side ** 2, self.dim):
            raise DimensionError(f"skip tokens {tuple(skip.tokens.shape)} do not match level {self.level}")
        fmap = fold(t_high.tokens, self.k, self.p, self.s, self.side, self.side)
        low = TokenSet(fmap.flatten(2).transpose(1, 2), self.level, self.side)
        return TokenSet(self.transformer(low.tokens) + skip.tokens, self.level, self.side)


class TokenAttention(nn.Module):
    """Sigmoid-gated attention of every token against the first (salient) token.

    gate_i = sigmoid(q_i . k_s / sqrt(d)), out_i = gate_i * v_s + t_i, with a
    separate query projection for every token position.
    """

    def __init__(self, n: int, dim: int):
        super().__init__()
        if n < 2:
            raise ContractError(f"token attention needs at least 2 tokens, got {n}")
        self.n, self.dim = n, dim
        self.norm = nn.LayerNorm(dim)
        self.q_s, self.k_s, self.v_s = _linear(dim, dim), _linear(dim, dim), _linear(dim, dim)
        self.q_rest = nn.Parameter(torch.empty(n - 1, dim, dim))
        with torch.no_grad():
            self.q_rest.normal_(0.0, math.sqrt(2.0 / dim))
        self.last_gates = None

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x)
        ts, rest = y[:, :1], y[:, 1:]
        k_s = self.k_s(ts)                                     # N x 1 x d
        q = torch.cat([self.q_s(ts), torch.einsum("bid,ied->bie", rest, self.q_rest)], dim=1)
        return torch.sigmoid((q * k_s).sum(-1, keepdim=True) / math.sqrt(self.dim))

    def forward(self, t: TokenSet) -> TokenSet:
        x = t.tokens
        if x.shape[1] != self.n or x.shape[2] != self.dim:
            raise ContractError(f"token attention expects {self.n} x {self.dim} tokens, got {tuple(x.shape)}")
        g = self.gates(x)
        self.last_gates = g.detach()
        v_s = self.v_s(self.norm(x[:, :1]))
        return TokenSet(g * v_s + x, t.level, t.grid_side)


class SAA(nn.Module):
    """Fuse two image stacks of identical shape into one saliency stack.

    Stream ``a`` provides the decoder skips; stream ``b`` enters only through
    the cross-modality transformer. The output is squashed to (0, 1).
    """

    def __init__(self, cfg: SaaConfig):
        super().__init__()
        self.cfg = cfg
        n, d = cfg.token_counts(), cfg.token_dims()
        self.i2t = ImageToTokens(cfg)
        self.t2t_a = nn.ModuleList([TokensToToken(cfg, 0), TokensToToken(cfg, 1)])
        self.t2t_b = nn.ModuleList([TokensToToken(cfg, 0), TokensToToken(cfg, 1)])
        self.cmt = CrossModalityTransformer(n[2], d[2], cfg.width(d[2]))
        self.decode = nn.ModuleList([ReverseTokensToToken(cfg, 1), ReverseTokensToToken(cfg, 0)])
        self.ta = TokenAttention(n[0], d[0])

    def encode(self, images, stack):
        t0 = self.i2t(images)
        t1 = stack[0](t0)
        return t0, t1, stack[1](t1)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"SAA inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        a0, a1, a2 = self.encode(a, self.t2t_a)
        _, _, b2 = self.encode(b, self.t2t_b)
        t = self.cmt(a2, b2)
        t = self.decode[0](t, a1)
        t = self.decode[1](t, a0)
        t = self.ta(t)
        k, p, s = self.cfg.schedule[0]
        # saliency maps live in image range so the output can be fed back in
        return torch.sigmoid(fold(t.tokens, k, p, s, self.cfg.image_size, self.cfg.image_size))


# functional surface ---------------------------------------------------------

def image_to_tokens(images: torch.Tensor, cfg: SaaConfig) -> TokenSet:
    return ImageToTokens(cfg)(images)


def saa_forward(a: torch.Tensor, b: torch.Tensor, weights: SAA) -> torch.Tensor:
    return weights(a, b)
