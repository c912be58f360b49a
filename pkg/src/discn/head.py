"""Comparison head: residual features per stimulus, serial embeddings, serial
attention (or an MLP / GRU / LSTM stand-in), and the two-layer classifier."""
import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import channel_project, he_normal_, softmax

FUSERS = ("SEA", "MLP", "GRU", "LSTM")


@dataclass
class HeadConfig:
    in_channels: int = 3
    image_size: int = 64
    n_stimuli: int = 5
    channels: Tuple[int, ...] = (16, 32, 64)
    d1: int = 128
    d2: int = 64
    d4: int = 32
    fuser: str = "SEA"
    residual: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError("need at least one residual block with positive channels")
        if min(self.d1, self.d2, self.d4, self.n_stimuli) < 1:
            raise ConfigurationError("all head dims must be >= 1")
        if self.fuser not in FUSERS:
            raise ConfigurationError(f"unknown fuser {self.fuser!r}; expected one of {FUSERS}")
        if self.final_side() < 1:
            raise ConfigurationError(
                f"{len(self.channels)} stride-2 blocks collapse a {self.image_size}px map below 1px"
            )

    @property
    def r(self) -> int:
        return len(self.channels)

    @property
    def d3(self) -> int:
        return 2 * self.d2

    def final_side(self) -> int:
        side = self.image_size
        for _ in self.channels:
            side = (side + 1) // 2
        return side

    @property
    def d0(self) -> int:
        return self.channels[-1] * self.final_side() ** 2

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _conv(cin, cout, k=3, stride=1):
    conv = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False)
    he_normal_(conv.weight)
    return conv


def _linear(i, o, bias=True):
    lin = nn.Linear(i, o, bias=bias)
    he_normal_(lin.weight)
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


class ResidualBlock(nn.Module):
    """[conv-BN-ReLU, conv-BN-ReLU, conv-BN] + 1x1-projected skip, then ReLU."""

    def __init__(self, cin, cout, stride=2):
        super().__init__()
        self.body = nn.Sequential(
            _conv(cin, cout, stride=stride), nn.BatchNorm2d(cout), nn.ReLU(),
            _conv(cout, cout), nn.BatchNorm2d(cout), nn.ReLU(),
            _conv(cout, cout), nn.BatchNorm2d(cout),
        )
        self.skip = nn.Parameter(torch.empty(cout, cin, 1, 1))
        he_normal_(self.skip)
        self.stride = stride
        self.use_skip = True

    def forward(self, x):
        y = self.body(x)
        if self.use_skip:
            y = y + channel_project(x, self.skip, stride=self.stride)
        return torch.relu(y)


class PlainBlock(nn.Module):
    """Same depth and channels as :class:`ResidualBlock`, no shortcut."""

    def __init__(self, cin, cout, stride=2):
        super().__init__()
        self.body = nn.Sequential(
            _conv(cin, cout, stride=stride), nn.BatchNorm2d(cout), nn.ReLU(),
            _conv(cout, cout), nn.BatchNorm2d(cout), nn.ReLU(),
            _conv(cout, cout), nn.BatchNorm2d(cout), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


class FeatureTrunk(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        block = ResidualBlock if cfg.residual else PlainBlock
        chans = (cfg.in_channels,) + cfg.channels
        self.blocks = nn.Sequential(*[block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.cfg = cfg

    def forward(self, maps: torch.Tensor) -> torch.Tensor:
        """``... x C x H x W`` maps -> ``... x d0`` flattened features."""
        lead = maps.shape[:-3]
        x = self.blocks(maps.reshape(-1, *maps.shape[-3:]))
        return x.reshape(*lead, -1)


def residual_extract(maps: torch.Tensor, trunk: FeatureTrunk) -> torch.Tensor:
    if not torch.isfinite(maps).all():
        raise ContractError("saliency maps contain non-finite values")
    return trunk(maps)


@dataclass
class SerialFeatures:
    vectors: torch.Tensor
    stream: str


class SerialEmbedding(nn.Module):
    def __init__(self, d0: int, d1: int):
        super().__init__()
        self.proj = _linear(d0, d1, bias=False)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.proj.in_features:
            raise DimensionError(f"serial features of dim {v.shape[-1]}, embedding expects {self.proj.in_features}")
        return self.proj(v)


def embed_serial(v: torch.Tensor, embedding: SerialEmbedding, stream: str) -> SerialFeatures:
    return SerialFeatures(embedding(v), stream)


class SerialAttention(nn.Module):
    """q_j = sigmoid(q_{j-1} . k_j / sqrt(d2)) * v_j over one feature serial."""

    def __init__(self, d1: int, d2: int):
        super().__init__()
        self.key = _linear(d1, d2, bias=False)
        self.value = _linear(d1, d2, bias=False)
        self.q0 = nn.Parameter(torch.empty(d2))
        with torch.no_grad():
            self.q0.normal_(0.0, 1.0)
        self.d2 = d2
        self.last_gates = None

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        """``B x N x d1`` serial -> ``B x d2`` final query."""
        if f.shape[-2] == 0:
            raise ContractError("serial attention needs at least one step")
        k, v = self.key(f), self.value(f)
        q = self.q0.expand(f.shape[0], self.d2)
        gates = []
        for j in range(f.shape[-2]):
            g = torch.sigmoid((q * k[:, j]).sum(-1, keepdim=True) / math.sqrt(self.d2))
            gates.append(g)
            q = g * v[:, j]
        self.last_gates = torch.cat(gates, dim=-1).detach()
        return q


class MLPFuser(nn.Module):
    """Concatenate the N slots of a serial, one linear + ReLU down to d2."""

    def __init__(self, n: int, d1: int, d2: int):
        super().__init__()
        self.n = n
        self.proj = _linear(n * d1, d2)

    def forward(self, f):
        if f.shape[-2] != self.n:
            raise DimensionError(f"MLP fuser built for {self.n} stimuli, got {f.shape[-2]}")
        return torch.relu(self.proj(f.flatten(-2)))


class RecurrentFuser(nn.Module):
    def __init__(self, kind: str, d1: int, d2: int):
        super().__init__()
        cls = {"GRU": nn.GRU, "LSTM": nn.LSTM}[kind]
        self.rnn = cls(d1, d2, batch_first=True)
        self.kind = kind

    def forward(self, f):
        _, h = self.rnn(f)
        if self.kind == "LSTM":
            h = h[0]
        return h[-1]


def make_fuser(kind: str, n: int, d1: int, d2: int) -> nn.Module:
    if kind == "SEA":
        return SerialAttention(d1, d2)
    if kind == "MLP":
        return MLPFuser(n, d1, d2)
    if kind in ("GRU", "LSTM"):
        return RecurrentFuser(kind, d1, d2)
    raise ConfigurationError(f"unknown fuser {kind!r}")


class Classifier(nn.Module):
    def __init__(self, d3: int, d4: int):
        super().__init__()
        self.fc1 = _linear(d3, d4)
        self.fc2 = _linear(d4, 2)

    def logits(self, q):
        return self.fc2(torch.relu(self.fc1(q)))

    def forward(self, q):
        """Probability pair; column 0 is P(AD)."""
        return softmax(self.logits(q), axis=-1)


class ComparisonHead(nn.Module):
    """Shared trunk over both streams, stream-specific embeddings and fusers."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = FeatureTrunk(cfg)
        self.embed_com = SerialEmbedding(cfg.d0, cfg.d1)
        self.embed_sub = SerialEmbedding(cfg.d0, cfg.d1)
        self.fuse_com = make_fuser(cfg.fuser, cfg.n_stimuli, cfg.d1, cfg.d2)
        self.fuse_sub = make_fuser(cfg.fuser, cfg.n_stimuli, cfg.d1, cfg.d2)
        self.classifier = Classifier(cfg.d3, cfg.d4)

    def forward(self, com: torch.Tensor, sub: torch.Tensor, logits: bool = False) -> torch.Tensor:
        """``com``: N x C x H x W shared maps, ``sub``: B x N x C x H x W.

        Returns B x 2 probabilities (pre-softmax scores if ``logits``). Both streams share one trunk pass so that
        batch-norm statistics are computed over the same population.
        """
        B, N = sub.shape[:2]
        if com.shape != sub.shape[1:]:
            raise DimensionError(f"comprehensive maps {tuple(com.shape)} vs subject maps {tuple(sub.shape)}")
        feats = residual_extract(torch.cat([com.unsqueeze(0), sub], dim=0), self.trunk)
        f_com = self.embed_com(feats[:1])
        f_sub = self.embed_sub(feats[1:])
        q_com = self.fuse_com(f_com).expand(B, -1)
        q_sub = self.fuse_sub(f_sub)
        q = torch.cat([q_com, q_sub], dim=-1)
        return self.classifier.logits(q) if logits else self.classifier(q)


def sea_fuse(f_com: SerialFeatures, f_sub: SerialFeatures, sea_com: SerialAttention,
             sea_sub: SerialAttention) -> torch.Tensor:
    if f_com.vectors.shape[-2] != f_sub.vectors.shape[-2]:
        raise DimensionError("comprehensive and subject serials differ in length")
    com = sea_com(f_com.vectors.reshape(-1, *f_com.vectors.shape[-2:]))
    sub = sea_sub(f_sub.vectors.reshape(-1, *f_sub.vectors.shape[-2:]))
    return torch.cat([com, sub], dim=-1).squeeze(0)


def alt_fuse(f_com: SerialFeatures, f_sub: SerialFeatures, fuse_com: nn.Module, fuse_sub: nn.Module):
    if f_com.vectors.shape[-2] != f_sub.vectors.shape[-2]:
        raise DimensionError("comprehensive and subject serials differ in length")
    com = fuse_com(f_com.vectors.reshape(-1, *f_com.vectors.shape[-2:]))
    sub = fuse_sub(f_sub.vectors.reshape(-1, *f_sub.vectors.shape[-2:]))
    return torch.cat([com, sub], dim=-1).squeeze(0)


def classify(q: torch.Tensor, classifier: Classifier) -> torch.Tensor:
    return classifier(q)


BCE_EPS = 1e-7


def bce_from_logits(z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Same loss as :func:`bce_loss` on ``softmax(z)[:, 0]``, without the clamp.

    Saturated probabilities keep a gradient here, which the clamped form loses.
    """
    logp = torch.log_softmax(z, dim=-1)
    t = torch.as_tensor(t, dtype=logp.dtype)
    return -(t * logp[:, 0] + (1 - t) * logp[:, 1]).mean()


def bce_loss(q_hat: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Mean of -[t log q + (1 - t) log(1 - q)], q clamped to [eps, 1 - eps]."""
    q = q_hat.clamp(BCE_EPS, 1 - BCE_EPS)
    t = torch.as_tensor(t, dtype=q.dtype)
    return -(t * torch.log(q) + (1 - t) * torch.log(1 - q)).mean()
