"""Desk-scale networks: the stylizer components and the task classifier."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Tuple

import torch
from torch import nn

from . import numcore as nc
from .errors import ContractError, InvalidShapeError


@dataclass(frozen=True)
class NetConfig:
    channels: int = 64       # encoder output channels C
    latent_dim: int = 16     # style latent d
    n_classes: int = 10      # K
    feat_dim: int = 128      # penultimate width F
    side: int = 32           # input side length
    vae_hidden: int = 64
    task_width: int = 32

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ContractError(f"NetConfig.{key} must be a positive integer, got {value!r}")
        if self.side % 4:
            raise ContractError(f"side must be divisible by 4, got {self.side}")
        if self.channels % 4:
            raise ContractError(f"channels must be divisible by 4, got {self.channels}")

    @property
    def code_dim(self) -> int:
        return 2 * self.channels


@dataclass
class StylePosterior:
    """Diagonal Gaussian over style latents; ``xi`` is a standard deviation."""

    psi: torch.Tensor
    xi: torch.Tensor

    def __post_init__(self):
        if self.psi.shape != self.xi.shape:
            raise InvalidShapeError("psi and xi must have the same shape")


# ---------------------------------------------------------------------------
# layers


class Conv(nn.Module):
    def __init__(self, c_in, c_out, k=3, stride=1, gen=None):
        super().__init__()
        fan_in = c_in * k * k
        self.weight = nn.Parameter(
            torch.randn(c_out, c_in, k, k, generator=gen) * math.sqrt(2.0 / fan_in))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x):
        return nc.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(nn.Module):
    def __init__(self, n_in, n_out, gen=None):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = nn.Parameter((torch.rand(n_out, n_in, generator=gen) * 2 - 1) * bound)
        self.bias = nn.Parameter(torch.zeros(n_out))

    def forward(self, x):
        return nc.fully_connected(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# stylizer components


class Encoder(nn.Module):
    """Two stride-2 stages: ``(3, S, S) -> (C/2, S/2, S/2) -> (C, S/4, S/4)``."""

    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        h = cfg.channels // 2
        self.side = cfg.side
        self.conv1 = Conv(3, h, gen=gen)
        self.conv2 = Conv(h, h, stride=2, gen=gen)
        self.conv3 = Conv(h, cfg.channels, gen=gen)
        self.conv4 = Conv(cfg.channels, cfg.channels, stride=2, gen=gen)
        # fixed output scale, calibrated once before stylizer training
        self.register_buffer("gain", torch.ones(()))

    def stages(self, x) -> List[torch.Tensor]:
        _check_image(x, self.side)
        s1 = nc.relu(self.conv2(nc.relu(self.conv1(x))))
        s2 = nc.relu(self.conv4(nc.relu(self.conv3(s1))))
        return [self.gain * s1, self.gain * s2]

    def forward(self, x):
        return self.stages(x)[-1]


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        c = cfg.channels
        self.channels = c
        self.conv1 = Conv(c, c // 2, gen=gen)
        self.conv2 = Conv(c // 2, c // 2, gen=gen)
        self.conv3 = Conv(c // 2, c // 4, gen=gen)
        self.conv4 = Conv(c // 4, 3, gen=gen)

    def forward(self, f):
        if f.dim() != 4 or f.shape[1] != self.channels:
            raise InvalidShapeError(
                f"decoder expects (B, {self.channels}, h, w), got {tuple(f.shape)}")
        h = nc.upsample_nearest(nc.relu(self.conv1(f)))
        h = nc.upsample_nearest(nc.relu(self.conv2(h)))
        h = nc.relu(self.conv3(h))
        return torch.sigmoid(self.conv4(h))


class VAEEncoder(nn.Module):
    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.fc = Dense(cfg.code_dim, cfg.vae_hidden, gen=gen)
        self.psi = Dense(cfg.vae_hidden, cfg.latent_dim, gen=gen)
        self.log_xi = Dense(cfg.vae_hidden, cfg.latent_dim, gen=gen)

    def forward(self, code):
        h = nc.relu(self.fc(code))
        # clamped so xi stays strictly positive and finite in float32
        log_xi = self.log_xi(h)
        nc._note_kink((log_xi > -20.0) & (log_xi < 10.0))
        return self.psi(h), torch.exp(log_xi.clamp(-20.0, 10.0))


class VAEDecoder(nn.Module):
    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.fc1 = Dense(cfg.latent_dim, cfg.vae_hidden, gen=gen)
        self.fc2 = Dense(cfg.vae_hidden, cfg.code_dim, gen=gen)

    def forward(self, eps):
        return self.fc2(nc.relu(self.fc1(eps)))


class Generator(nn.Module):
    """Encoder, decoder and style VAE bundled as one stylizer."""

    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg, gen)
        self.decoder = Decoder(cfg, gen)
        self.vae_encoder = VAEEncoder(cfg, gen)
        self.vae_decoder = VAEDecoder(cfg, gen)
        self.trained = False

    def mark_trained(self) -> "Generator":
        self.trained = True
        return self

    def require_trained(self) -> None:
        if not self.trained:
            raise ContractError("generator has not been trained")


# ---------------------------------------------------------------------------
# task model


class TaskModel(nn.Module):
    """Conv trunk, a penultimate feature layer ``z`` and a linear head."""

    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        w = cfg.task_width
        self.cfg = cfg
        self.conv1 = Conv(3, w, gen=gen)
        self.conv2 = Conv(w, w, stride=2, gen=gen)
        self.conv3 = Conv(w, 2 * w, gen=gen)
        self.conv4 = Conv(2 * w, 2 * w, stride=2, gen=gen)
        self.fc = Dense(2 * w * (cfg.side // 4) ** 2, cfg.feat_dim, gen=gen)
        self.head = Dense(cfg.feat_dim, cfg.n_classes, gen=gen)

    def forward(self, x) -> Tuple[torch.Tensor, torch.Tensor]:
        _check_image(x, self.cfg.side)
        h = nc.relu(self.conv2(nc.relu(self.conv1(x))))
        h = nc.relu(self.conv4(nc.relu(self.conv3(h))))
        z = nc.relu(self.fc(h.flatten(1)))
        return self.head(z), z


class SourceClassifier(nn.Module):
    """Encoder trunk with a linear head; trained on source labels to give E."""

    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.encoder = Encoder(cfg, gen)
        self.head = Dense(cfg.channels * (cfg.side // 4) ** 2, cfg.n_classes, gen=gen)

    def forward(self, x):
        return self.head(self.encoder(x).flatten(1))


def _check_image(x, side):
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != side or x.shape[3] != side:
        raise InvalidShapeError(f"expected images (B, 3, {side}, {side}), got {tuple(x.shape)}")


def _seeded(seed):
    if seed is None:
        raise ContractError("an integer seed is required")
    return torch.Generator().manual_seed(int(seed))


def build_generator(cfg: NetConfig, seed: int, dtype=torch.float32) -> Generator:
    return Generator(cfg, _seeded(seed)).to(dtype)


def build_task_model(cfg: NetConfig, seed: int, dtype=torch.float32) -> TaskModel:
    return TaskModel(cfg, _seeded(seed)).to(dtype)


def build_source_classifier(cfg: NetConfig, seed: int, dtype=torch.float32) -> SourceClassifier:
    return SourceClassifier(cfg, _seeded(seed)).to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# functional surface


def encode(G: Generator, x):
    return G.encoder(x)


def decode(G: Generator, f):
    return G.decoder(f)


def vae_encode(G: Generator, code) -> StylePosterior:
    if code.dim() != 2 or code.shape[1] != G.cfg.code_dim:
        raise InvalidShapeError(f"style code must be (B, {G.cfg.code_dim}), got {tuple(code.shape)}")
    psi, xi = G.vae_encoder(code)
    return StylePosterior(psi, xi)


def vae_decode(G: Generator, eps):
    if eps.dim() != 2 or eps.shape[1] != G.cfg.latent_dim:
        raise InvalidShapeError(f"latent must be (B, {G.cfg.latent_dim}), got {tuple(eps.shape)}")
    return G.vae_decoder(eps)


def task_forward(M: TaskModel, x):
    return M(x)
