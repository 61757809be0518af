"""Encoder / decoder networks and checkpoint persistence.

The encoder maps an image to a Gaussian posterior (mean ``mu`` and diagonal
variances ``lam``); the decoder is a single dense layer giving class logits.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, Rng

OBJECTIVES = ("softmax", "dvib", "dvsp")


@dataclass
class ConvSpec:
    """One conv layer: ``filters`` of ``kernel``x``kernel``, ``stride``, ``padding``.

    ``pool`` appends a 2x2 max-pool.  ``residual_units`` appends that many
    shortcut blocks of two same-width 3x3 convs each (shortcut every two layers).
    """

    filters: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = False
    residual_units: int = 0


@dataclass
class ArchitectureConfig:
    input_shape: tuple[int, ...] = (1, 28, 28)
    conv: list[ConvSpec] = field(
        default_factory=lambda: [ConvSpec(16, 3, 1, 1, pool=True), ConvSpec(32, 3, 1, 1, pool=True)]
    )
    dense: list[int] = field(default_factory=lambda: [128])
    latent_dim: int = 16
    num_classes: int = 10
    prelu_init: float = 0.25

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.conv = [c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv]
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def mlp_config(input_dim: int, hidden=(16,), latent_dim: int = 2, num_classes: int = 2) -> ArchitectureConfig:
    return ArchitectureConfig(
        input_shape=(input_dim,), conv=[], dense=list(hidden), latent_dim=latent_dim, num_classes=num_classes
    )


class ResidualUnit(nn.Module):
    def __init__(self, width: int, a: float):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, 1, 1)
        self.act1 = nn.PReLU(width, init=a)
        self.conv2 = nn.Conv2d(width, width, 3, 1, 1)
        self.act2 = nn.PReLU(width, init=a)

    def forward(self, x):
        return x + self.act2(self.conv2(self.act1(self.conv1(x))))


class Network(nn.Module):
    """Encoder trunk + mean / raw-variance heads, and a linear decoder."""

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        layers: list[nn.Module] = []
        channels = arch.input_shape[0]
        for spec in arch.conv:
            layers += [nn.Conv2d(channels, spec.filters, spec.kernel, spec.stride, spec.padding),
                       nn.PReLU(spec.filters, init=arch.prelu_init)]
            channels = spec.filters
            layers += [ResidualUnit(channels, arch.prelu_init) for _ in range(spec.residual_units)]
            if spec.pool:
                layers.append(nn.MaxPool2d(2))
        layers.append(nn.Flatten())
        self.trunk = nn.Sequential(*layers)
        with torch.no_grad():
            width = self.trunk(torch.zeros(1, *arch.input_shape, dtype=DTYPE)).shape[1]
        dense: list[nn.Module] = []
        for units in arch.dense:
            dense += [nn.Linear(width, units), nn.PReLU(units, init=arch.prelu_init)]
            width = units
        self.dense = nn.Sequential(*dense)
        self.mu_head = nn.Linear(width, arch.latent_dim)
        self.var_head = nn.Linear(width, arch.latent_dim)
        self.decoder = nn.Linear(arch.latent_dim, arch.num_classes)
        self.to(DTYPE)

    def init_weights(self, rng: Rng):
        # He fan-in scaling, zero biases
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(mod.weight, nonlinearity="relu", generator=rng.generator)
                nn.init.zeros_(mod.bias)
        return self

    def check_input(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != self.arch.input_shape:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match {self.arch.input_shape}")

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched ``(mu, lam)``; ``lam`` is softplus of the variance head, so > 0."""
        self.check_input(x)
        h = self.dense(self.trunk(x))
        return self.mu_head(h), F.softplus(self.var_head(h))

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.arch.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.arch.latent_dim}")
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(z), dim=-1)


@dataclass
class ModelCheckpoint:
    arch: ArchitectureConfig
    objective: str
    net: Network
    hyper: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")

    @property
    def radius(self) -> float:
        return float(self.hyper.get("radius", 1.0))


def encode(x: torch.Tensor, net: Network):
    """Single-image convenience wrapper around :meth:`Network.encode`."""
    mu, lam = net.encode(x.unsqueeze(0))
    return mu[0], lam[0]


def decode(z: torch.Tensor, net: Network) -> torch.Tensor:
    return net.decode(z)


def extract_feature(x: torch.Tensor, ckpt: ModelCheckpoint) -> torch.Tensor:
    """Verification feature for a batch ``x``.

    softmax / dvib use the posterior mean; dvsp projects it onto the sphere of
    radius ``R``.
    """
    mu, _ = ckpt.net.encode(x)
    if ckpt.objective != "dvsp":
        return mu
    from .bottleneck import sphere_project

    return sphere_project(mu, ckpt.radius)


# checkpoint container ------------------------------------------------------
#
#   magic   8 bytes  b"DVSPCKPT"
#   version u32 LE
#   hlen    u32 LE   length of the JSON header
#   header  hlen bytes, UTF-8 JSON (sorted keys): arch, objective, hyper,
#           meta, arrays=[{name, shape, offset, count}]
#   payload float64 LE arrays, concatenated in header order
#   digest  32 bytes SHA-256 of everything above

MAGIC = b"DVSPCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    state = ckpt.net.state_dict()
    arrays, payload, offset = [], io.BytesIO(), 0
    for name in sorted(state):
        a = state[name].detach().cpu().numpy().astype("<f8", copy=False)
        arrays.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        payload.write(a.tobytes(order="C"))
        offset += a.size
    header = json.dumps(
        {
            "arch": ckpt.arch.to_dict(),
            "objective": ckpt.objective,
            "hyper": ckpt.hyper,
            "meta": ckpt.meta,
            "arrays": arrays,
        },
        sort_keys=True,
    ).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(body[16 : 16 + hlen])
    data = np.frombuffer(body, dtype="<f8", offset=16 + hlen)
    arch = ArchitectureConfig.from_dict(header["arch"])
    net = Network(arch)
    state = {}
    for entry in header["arrays"]:
        chunk = data[entry["offset"] : entry["offset"] + entry["count"]]
        state[entry["name"]] = torch.from_numpy(chunk.copy()).reshape(entry["shape"])
    net.load_state_dict(state)
    net.eval()
    return ModelCheckpoint(arch, header["objective"], net, header["hyper"], header["meta"])
