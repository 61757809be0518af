import struct

import numpy as np
import pytest
import torch

from dvsp.datasets import LabeledSet, default_data_dir, load_mnist
from dvsp.model import ArchitectureConfig, ModelCheckpoint, Network, mlp_config
from dvsp.numerics import Rng, sample_gaussian

torch.set_num_threads(1)


def blobs(n_per_class=100, seed=0, sep=5.0, dim=2) -> LabeledSet:
    """Two Gaussian blobs, squashed into [0, 1] so they behave like pixel inputs."""
    rng = Rng(seed)
    centers = torch.zeros(2, dim)
    centers[0, 0], centers[1, 0] = -sep / 2, sep / 2
    pts = [centers[c] + sample_gaussian(rng, (n_per_class, dim)) for c in range(2)]
    x = torch.sigmoid(torch.cat(pts) / 2)
    y = torch.cat([torch.full((n_per_class,), c, dtype=torch.long) for c in range(2)])
    return LabeledSet(x, y)


@pytest.fixture
def toy_blobs():
    return blobs()


@pytest.fixture
def toy_arch() -> ArchitectureConfig:
    return mlp_config(2, hidden=(8,), latent_dim=2, num_classes=2)


def mnist_available() -> bool:
    d = default_data_dir()
    return (d / "train-images-idx3-ubyte").exists() or (d / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found (set DVSP_MNIST_DIR)")


@pytest.fixture(scope="session")
def mnist_small():
    if not mnist_available():
        pytest.skip("MNIST IDX files not found")
    return load_mnist(train_size=10_000)


@pytest.fixture(scope="session")
def softmax_mnist(mnist_small):
    """Small CNN softmax baseline, 10k images, 5 epochs."""
    from dvsp.advtrain import TrainConfig, train_softmax

    ckpt, tlog = train_softmax(mnist_small.train, ArchitectureConfig(), TrainConfig(epochs=5, seed=3))
    return ckpt, tlog


def linear_extractor(rng: Rng, in_dim=2, latent=2) -> ModelCheckpoint:
    """``f(x) = W x + b`` with Gaussian weights, wrapped as a checkpoint."""
    arch = ArchitectureConfig(input_shape=(in_dim,), conv=[], dense=[], latent_dim=latent, num_classes=2)
    net = Network(arch)
    with torch.no_grad():
        net.mu_head.weight.copy_(sample_gaussian(rng, (latent, in_dim)))
        net.mu_head.bias.copy_(sample_gaussian(rng, (latent,)))
    return ModelCheckpoint(arch, "dvib", net)


def grid_oracle(ckpt: ModelCheckpoint, x1, x2, T, resolution=1e-3) -> float:
    """Smallest ||x - x1|| over a regular grid of the unit square with d_cos(f(x), f(x2)) <= T."""
    g = torch.linspace(0, 1, int(round(1 / resolution)) + 1)
    pts = torch.stack(torch.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    with torch.no_grad():
        fx = ckpt.net.encode(pts)[0]
        ft = ckpt.net.encode(x2.reshape(1, 2))[0]
        d = 1 - torch.nn.functional.cosine_similarity(fx, ft, dim=1)
    dist = torch.linalg.vector_norm(pts - x1.reshape(1, 2), dim=1)
    return float(dist[d <= T].min())


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_tiny_idx(d, n=300):
    """``n`` synthetic digits: a bright bar whose row encodes the class; labels round-robin."""
    rng = np.random.default_rng(0)
    labels = np.arange(n) % 10
    imgs = rng.uniform(0, 60, (n, 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        imgs[i, 2 + 2 * c : 4 + 2 * c, 4:24] = 250
    (d / "train-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + imgs.tobytes())
    (d / "train-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())
    return d
