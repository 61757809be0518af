"""Numeric substrate: float64 tensors, reverse-mode gradients, Adam, samplers.

Tensors are plain ``torch.Tensor`` objects in double precision and torch's
autograd graph plays the role of the gradient tape.  Everything random goes
through :class:`Rng` so a seed pins the whole stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


class Rng:
    """Seeded sample stream backed by a CPU ``torch.Generator`` (mt19937).

    ``draws`` counts calls to the sampling helpers, which lets tests check
    how often a training loop touched the stream.
    """

    algorithm = "mt19937"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)
        self.draws = 0

    def spawn(self, offset: int) -> "Rng":
        # derived streams for independent consumers (init, shuffling, noise)
        return Rng((self.seed * 1_000_003 + offset) % (2**63))

    def permutation(self, n: int) -> torch.Tensor:
        self.draws += 1
        return torch.randperm(n, generator=self.generator)

    def uniform(self, shape) -> torch.Tensor:
        self.draws += 1
        return torch.rand(tuple(shape), generator=self.generator, dtype=DTYPE)


def sample_gaussian(rng: Rng, shape) -> torch.Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must be nonempty")
    rng.draws += 1
    return torch.randn(shape, generator=rng.generator, dtype=DTYPE)


def sample_unit_sphere(rng: Rng, dim: int, count: int | None = None) -> torch.Tensor:
    """Uniform draw(s) from the unit sphere in ``dim`` dimensions.

    Normalizes a standard Gaussian vector; zero-norm draws are resampled.
    Returns shape ``[dim]`` or ``[count, dim]``.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    n = 1 if count is None else int(count)
    out = torch.empty(n, dim, dtype=DTYPE)
    filled = 0
    while filled < n:
        v = sample_gaussian(rng, (n - filled, dim))
        norms = torch.linalg.vector_norm(v, dim=1)
        ok = norms > 0
        v = v[ok] / norms[ok, None]
        out[filled : filled + v.shape[0]] = v
        filled += v.shape[0]
    return out[0] if count is None else out


def backward(output: torch.Tensor, inputs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradient of a scalar ``output`` with respect to each of ``inputs``.

    Inputs that do not influence ``output`` (or are detached) get zeros.
    """
    if output.numel() != 1:
        raise ValueError(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    inputs = list(inputs)
    live = [i for i, t in enumerate(inputs) if t.requires_grad]
    grads = [torch.zeros_like(t) for t in inputs]
    if live and output.requires_grad:
        got = torch.autograd.grad(
            output.reshape(()), [inputs[i] for i in live], allow_unused=True
        )
        for i, g in zip(live, got):
            if g is not None:
                grads[i] = g
    return grads


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5
) -> float:
    """Max over coordinates of |autograd - central difference| / max(1, |central difference|)."""
    x = as_tensor(x).detach().clone()
    xg = x.clone().requires_grad_(True)
    (analytic,) = backward(f(xg), [xg])
    analytic = analytic.reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            vals = []
            for sgn in (1.0, -1.0):
                xp = flat.clone()
                xp[i] += sgn * step
                v = float(f(xp.reshape(x.shape)))
                if not math.isfinite(v):
                    raise ValueError(f"non-finite function value at coordinate {i}")
                vals.append(v)
            cd = (vals[0] - vals[1]) / (2 * step)
            err = abs(float(analytic[i]) - cd) / max(1.0, abs(cd))
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    def reset(self):
        self.t = 0
        self.m, self.v = [], []


def adam_step(
    state: AdamState,
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    names: Sequence[str] | None = None,
) -> list[torch.Tensor]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1 - state.beta1**state.t
    bc2 = 1 - state.beta2**state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            p.sub_(state.lr * (m / bc1) / ((v / bc2).sqrt() + state.eps))
    return list(params)
