"""Information-bottleneck objectives.

Both losses are the negated variational lower bound, averaged over the batch:

    loss = -(1/n) sum_i [ E log q(y_i | z) - beta * KL(p(z|x_i) || N(0, I)) ]

``dvib_loss`` samples ``z = mu + sqrt(lam) * v`` with ``v ~ N(0, I)``.
``dvsp_loss`` samples on the shell ``z' = r(x) u + c(x)`` with
``c = mu / ||mu||``, ``r = mean(lam)`` and a fixed set of unit vectors ``u``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import Rng, sample_gaussian


@dataclass
class IbHyperparams:
    beta: float = 0.01
    radius: float = 1.0
    mc_samples: int = 12
    epsilon: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


def kl_standard_normal(mu: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(lam)) || N(0, I)) over the last axis."""
    if (lam <= 0).any():
        raise ValueError("variances must be strictly positive")
    k = mu.shape[-1]
    return 0.5 * (lam.sum(-1) + (mu * mu).sum(-1) - k - torch.log(lam).sum(-1))


def sphere_project(z: torch.Tensor, radius: float = 1.0) -> torch.Tensor:
    norms = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    if (norms == 0).any():
        bad = torch.nonzero(norms.reshape(-1) == 0).reshape(-1).tolist()
        raise ValueError(f"cannot project zero vector(s) at index {bad}")
    return radius * z / norms


@dataclass
class ShellSpec:
    center: torch.Tensor
    radius: torch.Tensor


def shell_spec(mu: torch.Tensor, lam: torch.Tensor) -> ShellSpec:
    """Center ``mu/||mu||`` and radius ``mean(lam)``; works batched over leading axes."""
    return ShellSpec(sphere_project(mu, 1.0), lam.mean(-1))


def shell_sample(spec: ShellSpec, u: torch.Tensor) -> torch.Tensor:
    """``r * u + c``.  With batched specs ``[n, k]`` and ``u`` of ``[m, k]`` returns ``[n, m, k]``."""
    c, r = spec.center, spec.radius
    if c.dim() == 1:
        return r * u + c
    return r[:, None, None] * u[None, :, :] + c[:, None, :]


def _mc_log_likelihood(net, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over the sample axis of log q(y | z); ``z`` is ``[n, m, k]``."""
    logp = F.log_softmax(net.logits(z), dim=-1)
    picked = logp.gather(-1, y[:, None, None].expand(-1, z.shape[1], 1)).squeeze(-1)
    return picked.mean(1)


def dvib_loss(
    net, x, y, hp: IbHyperparams, rng: Rng | None = None, noise=None, deterministic=False, return_terms=False
):
    """Negated DVIB bound.  ``noise`` ``[n, m, k]`` freezes the Gaussian draws.

    ``deterministic`` uses ``z = mu`` (zero variance) for the likelihood.
    ``return_terms`` also returns ``{"mu", "lam", "kl"}`` from the same forward pass.
    """
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    mu, lam = net.encode(x)
    if deterministic:
        z = mu[:, None, :]
    else:
        if noise is None:
            if rng is None:
                raise ValueError("rng or noise required")
            noise = sample_gaussian(rng, (mu.shape[0], hp.mc_samples, mu.shape[1]))
        z = mu[:, None, :] + lam.sqrt()[:, None, :] * noise
    lik = _mc_log_likelihood(net, z, y)
    kl = kl_standard_normal(mu, lam)
    loss = -(lik - hp.beta * kl).mean()
    return (loss, {"mu": mu, "lam": lam, "kl": kl}) if return_terms else loss


def dvsp_loss(net, x, y, hp: IbHyperparams, u_samples: torch.Tensor, return_terms=False):
    """Negated DVSP bound using the fixed unit vectors ``u_samples`` ``[m, k]``."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    mu, lam = net.encode(x)
    norms = torch.linalg.vector_norm(mu, dim=-1)
    if (norms == 0).any():
        bad = torch.nonzero(norms == 0).reshape(-1).tolist()
        raise ValueError(f"zero posterior mean for batch sample(s) {bad}")
    spec = shell_spec(mu, lam)
    lik = _mc_log_likelihood(net, shell_sample(spec, u_samples), y)
    kl = kl_standard_normal(mu, lam)
    loss = -(lik - hp.beta * kl).mean()
    return (loss, {"mu": mu, "lam": lam, "kl": kl, "center": spec.center}) if return_terms else loss


def softmax_loss(net, x, y, return_terms=False):
    mu, lam = net.encode(x)
    loss = F.cross_entropy(net.logits(mu), y)
    return (loss, {"mu": mu, "lam": lam}) if return_terms else loss
