"""Feature-space attacks: a Carlini-Wagner style L2 attack and a one-step probe.

The attacker moves ``x1`` until the cosine distance between its feature and
the feature of ``x2`` drops to the verification threshold ``T``, while
keeping ``||x_tilde - x1||_2`` small.  Attacks are run batched: every row is
an independent problem with its own ``lambda`` and its own best-so-far record
(Adam is elementwise, so one optimizer over the batch equals one per row).
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import torch

from .model import ModelCheckpoint
from .numerics import AdamState, adam_step

log = logging.getLogger(__name__)

FeatureFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class AttackConfig:
    lambda_init: float = 1.0
    lambda_grow: float = 10.0
    lambda_shrink: float = 2.0
    rounds: int = 8
    steps: int = 300
    lr: float = 1e-2
    delta: float = 1e-6  # inverse box map clips x into [delta, 1 - delta]
    abort_early: bool = True
    refine_steps: int = 30  # bisection steps pulling the best point back toward x1


@dataclass
class AttackResult:
    x_tilde: torch.Tensor
    perturbation_norm: float
    success: bool
    distance: float
    lambda_final: float
    rounds: int
    steps: int

    def record(self, **extra) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "x_tilde"}
        out.update(extra)
        return out


def box_reparam(v: torch.Tensor) -> torch.Tensor:
    return (torch.tanh(v) + 1.0) / 2.0


def box_inverse(x: torch.Tensor, delta: float = 1e-6) -> torch.Tensor:
    return torch.atanh(2.0 * x.clamp(delta, 1.0 - delta) - 1.0)


def feature_fn(model) -> FeatureFn:
    """Features for the attack distance.

    Cosine distance ignores feature scale, so the sphere projection of dvsp
    models is skipped and the posterior mean is used for every objective.
    """
    if isinstance(model, ModelCheckpoint):
        net = model.net
        return lambda x: net.encode(x)[0]
    return model


def _cos_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a, dim=-1).clamp_min(1e-300)
    nb = torch.linalg.vector_norm(b, dim=-1).clamp_min(1e-300)
    return 1.0 - (a * b).sum(-1) / (na * nb)


def _l2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm((a - b).reshape(a.shape[0], -1), dim=1)


def verify(model, x_tilde: torch.Tensor, x2: torch.Tensor, T: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh forward pass: ``(distance, distance <= T)`` per row."""
    f = feature_fn(model)
    with torch.no_grad():
        d = _cos_dist(f(x_tilde), f(x2))
    return d, d <= T


def cw_attack_batch(model, x1: torch.Tensor, x2: torch.Tensor, T: float, config: AttackConfig | None = None):
    """Minimize ``||x - x1||_2 + lambda * d_cos(f(x), f(x2))`` over ``x = box_reparam(v)``.

    ``lambda`` starts at ``lambda_init``; after each round it grows by
    ``lambda_grow`` if no iterate of the round met ``d_cos <= T`` and shrinks
    by ``lambda_shrink`` otherwise.  The smallest-perturbation successful
    point seen at any step is kept, then pulled toward ``x1`` by bisection on
    the connecting segment.  ``x1`` itself and ``x2`` are evaluated as exact
    candidates first, so a successful result never exceeds ``||x1 - x2||``.
    """
    cfg = config or AttackConfig()
    f = feature_fn(model)
    B = x1.shape[0]
    x1 = x1.detach()
    with torch.no_grad():
        target = f(x2)
        d1 = _cos_dist(f(x1), target)
        d2 = _cos_dist(f(x2), target)
    best_x = x1.clone()
    best_norm = torch.full((B,), math.inf)
    ok1 = d1 <= T
    best_norm[ok1] = 0.0
    gap = _l2(x2, x1)
    use2 = (d2 <= T) & (gap < best_norm)
    best_x[use2] = x2[use2]
    best_norm[use2] = gap[use2]

    lam = torch.full((B,), float(cfg.lambda_init))
    active = ~ok1  # rows already at zero perturbation need no search
    v = box_inverse(x1, cfg.delta).clone().requires_grad_(True)
    steps_used = 0
    rounds_used = 0
    last = x1.clone()
    if active.any():
        for rnd in range(cfg.rounds):
            rounds_used += 1
            opt = AdamState(lr=cfg.lr)
            round_ok = torch.zeros(B, dtype=torch.bool)
            broken = torch.zeros(B, dtype=torch.bool)
            prev = math.inf
            check_every = max(1, cfg.steps // 10)
            for step in range(cfg.steps):
                steps_used += 1
                x = box_reparam(v)
                d = _cos_dist(f(x), target)
                pert = _l2(x, x1)
                per_row = pert + lam * d
                finite = torch.isfinite(per_row)
                broken |= ~finite
                with torch.no_grad():
                    hit = finite & (d <= T) & active
                    round_ok |= hit
                    better = hit & (pert < best_norm)
                    if better.any():
                        best_norm[better] = pert[better]
                        best_x[better] = x.detach()[better]
                keep = (active & ~broken).to(per_row.dtype)
                loss = (torch.where(finite, per_row, torch.zeros_like(per_row)) * keep).sum()
                (g,) = torch.autograd.grad(loss, v)
                adam_step(opt, [v], [g])
                if cfg.abort_early and step % check_every == 0:
                    cur = float(loss.detach())
                    if cur > prev * 0.9999:
                        break
                    prev = cur
            with torch.no_grad():
                last = box_reparam(v).detach()
                if broken.any():
                    # restart broken rows from the source image
                    v[broken] = box_inverse(x1[broken], cfg.delta)
                grow = active & (~round_ok | broken)
                lam = torch.where(grow, lam * cfg.lambda_grow, torch.where(active, lam / cfg.lambda_shrink, lam))

    found = torch.isfinite(best_norm)
    if cfg.refine_steps and found.any():
        best_x = _refine(f, x1, best_x, target, T, found & (best_norm > 0), cfg.refine_steps)
    x_out = torch.where(found.reshape(-1, *[1] * (x1.dim() - 1)), best_x, last)
    dist, ok = verify(model, x_out, x2, T)
    norms = _l2(x_out, x1)
    # a recorded candidate that fails the fresh check falls back to x2 when that verifies
    if (found & ~ok).any():
        d2v, ok2 = verify(model, x2, x2, T)
        swap = found & ~ok & ok2
        x_out[swap] = x2[swap]
        dist[swap], ok[swap], norms[swap] = d2v[swap], True, gap[swap]
    return [
        AttackResult(
            x_tilde=x_out[i],
            perturbation_norm=float(norms[i]),
            success=bool(ok[i]),
            distance=float(dist[i]),
            lambda_final=float(lam[i]),
            rounds=rounds_used if bool(active[i]) else 0,
            steps=steps_used if bool(active[i]) else 0,
        )
        for i in range(B)
    ]


def _refine(f, x1, best_x, target, T, rows, steps):
    """Bisect on the segment x1 -> best_x for the point nearest x1 that still meets T.

    Only feasible points are ever accepted, so the perturbation can only shrink.
    """
    shape = (-1, *[1] * (x1.dim() - 1))
    lo = torch.zeros(x1.shape[0])  # infeasible end (x1 itself fails for these rows)
    hi = torch.ones(x1.shape[0])
    with torch.no_grad():
        for _ in range(steps):
            mid = (lo + hi) / 2
            x = x1 + mid.reshape(shape) * (best_x - x1)
            ok = _cos_dist(f(x), target) <= T
            hi = torch.where(ok & rows, mid, hi)
            lo = torch.where(~ok & rows, mid, lo)
        out = x1 + hi.reshape(shape) * (best_x - x1)
    return torch.where(rows.reshape(shape), out, best_x)


def cw_feature_attack(x1, x2, model, T: float, config: AttackConfig | None = None) -> AttackResult:
    return cw_attack_batch(model, x1.unsqueeze(0), x2.unsqueeze(0), T, config)[0]


def fgsm_feature_attack(x1, x2, model, T: float, epsilon: float) -> list[AttackResult]:
    """One normalized-gradient step down the cosine distance, clamped to [0, 1]. Batched."""
    f = feature_fn(model)
    with torch.no_grad():
        target = f(x2)
    xr = x1.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(_cos_dist(f(xr), target).sum(), xr)
    flat = g.reshape(g.shape[0], -1)
    norms = torch.linalg.vector_norm(flat, dim=1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    step = (flat / safe[:, None]).reshape(x1.shape) * (norms > 0).reshape(-1, *[1] * (x1.dim() - 1))
    x_t = (x1 - epsilon * step).clamp(0.0, 1.0).detach()
    dist, ok = verify(model, x_t, x2, T)
    pert = _l2(x_t, x1)
    return [
        AttackResult(x_t[i], float(pert[i]), bool(ok[i]), float(dist[i]), 0.0, 0, 1)
        for i in range(x1.shape[0])
    ]


def _run_chunk(args):
    model, x1, x2, T, cfg = args
    torch.set_num_threads(1)
    return cw_attack_batch(model, x1, x2, T, cfg)


def run_attacks(
    model: ModelCheckpoint,
    images: torch.Tensor,
    jobs: Sequence,
    T: float,
    config: AttackConfig | None = None,
    workers: int | None = None,
    chunk_size: int = 128,
    progress: Callable[[int, int], None] | None = None,
) -> list[AttackResult]:
    """CW attacks for ``jobs`` (objects with ``source`` / ``target`` indices into ``images``).

    Jobs are cut into fixed chunks independent of ``workers``, and results are
    reassembled in job order, so the worker count never changes the output.
    """
    cfg = config or AttackConfig()
    chunks = []
    for lo in range(0, len(jobs), chunk_size):
        part = jobs[lo : lo + chunk_size]
        src = torch.tensor([j.source for j in part])
        tgt = torch.tensor([j.target for j in part])
        chunks.append((model, images[src], images[tgt], T, cfg))
    workers = workers or os.cpu_count() or 1
    results: list[AttackResult] = []
    if workers <= 1 or len(chunks) <= 1:
        for i, c in enumerate(chunks):
            results += cw_attack_batch(*c[:4], c[4])
            if progress:
                progress(i + 1, len(chunks))
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
            for i, res in enumerate(pool.map(_run_chunk, chunks)):
                results += res
                if progress:
                    progress(i + 1, len(chunks))
    return results
