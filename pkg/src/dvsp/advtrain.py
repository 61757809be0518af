"""Training loops: softmax baseline, DVIB, and DVSP with adversarial samples."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import torch

from . import bottleneck
from .bottleneck import IbHyperparams
from .datasets import LabeledSet
from .model import ArchitectureConfig, ModelCheckpoint, Network
from .numerics import AdamState, Rng, adam_step, sample_unit_sphere

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    objective: str = "dvsp"
    hp: IbHyperparams = field(default_factory=IbHyperparams)
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    lr: float = 1e-3
    adversarial: bool = True
    adv_mode: str = "l2"  # "l2" (normalized gradient) or "sign"
    deterministic: bool = False  # dvib only: z = mu, no sampling noise

    def __post_init__(self):
        if isinstance(self.hp, dict):
            self.hp = IbHyperparams(**self.hp)
        if self.objective not in ("softmax", "dvib", "dvsp"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.adv_mode not in ("l2", "sign"):
            raise ValueError(f"unknown adv_mode {self.adv_mode!r}")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    rng_draws: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        # wall time is left out so the file is reproducible byte for byte
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.epochs)


def adversarial_sample(x: torch.Tensor, grad_x: torch.Tensor, epsilon: float, mode: str = "l2"):
    """Per-sample step of size ``epsilon`` along the (normalized) gradient, clamped to [0, 1].

    Returns ``(x_adv, degenerate)`` where ``degenerate`` marks samples whose
    gradient vanished; those are returned unchanged.
    """
    flat = grad_x.reshape(grad_x.shape[0], -1)
    norms = torch.linalg.vector_norm(flat, dim=1)
    degenerate = norms == 0
    if epsilon == 0:
        return x.clone(), degenerate
    if mode == "sign":
        direction = torch.sign(flat)
    else:
        direction = flat / torch.where(degenerate, torch.ones_like(norms), norms)[:, None]
    direction[degenerate] = 0
    x_adv = x + epsilon * direction.reshape(x.shape)
    return x_adv.clamp(0.0, 1.0), degenerate


def _objective_terms(net, x, y, config: TrainConfig, u, noise_rng):
    if config.objective == "softmax":
        return bottleneck.softmax_loss(net, x, y, return_terms=True)
    if config.objective == "dvib":
        return bottleneck.dvib_loss(
            net, x, y, config.hp, rng=noise_rng, deterministic=config.deterministic, return_terms=True
        )
    return bottleneck.dvsp_loss(net, x, y, config.hp, u, return_terms=True)


def _predict_logits(net, terms, objective):
    z = terms["center"] if objective == "dvsp" else terms["mu"]
    return net.logits(z)


def train(data: LabeledSet, arch: ArchitectureConfig, config: TrainConfig) -> tuple[ModelCheckpoint, TrainLog]:
    """Mini-batch Adam on the configured objective.

    For dvsp the unit vectors ``u_1..u_m`` are drawn once before the first
    epoch.  With ``adversarial`` on, each batch is augmented by samples built
    from the loss gradient w.r.t. the inputs, and originals and adversarial
    copies enter the loss with equal weight.
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    root = Rng(config.seed)
    init_rng, shuffle_rng, noise_rng, u_rng = (root.spawn(i) for i in range(1, 5))
    net = Network(arch).init_weights(init_rng)
    names = [name for name, _ in net.named_parameters()]
    params = [p for _, p in net.named_parameters()]
    opt = AdamState(lr=config.lr)

    u = None
    if config.objective == "dvsp":
        u = sample_unit_sphere(u_rng, arch.latent_dim, count=config.hp.mc_samples)
    adversarial = config.adversarial and config.objective == "dvsp"

    tlog = TrainLog()
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        tot_loss = tot_kl = 0.0
        correct = degenerate = 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if adversarial:
                xr = x.clone().requires_grad_(True)
                (gx,) = torch.autograd.grad(bottleneck.dvsp_loss(net, xr, y, config.hp, u), xr)
                x_adv, deg = adversarial_sample(x, gx, config.hp.epsilon, config.adv_mode)
                degenerate += int(deg.sum())
                xb, yb = torch.cat([x, x_adv]), torch.cat([y, y])
            else:
                xb, yb = x, y
            loss, terms = _objective_terms(net, xb, yb, config, u, noise_rng)
            if not math.isfinite(float(loss.detach())):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
            with torch.no_grad():
                bs = x.shape[0]
                tot_loss += float(loss.detach()) * bs
                if "kl" in terms:
                    tot_kl += float(terms["kl"][:bs].sum())
                pred = _predict_logits(net, {k: v[:bs] for k, v in terms.items() if v.dim() == 2}, config.objective)
                correct += int((pred.argmax(-1) == y).sum())
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
            adam_step(opt, params, grads, names)
        rec = {
            "epoch": epoch,
            "loss": tot_loss / n,
            "train_accuracy": correct / n,
        }
        if config.objective != "softmax":
            rec["kl"] = tot_kl / n
        if adversarial:
            rec["degenerate_adv"] = degenerate
        tlog.epochs.append(rec)
        log.info("epoch %d %s", epoch, rec)
    tlog.wall_time = time.perf_counter() - start
    tlog.rng_draws = {"u": u_rng.draws, "shuffle": shuffle_rng.draws, "noise": noise_rng.draws}

    net.eval()
    hyper = dataclasses.asdict(config.hp)
    meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "adversarial": adversarial,
        "adv_mode": config.adv_mode,
        "deterministic": config.deterministic,
        "train_size": n,
    }
    return ModelCheckpoint(arch, config.objective, net, hyper, meta), tlog


def train_dvsp(data, arch, config: TrainConfig):
    return train(data, arch, dataclasses.replace(config, objective="dvsp"))


def train_dvib(data, arch, config: TrainConfig):
    return train(data, arch, dataclasses.replace(config, objective="dvib"))


def train_softmax(data, arch, config: TrainConfig):
    return train(data, arch, dataclasses.replace(config, objective="softmax"))
