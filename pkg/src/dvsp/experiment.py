"""Scaled-down MNIST comparison of softmax, DVIB and DVSP extractors.

All three models share one data split, one EER pair schedule and one attack
schedule, so their robustness indices are directly comparable.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .advtrain import TrainConfig, train
from .attacks import AttackConfig
from .bottleneck import IbHyperparams
from .datasets import attack_schedule, load_mnist, make_pairs
from .metrics import heatmap_export, symmetrized
from .model import ArchitectureConfig, save_checkpoint
from .numerics import Rng
from .pipeline import attack_campaign, evaluate

log = logging.getLogger(__name__)


@dataclass
class MnistExperimentConfig:
    data_dir: str | None = None
    train_size: int = 10_000
    test_size: int = 10_000
    seed: int = 7
    epochs: int = 10
    batch_size: int = 128
    beta: float = 0.01
    radius: float = 1.0
    # step length of the adversarial training samples for DVSP
    epsilon: float = 1.0
    adv_mode: str = "l2"
    eer_pairs: int = 100
    per_class: int = 3
    ceiling: float = 10.0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(rounds=4, steps=100, lr=0.1))
    objectives: tuple[str, ...] = ("softmax", "dvib", "dvsp")

    def train_config(self, objective: str) -> TrainConfig:
        hp = IbHyperparams(beta=self.beta, radius=self.radius, epsilon=self.epsilon)
        return TrainConfig(
            objective=objective, hp=hp, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            adv_mode=self.adv_mode,
        )


def run_mnist_comparison(cfg: MnistExperimentConfig, out_dir=None) -> dict:
    """Train, evaluate and attack each objective.  Returns a per-objective summary."""
    split = load_mnist(cfg.data_dir, train_size=cfg.train_size, test_size=cfg.test_size)
    test = split.test
    pairs = make_pairs(test.labels, split.n_c, cfg.eer_pairs, Rng(cfg.seed).spawn(10))
    jobs = attack_schedule(test.labels, split.n_c, cfg.per_class, Rng(cfg.seed).spawn(20))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for objective in cfg.objectives:
        t0 = time.perf_counter()
        ckpt, tlog = train(split.train, ArchitectureConfig(), cfg.train_config(objective))
        t1 = time.perf_counter()
        ev = evaluate(ckpt, test, pairs)
        report, records = attack_campaign(
            ckpt, test, jobs, split.n_c, ev["EER"], ev["T"], cfg.attack, cfg.ceiling, workers=1, chunk_size=len(jobs)
        )
        t2 = time.perf_counter()
        S = symmetrized(report.H)
        summary[objective] = {
            "EER": ev["EER"],
            "T": ev["T"],
            "RI": report.RI,
            "failures": int(report.failures.sum()),
            "attacks": len(jobs),
            "train_accuracy": tlog.epochs[-1]["train_accuracy"],
            "H_sym": S,
            "train_seconds": t1 - t0,
            "attack_seconds": t2 - t1,
        }
        log.info("%s: EER %.4f RI %.4f (%.0fs train, %.0fs attack)", objective, ev["EER"], report.RI, t1 - t0, t2 - t1)
        if out:
            save_checkpoint(out / f"{objective}.ckpt", ckpt)
            report.save(out / f"{objective}_robustness.json")
            heatmap_export(report, out / f"{objective}_heatmap.csv")
            with open(out / f"{objective}_attacks.jsonl", "w") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if out:
        light = {k: {kk: vv for kk, vv in v.items() if kk != "H_sym"} for k, v in summary.items()}
        echo = dataclasses.asdict(cfg)
        (out / "summary.json").write_text(json.dumps({"config": echo, "results": light}, indent=2, default=str) + "\n")
    return summary


def below_median(S: np.ndarray, pairs) -> dict:
    """For each unordered pair, whether its symmetrized hardness is below the off-diagonal median."""
    med = float(np.nanmedian(S[np.triu_indices(S.shape[0], 1)]))
    return {p: bool(S[p] < med) for p in pairs} | {"median": med}
