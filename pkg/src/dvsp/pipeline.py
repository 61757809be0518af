"""Evaluation and attack campaigns shared by the CLI and the experiment scripts."""
from __future__ import annotations

import numpy as np
import torch

from .attacks import AttackConfig, AttackResult, run_attacks
from .datasets import AttackJob, LabeledSet, Pair
from .metrics import RobustnessReport, ScoreSet, compute_eer, cosine_distance, pairwise_hardness, robustness_index
from .model import ModelCheckpoint, extract_feature


def features(ckpt: ModelCheckpoint, images: torch.Tensor, batch_size: int = 1000) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([extract_feature(images[i : i + batch_size], ckpt) for i in range(0, len(images), batch_size)])


def score_pairs(ckpt: ModelCheckpoint, data: LabeledSet, pairs: list[Pair]) -> ScoreSet:
    if not pairs:
        raise ValueError("empty pair schedule")
    feats = features(ckpt, data.images)
    a = torch.tensor([p.a for p in pairs])
    b = torch.tensor([p.b for p in pairs])
    d = cosine_distance(feats[a], feats[b]).numpy()
    same = np.array([p.same for p in pairs])
    return ScoreSet(d[same], d[~same])


def evaluate(ckpt: ModelCheckpoint, data: LabeledSet, pairs: list[Pair]) -> dict:
    scores = score_pairs(ckpt, data, pairs)
    eer, T = compute_eer(scores)
    return {
        "EER": eer,
        "T": T,
        "n_genuine": int(scores.genuine.size),
        "n_impostor": int(scores.impostor.size),
        "genuine_mean": float(scores.genuine.mean()),
        "impostor_mean": float(scores.impostor.mean()),
    }


def assemble_report(
    jobs: list[AttackJob], results: list[AttackResult], n_c: int, eer: float, T: float, ceiling: float, config: dict
) -> RobustnessReport:
    H = np.full((n_c, n_c), np.nan)
    attempts = np.zeros((n_c, n_c), dtype=int)
    failures = np.zeros((n_c, n_c), dtype=int)
    groups: dict[tuple[int, int], list[AttackResult]] = {}
    for job, res in zip(jobs, results):
        groups.setdefault((job.source_class, job.target_class), []).append(res)
    for (k, l), rs in groups.items():
        H[k, l] = pairwise_hardness([r.perturbation_norm for r in rs], [r.success for r in rs], ceiling)
        attempts[k, l] = len(rs)
        failures[k, l] = sum(not r.success for r in rs)
    return RobustnessReport(H, robustness_index(H, n_c), eer, T, attempts, failures, config)


def attack_campaign(
    ckpt: ModelCheckpoint,
    data: LabeledSet,
    jobs: list[AttackJob],
    n_c: int,
    eer: float,
    T: float,
    attack_cfg: AttackConfig,
    ceiling: float = 10.0,
    workers: int | None = None,
    chunk_size: int = 128,
    config_echo: dict | None = None,
    progress=None,
) -> tuple[RobustnessReport, list[dict]]:
    results = run_attacks(ckpt, data.images, jobs, T, attack_cfg, workers, chunk_size, progress)
    records = [
        r.record(source=j.source, target=j.target, source_class=j.source_class, target_class=j.target_class)
        for j, r in zip(jobs, results)
    ]
    report = assemble_report(jobs, results, n_c, eer, T, ceiling, config_echo or {})
    return report, records
