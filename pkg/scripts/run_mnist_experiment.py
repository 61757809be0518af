"""Train softmax / DVIB / DVSP on a 10k MNIST subset, attack each, and compare.

    python scripts/run_mnist_experiment.py --out runs/mnist --epsilon 1.0

Writes checkpoints, robustness reports, heatmaps and attack records per
objective plus summary.json into --out.
"""
import argparse
import logging

import torch

from dvsp.attacks import AttackConfig
from dvsp.experiment import MnistExperimentConfig, below_median, run_mnist_comparison


def main():
    d = MnistExperimentConfig()
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="runs/mnist")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--train-size", type=int, default=d.train_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--adv-mode", choices=["l2", "sign"], default=d.adv_mode)
    p.add_argument("--per-class", type=int, default=d.per_class)
    p.add_argument("--rounds", type=int, default=d.attack.rounds)
    p.add_argument("--steps", type=int, default=d.attack.steps)
    p.add_argument("--attack-lr", type=float, default=d.attack.lr)
    p.add_argument("--objectives", default=",".join(d.objectives))
    a = p.parse_args()

    torch.set_num_threads(1)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = MnistExperimentConfig(
        data_dir=a.data_dir, train_size=a.train_size, seed=a.seed, epochs=a.epochs, beta=a.beta,
        epsilon=a.epsilon, adv_mode=a.adv_mode, per_class=a.per_class,
        attack=AttackConfig(rounds=a.rounds, steps=a.steps, lr=a.attack_lr),
        objectives=tuple(a.objectives.split(",")),
    )
    s = run_mnist_comparison(cfg, a.out)
    print(f"{'objective':<10}{'EER':>8}{'T':>8}{'RI':>8}{'fail':>6}")
    for k, v in s.items():
        print(f"{k:<10}{v['EER']:>8.4f}{v['T']:>8.3f}{v['RI']:>8.3f}{v['failures']:>6}")
    if "dvsp" in s:
        for base in ("softmax", "dvib"):
            if base in s:
                print(f"RI(dvsp) / RI({base}) = {s['dvsp']['RI'] / s[base]['RI']:.2f}")
    if "softmax" in s:
        print("softmax (3,5), (4,9) below median:", below_median(s["softmax"]["H_sym"], [(3, 5), (4, 9)]))


if __name__ == "__main__":
    main()
