"""Compare the CW feature attack with a brute-force grid search on 2-D linear extractors."""
import argparse
import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import grid_oracle, linear_extractor  # noqa: E402

from dvsp.attacks import AttackConfig, cw_feature_attack  # noqa: E402
from dvsp.numerics import Rng  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=AttackConfig.lr)
    p.add_argument("--refine-steps", type=int, default=AttackConfig.refine_steps)
    a = p.parse_args()
    rng = Rng(a.seed)
    cfg = AttackConfig(lr=a.lr, refine_steps=a.refine_steps)
    worst = 0.0
    for i in range(a.instances):
        ckpt = linear_extractor(rng)
        x1, x2 = rng.uniform((2,)), rng.uniform((2,))
        res = cw_feature_attack(x1, x2, ckpt, a.threshold, cfg)
        oracle = grid_oracle(ckpt, x1, x2, a.threshold)
        ratio = res.perturbation_norm / oracle if oracle > 0 else 1.0
        worst = max(worst, ratio)
        print(f"{i:3d} oracle {oracle:.4f} attack {res.perturbation_norm:.4f} ratio {ratio:.4f} "
              f"bound {float(torch.linalg.vector_norm(x1 - x2)):.4f}")
    print(f"max ratio {worst:.4f}")


if __name__ == "__main__":
    main()
