#!/usr/bin/env python3
"""Zero-noise oracle for the synthetic generator.

Predicting each row's latent (noise-free) strength gives the best MAPE and R²
any model can reach on a generated dataset. Prints those ceilings on the same
80/20 test split the comparison uses, plus the target summary statistics.

    python3 scripts/calibrate_generator.py [--n 20000] [--seed 42] [--split-seed 42]
"""
import argparse
import math

import numpy as np

from ccspred.dataset import GeneratorConfig, generate_synthetic, split_80_20
from ccspred.evaluation import mape, r2
from ccspred.models import derive_seed


def oracle(gen, split_seed):
    data, latent = generate_synthetic(gen, return_latent=True)
    rows = {}
    for age, scale in ((7, gen.maturity_ratio), (28, 1.0)):
        _, test = split_80_20(data[age], derive_seed(split_seed, "split", age))
        pred = scale * latent[test.rows]
        rows[age] = (r2(test.target, pred), mape(test.target, pred),
                     float(data[age].target.mean()), float(data[age].target.std()))
    return rows


def main():
    ap = argparse.ArgumentParser(description="generator noise ceilings")
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=42, help="generator seed")
    ap.add_argument("--split-seed", type=int, default=42, help="run seed used for the split")
    args = ap.parse_args()
    gen = GeneratorConfig(n=args.n, seed=args.seed)
    print(f"cov_28={gen.cov_28}  cov_7={gen.cov_7}")
    for age, (r2_, mape_, mean, std) in oracle(gen, args.split_seed).items():
        print(f"{age:>2}-day  oracle R² {r2_:.4f}  oracle MAPE {mape_:.3f}%  "
              f"target mean {mean:.0f} psi  std {std:.0f} psi")
    cov7 = math.hypot(gen.cov_28, gen.cov_7)
    print(f"lognormal expectation: 28-day MAPE ≈ {100 * gen.cov_28 * math.sqrt(2 / math.pi):.3f}%, "
          f"7-day ≈ {100 * cov7 * math.sqrt(2 / math.pi):.3f}%")
    print(f"embednet 28-day MAPE bound (2 x CoV): {200 * gen.cov_28:.1f}%")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
