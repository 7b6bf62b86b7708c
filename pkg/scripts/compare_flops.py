#!/usr/bin/env python3
"""Compare per-forward FLOPs of layered configs against matched
single-resolution baselines across a sweep of target resolutions."""

import sys

from layerdiff.unet import ModelConfig, count_flops, single_resolution_config


def main() -> int:
    print(f"{'top res':>8} {'levels':>7} {'layered':>12} {'single':>12} {'ratio':>7}")
    for top, levels in ((32, 2), (64, 2), (64, 3), (128, 3)):
        resolutions = tuple(top // 2**i for i in range(levels))
        hidden = tuple(16 * 2**i for i in range(levels))
        cfg = ModelConfig(
            resolutions=resolutions, hidden_dims=hidden,
            inner_dims=(hidden[-1], hidden[-1]), blocks_per_level=1,
            embed_dim=32, groups=8)
        layered = count_flops(cfg).total
        single = count_flops(single_resolution_config(cfg)).total
        print(f"{top:>8} {levels:>7} {layered:>12.4e} {single:>12.4e} "
              f"{layered / single:>6.1%}")
    print("\nreference at publication scale (hyperparameters unpublished, "
          "not reproduced here): 2.04e12 vs 2.20e12; 2.79e12 vs 3.24e12")
    return 0


if __name__ == "__main__":
    sys.exit(main())
