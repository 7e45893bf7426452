"""Fine-tune the style-transfer network and report self-styling PSNR per vendor."""

import argparse
import time
from dataclasses import replace

import numpy as np

from styleinv.pipeline import ExperimentConfig, make_splits
from styleinv.phantoms import stack_cases
from styleinv.style import finetune_reconstruction, psnr, stylize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=None)
    args = ap.parse_args()

    cfg = ExperimentConfig().for_seed(args.seed)
    st_cfg = cfg.st if args.iterations is None else replace(cfg.st, iterations=args.iterations)
    splits = make_splits(cfg, args.seed)
    x, _ = stack_cases(splits.train)
    t0 = time.perf_counter()
    params, losses = finetune_reconstruction(x, st_cfg)
    print(f"fine-tuned {st_cfg.iterations} iterations in {time.perf_counter() - t0:.0f} s, "
          f"loss {np.mean(losses[:10]):.5f} -> {np.mean(losses[-10:]):.5f}")
    for v, cases in splits.test.items():
        imgs, _ = stack_cases(cases)
        out = stylize(imgs, imgs, params)
        print(f"vendor {v}: self-styling PSNR {np.mean([psnr(a, b) for a, b in zip(out, imgs)]):.2f} dB")


if __name__ == "__main__":
    main()
