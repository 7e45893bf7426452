"""Print per-vendor intensity statistics of the phantom presets and write a few sample PGMs."""

import argparse
from pathlib import Path

import numpy as np

from styleinv.phantoms import VENDORS, generate_phantoms, save_mask, save_slice


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="directory for sample PGMs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for v in VENDORS:
        cases = generate_phantoms(4, 6, (64, 64), v, args.seed)
        imgs = np.concatenate([c.images for c in cases])
        print(f"{v}: mean {imgs.mean():.3f} std {imgs.std():.3f} "
              f"min {imgs.min():.3f} max {imgs.max():.3f}  {VENDORS[v]}")
        if args.out:
            d = Path(args.out)
            d.mkdir(parents=True, exist_ok=True)
            save_slice(d / f"{v}_sample.pgm", cases[0].images[0])
            save_mask(d / f"{v}_sample_mask.pgm", cases[0].labels[0])


if __name__ == "__main__":
    main()
