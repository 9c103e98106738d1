"""Per-pair runtime of the SRT score against polygon-clipping 3D IoU.

    python3 scripts/bench_srt_vs_iou.py [--pairs 100000 200000] [--seed 0]
"""

import argparse

from woodgeom.box3d_metrics import bench_pairwise


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, nargs="+", default=[10_000, 100_000, 200_000])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"{'pairs':>8}{'srt ns/pair':>14}{'iou3d ns/pair':>16}{'ratio':>8}   digest")
    for n in args.pairs:
        res = bench_pairwise(n, seed=args.seed, repeats=args.repeats)
        print(f"{n:>8}{res.ns_per_pair['srt']:>14.1f}{res.ns_per_pair['iou3d']:>16.1f}"
              f"{res.speedup:>8.1f}   {res.digest[:16]}")


if __name__ == "__main__":
    main()
