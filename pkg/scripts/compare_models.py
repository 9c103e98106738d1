"""Fit the competing projection models to the shipped 190 deg lens and report deviations.

    python3 scripts/compare_models.py [--calibration FILE] [--out curves.csv]
"""

import argparse
import math
import time

from woodgeom import fixture_path, load_calibration
from woodgeom.model_fitting import compare_models, export_curves, write_curves_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--calibration", default=str(fixture_path()))
    ap.add_argument("--lo-deg", type=float, default=0.0)
    ap.add_argument("--hi-deg", type=float, default=120.0)
    ap.add_argument("--samples", type=int, default=241)
    ap.add_argument("--out", default="model_curves.csv")
    args = ap.parse_args()

    cal = load_calibration(args.calibration)
    rng = (math.radians(args.lo_deg), math.radians(args.hi_deg))
    t0 = time.perf_counter()
    fits = compare_models(cal.model, rng, args.samples)
    elapsed = time.perf_counter() - t0

    print(f"{'model':<14}{'params':<40}{'max|dev| px':>12}{'mean|dev| px':>14}")
    for variant, res in fits.items():
        params = ", ".join(f"{p:.4g}" for p in res.fitted.params)
        print(f"{variant.value:<14}{params:<40}{res.max_abs_dev:>12.3f}{res.mean_abs_dev:>14.3f}"
              + (f"   ({res.note})" if res.note else ""))
    print(f"fitted in {elapsed:.3f} s")

    ref = cal.model.with_theta_max(rng[1]) if cal.model.theta_max < rng[1] else cal.model
    models = [ref] + [r.fitted for r in fits.values()]
    names = ["poly4"] + [v.value for v in fits]
    header, table = export_curves(models, rng, 121, names)
    write_curves_csv(args.out, header, table)
    print(f"curves written to {args.out}")


if __name__ == "__main__":
    main()
