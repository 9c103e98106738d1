"""Render a synthetic fisheye frame and undistort it through each viewport kind.

The scene is a checkerboard painted on the inside of a cylinder around the
camera, so straight vertical edges make viewport behaviour easy to see.

    python3 scripts/undistort_demo.py [--out-dir undistort_demo]
"""

import argparse
import math
from pathlib import Path

import numpy as np
from PIL import Image

from woodgeom import fixture_path, load_calibration
from woodgeom.fisheye_models import unproject_pixels
from woodgeom.undistortion import apply_remap, build_remap, default_viewport, resampling_distortion_map


def render_fisheye(cal, squares_deg=10.0):
    u, v = np.meshgrid(np.arange(cal.width, dtype=float), np.arange(cal.height, dtype=float))
    uv = np.column_stack([u.ravel(), v.ravel()])
    inside = np.hypot(uv[:, 0] - cal.cx, uv[:, 1] - cal.cy) <= cal.r_max
    img = np.zeros(uv.shape[0], dtype=np.uint8)
    rays = unproject_pixels(cal, uv[inside])
    az = np.degrees(np.arctan2(rays[:, 0], rays[:, 2]))
    height = rays[:, 1] / np.hypot(rays[:, 0], rays[:, 2])  # cylinder of radius 1
    cell = np.floor(az / squares_deg).astype(int) + np.floor(height / math.radians(squares_deg)).astype(int)
    img[inside] = np.where(cell % 2 == 0, 220, 40)
    return img.reshape(cal.height, cal.width)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--calibration", default=str(fixture_path()))
    ap.add_argument("--out-dir", default="undistort_demo")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cal = load_calibration(args.calibration)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = render_fisheye(cal)
    Image.fromarray(src).save(out / "fisheye.png")

    for kind in ("rect", "piecewise", "cyl"):
        table = build_remap(cal, default_viewport(cal, kind), threads=args.threads)
        Image.fromarray(apply_remap(table, src)).save(out / f"{kind}.png")
        scale = resampling_distortion_map(table)
        finite = scale[np.isfinite(scale)]
        print(f"{kind:<10} invalid {1 - table.valid.mean():6.3f}   "
              f"area scale median {np.median(finite):7.3f}  p99 {np.percentile(finite, 99):8.3f}")
    print(f"images written to {out}/")


if __name__ == "__main__":
    main()
