"""Fit competing projection models to a reference radial curve.

All target models are linear in their focal parameter, so a coarse grid over
the shape parameters (xi for UCM, alpha/beta for eUCM) is searched with the
focal solved in closed form, then every parameter is refined jointly by
Gauss-Newton on the pixel residuals.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fisheye_models import DomainError, RadialModel, Variant

RECTILINEAR_LIMIT = math.radians(89.0)

_SHAPE_GRIDS = {
    Variant.RECTILINEAR: [()],
    Variant.STEREOGRAPHIC: [()],
    Variant.UCM: [(xi,) for xi in np.linspace(0.0, 4.0, 81)],
    Variant.EUCM: [
        (a, b) for a, b in itertools.product(np.linspace(0.0, 1.0, 41), np.geomspace(0.05, 20.0, 41))
    ],
}


@dataclass(frozen=True)
class FitResult:
    fitted: RadialModel
    theta_grid: np.ndarray
    deviation: np.ndarray  # fitted r(theta) - reference r(theta), px
    max_abs_dev: float
    mean_abs_dev: float
    sse: float
    note: str = ""

    def summary(self) -> dict:
        return {
            "variant": self.fitted.variant.value,
            "params": list(self.fitted.params),
            "theta_range_deg": [math.degrees(self.theta_grid[0]), math.degrees(self.theta_grid[-1])],
            "n_samples": int(self.theta_grid.size),
            "max_abs_dev_px": self.max_abs_dev,
            "mean_abs_dev_px": self.mean_abs_dev,
            "sse_px2": self.sse,
            "note": self.note,
        }


def _make(variant: Variant, params: Sequence[float], hi: float) -> RadialModel | None:
    try:
        return RadialModel(variant, tuple(params), hi)
    except ValueError:
        return None


def _sse(variant, params, theta, ref, hi) -> float:
    model = _make(variant, params, hi)
    if model is None:
        return math.inf
    res = model.radius_unchecked(theta) - ref
    return float(res @ res)


def _gauss_newton(variant, params, theta, ref, hi, iters=60):
    p = np.array(params, dtype=float)
    cost = _sse(variant, p, theta, ref, hi)
    for _ in range(iters):
        model = _make(variant, p, hi)
        res = model.radius_unchecked(theta) - ref
        jac = np.empty((theta.size, p.size))
        for k in range(p.size):
            h = 1e-7 * max(abs(p[k]), 1e-3)
            lo_p, hi_p = p.copy(), p.copy()
            lo_p[k] -= h
            hi_p[k] += h
            m_lo, m_hi = _make(variant, lo_p, hi), _make(variant, hi_p, hi)
            if m_lo is None or m_hi is None:
                # one-sided difference at a parameter bound
                m_lo, m_hi, h = (model, m_hi, h / 2) if m_lo is None else (m_lo, model, h / 2)
                if m_lo is None or m_hi is None:
                    jac[:, k] = 0.0
                    continue
            jac[:, k] = (m_hi.radius_unchecked(theta) - m_lo.radius_unchecked(theta)) / (2 * h)
        step, *_ = np.linalg.lstsq(jac, -res, rcond=None)
        t = 1.0
        improved = False
        while t > 1e-6:
            cand = p + t * step
            c = _sse(variant, cand, theta, ref, hi)
            if c < cost:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        rel = (cost - c) / max(cost, 1e-300)
        p, cost = cand, c
        if rel < 1e-15:
            break
    return p, cost


def fit_model(
    reference: RadialModel,
    target: Variant | str,
    theta_range: tuple[float, float] = (0.0, math.radians(120.0)),
    n_samples: int = 241,
) -> FitResult:
    """Least-squares fit of ``target`` to ``reference`` on a uniform theta grid.

    Raises:
        DomainError: the range exceeds what ``target`` can represent (e.g. a
            rectilinear fit reaching 90 deg), or the reference domain.
        NonMonotoneError: reference not increasing over the range.
    """
    target = Variant(target)
    lo, hi = map(float, theta_range)
    if n_samples < 10:
        raise ValueError("n_samples must be >= 10")
    if not 0 <= lo < hi <= math.pi:
        raise DomainError(f"theta range [{lo}, {hi}] not inside [0, pi]", hi)
    if target is Variant.POLY4:
        raise ValueError("target must be one of the alternative models, not poly4")
    if target is Variant.RECTILINEAR and hi >= math.pi / 2:
        raise DomainError("rectilinear cannot represent theta >= 90 deg", math.pi / 2)
    if target is Variant.STEREOGRAPHIC and hi >= math.pi:
        raise DomainError("stereographic cannot represent theta = 180 deg", math.pi)
    if reference.theta_max < hi:
        reference = reference.with_theta_max(hi)

    theta = np.linspace(lo, hi, n_samples)
    ref = reference.radius_unchecked(theta)

    best, best_cost = None, math.inf
    for shape in _SHAPE_GRIDS[target]:
        unit = _make(target, (1.0, *shape), hi)
        if unit is None:
            continue
        g = unit.radius_unchecked(theta)
        f = float(g @ ref) / float(g @ g)
        if f <= 0:
            continue
        cost = _sse(target, (f, *shape), theta, ref, hi)
        if cost < best_cost:
            best, best_cost = (f, *shape), cost
    if best is None:
        raise DomainError(f"no {target.value} parameters valid on [0, {hi:.6g}] rad", hi)

    params, _ = _gauss_newton(target, best, theta, ref, hi)
    fitted = RadialModel(target, tuple(float(p) for p in params), hi)
    dev = fitted.radius_unchecked(theta) - ref
    return FitResult(
        fitted=fitted,
        theta_grid=theta,
        deviation=dev,
        max_abs_dev=float(np.max(np.abs(dev))),
        mean_abs_dev=float(np.mean(np.abs(dev))),
        sse=float(dev @ dev),
    )


def compare_models(
    reference: RadialModel,
    theta_range: tuple[float, float] = (0.0, math.radians(120.0)),
    n_samples: int = 241,
) -> dict[Variant, FitResult]:
    """Fit every alternative model; rectilinear is truncated below 89 deg."""
    lo, hi = theta_range
    out = {}
    for variant in (Variant.RECTILINEAR, Variant.STEREOGRAPHIC, Variant.UCM, Variant.EUCM):
        rng = (lo, hi)
        note = ""
        if variant is Variant.RECTILINEAR and hi >= RECTILINEAR_LIMIT:
            rng = (lo, RECTILINEAR_LIMIT)
            n = max(10, int(round(n_samples * (RECTILINEAR_LIMIT - lo) / (hi - lo))))
            note = f"truncated to theta < 89 deg (requested {math.degrees(hi):.1f} deg)"
        else:
            n = n_samples
        res = fit_model(reference, variant, rng, n)
        if note:
            res = FitResult(res.fitted, res.theta_grid, res.deviation, res.max_abs_dev,
                            res.mean_abs_dev, res.sse, note)
        out[variant] = res
    return out


def export_curves(
    models: Sequence[RadialModel],
    theta_range: tuple[float, float],
    n_samples: int,
    names: Sequence[str] | None = None,
) -> tuple[list[str], np.ndarray]:
    """Tabulate r(theta) for several models.

    Returns a header and an ``(n_samples, 1 + len(models))`` array whose first
    column is theta in degrees. Samples beyond a model's ``theta_max`` are NaN.
    """
    names = list(names) if names is not None else [m.variant.value for m in models]
    if len(names) != len(models):
        raise ValueError("names and models differ in length")
    theta = np.linspace(theta_range[0], theta_range[1], n_samples)
    cols = [np.degrees(theta)]
    for m in models:
        inside = theta <= m.theta_max + 1e-12
        r = np.full_like(theta, np.nan)
        r[inside] = m.radius_unchecked(theta[inside])
        cols.append(r)
    return ["theta_deg", *[f"r_{n}_px" for n in names]], np.column_stack(cols)


def write_curves_csv(path: str | Path, header: Sequence[str], table: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in table:
            w.writerow(["NaN" if math.isnan(v) else repr(float(v)) for v in row])
