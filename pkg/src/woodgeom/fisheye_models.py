"""Radial fisheye projection models.

Every model maps the incident angle ``theta`` of a ray (angle to the optical
axis, +z) to an image radius in pixels measured from the principal point:

    poly4          r = a1*t + a2*t^2 + a3*t^3 + a4*t^4
    rectilinear    r = f * tan(t)
    stereographic  r = 2f * tan(t / 2)
    ucm            r = f * sin(t) / (xi + cos(t))
    eucm           r = f * sin(t) / (alpha*d + (1 - alpha)*cos(t)),
                   d = sqrt(beta*sin(t)^2 + cos(t)^2)

Pixel convention: x right, y down, z forward; unit aspect ratio and no
tangential terms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "Variant",
    "RadialModel",
    "IntrinsicCalibration",
    "DomainError",
    "OutOfImageError",
    "NonMonotoneError",
    "eval_radius",
    "eval_radius_derivative",
    "theta_from_radius",
    "project",
    "project_points",
    "unproject",
    "unproject_pixels",
    "calibration_from_dict",
    "calibration_to_dict",
    "load_calibration",
]

_THETA_EPS = 1e-12


class DomainError(ValueError):
    """Incident angle outside the model's valid domain."""

    def __init__(self, message: str, theta_max: float | None = None):
        super().__init__(message)
        self.theta_max = theta_max


class OutOfImageError(DomainError):
    """Image radius beyond r(theta_max)."""


class NonMonotoneError(ValueError):
    """Radial polynomial has dr/dtheta <= 0 inside the requested domain."""

    def __init__(self, message: str, theta: float):
        super().__init__(message)
        self.theta = theta


class Variant(str, Enum):
    POLY4 = "poly4"
    RECTILINEAR = "rectilinear"
    STEREOGRAPHIC = "stereographic"
    UCM = "ucm"
    EUCM = "eucm"


_N_PARAMS = {
    Variant.POLY4: 4,
    Variant.RECTILINEAR: 1,
    Variant.STEREOGRAPHIC: 1,
    Variant.UCM: 2,
    Variant.EUCM: 3,
}


def _poly4_derivative_root(coeffs: Sequence[float], upper: float = math.pi) -> float:
    """Smallest theta in (0, upper] where a1 + 2a2 t + 3a3 t^2 + 4a4 t^3 <= 0, else inf."""
    a1, a2, a3, a4 = coeffs
    if a1 <= 0:
        return 0.0
    deriv = np.array([4 * a4, 3 * a3, 2 * a2, a1], dtype=float)
    deriv = np.trim_zeros(deriv, "f")
    roots = np.roots(deriv) if deriv.size > 1 else np.array([])
    real = [
        float(r.real)
        for r in roots
        if abs(r.imag) <= 1e-12 * max(1.0, abs(r.real)) and 0 < r.real <= upper
    ]
    return min(real) if real else math.inf


def _eucm_limit(alpha: float, beta: float) -> float:
    # valid iff cos(t)/d > -w, w = min(alpha/(1-alpha), (1-alpha)/alpha)
    if alpha in (0.0, 1.0):
        return math.pi / 2
    w = min(alpha / (1 - alpha), (1 - alpha) / alpha)
    if w >= 1.0:
        return math.pi
    return math.pi - math.atan(math.sqrt((1 - w * w) / (w * w * beta)))


@dataclass(frozen=True)
class RadialModel:
    """Incident-angle to image-radius mapping.

    ``params`` per variant: poly4 ``(a1, a2, a3, a4)`` in px/rad^k,
    rectilinear/stereographic ``(f,)``, ucm ``(f, xi)``, eucm
    ``(f, alpha, beta)``. ``theta_max`` is the validated upper end of the
    domain; when omitted it is set just below the model's own limit.
    """

    variant: Variant
    params: tuple[float, ...]
    theta_max: float | None = None

    def __post_init__(self) -> None:
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if len(params) != _N_PARAMS[variant]:
            raise ValueError(
                f"{variant.value} takes {_N_PARAMS[variant]} parameters, got {len(params)}"
            )
        if not all(math.isfinite(p) for p in params):
            raise ValueError("model parameters must be finite")
        self._check_params()
        limit = self.domain_limit()
        if self.theta_max is None:
            tmax = min(limit, math.pi)
            if variant is not Variant.POLY4 or limit <= math.pi:
                # open limits: tan / sphere singularities sit exactly at the limit
                tmax = tmax * (1 - 1e-9)
            object.__setattr__(self, "theta_max", tmax)
        else:
            tmax = float(self.theta_max)
            object.__setattr__(self, "theta_max", tmax)
            if not 0 < tmax <= math.pi:
                raise DomainError(f"theta_max={tmax} outside (0, pi]", tmax)
            if tmax >= limit:
                if variant is Variant.POLY4:
                    raise NonMonotoneError(
                        f"poly4 dr/dtheta <= 0 at theta={limit:.6g} rad, before theta_max={tmax:.6g}",
                        limit,
                    )
                raise DomainError(
                    f"{variant.value} is only valid for theta < {limit:.6g} rad, got theta_max={tmax:.6g}",
                    limit,
                )

    def _check_params(self) -> None:
        p = self.params
        if self.variant in (Variant.RECTILINEAR, Variant.STEREOGRAPHIC, Variant.UCM, Variant.EUCM):
            if p[0] <= 0:
                raise ValueError("focal length must be positive")
        if self.variant is Variant.UCM and p[1] < 0:
            raise ValueError("ucm xi must be >= 0")
        if self.variant is Variant.EUCM:
            if not 0 <= p[1] <= 1:
                raise ValueError("eucm alpha must lie in [0, 1]")
            if p[2] <= 0:
                raise ValueError("eucm beta must be > 0")
        if self.variant is Variant.POLY4 and p[0] <= 0:
            raise NonMonotoneError("poly4 a1 must be > 0 (dr/dtheta at 0)", 0.0)

    def domain_limit(self) -> float:
        """Supremum of angles where r is defined and strictly increasing."""
        p = self.params
        if self.variant is Variant.POLY4:
            return _poly4_derivative_root(p)
        if self.variant is Variant.RECTILINEAR:
            return math.pi / 2
        if self.variant is Variant.STEREOGRAPHIC:
            return math.pi
        if self.variant is Variant.UCM:
            xi = p[1]
            if xi == 0:
                return math.pi / 2
            return math.acos(-min(xi, 1.0 / xi))
        return _eucm_limit(p[1], p[2])

    def with_theta_max(self, theta_max: float) -> "RadialModel":
        return RadialModel(self.variant, self.params, theta_max)

    @property
    def r_max(self) -> float:
        return float(_radius(self, np.asarray(self.theta_max)))

    # raw evaluation without the domain gate; used by fitting and inversion
    def radius_unchecked(self, theta):
        return _radius(self, np.asarray(theta, dtype=float))


def _radius(model: RadialModel, t: np.ndarray) -> np.ndarray:
    p = model.params
    v = model.variant
    if v is Variant.POLY4:
        a1, a2, a3, a4 = p
        return t * (a1 + t * (a2 + t * (a3 + t * a4)))
    if v is Variant.RECTILINEAR:
        return p[0] * np.tan(t)
    if v is Variant.STEREOGRAPHIC:
        return 2 * p[0] * np.tan(t / 2)
    s, c = np.sin(t), np.cos(t)
    if v is Variant.UCM:
        return p[0] * s / (p[1] + c)
    f, alpha, beta = p
    d = np.sqrt(beta * s * s + c * c)
    return f * s / (alpha * d + (1 - alpha) * c)


def _dradius(model: RadialModel, t: np.ndarray) -> np.ndarray:
    p = model.params
    v = model.variant
    if v is Variant.POLY4:
        a1, a2, a3, a4 = p
        return a1 + t * (2 * a2 + t * (3 * a3 + t * 4 * a4))
    if v is Variant.RECTILINEAR:
        return p[0] / np.cos(t) ** 2
    if v is Variant.STEREOGRAPHIC:
        return p[0] / np.cos(t / 2) ** 2
    s, c = np.sin(t), np.cos(t)
    if v is Variant.UCM:
        xi = p[1]
        return p[0] * (xi * c + 1) / (xi + c) ** 2
    f, alpha, beta = p
    d = np.sqrt(beta * s * s + c * c)
    den = alpha * d + (1 - alpha) * c
    return f * ((1 - alpha) + alpha * c / d) / den**2


def _as_output(x: np.ndarray, scalar: bool):
    return float(x) if scalar else x


def eval_radius(model: RadialModel, theta):
    """Image radius in px for incident angle(s) ``theta`` in radians.

    Raises:
        DomainError: if any theta lies outside ``[0, model.theta_max]``.
    """
    t = np.asarray(theta, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > model.theta_max + _THETA_EPS):
        raise DomainError(
            f"theta outside [0, {model.theta_max:.9g}] rad for {model.variant.value}",
            model.theta_max,
        )
    return _as_output(_radius(model, np.minimum(t, model.theta_max)), t.ndim == 0)


def eval_radius_derivative(model: RadialModel, theta):
    t = np.asarray(theta, dtype=float)
    return _as_output(_dradius(model, t), t.ndim == 0)


def _invert(model: RadialModel, r: np.ndarray, theta_hi: float) -> np.ndarray:
    """Bisection on [0, theta_hi] followed by up to 3 Newton polish steps."""
    lo = np.zeros_like(r)
    hi = np.full_like(r, theta_hi)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        above = _radius(model, mid) > r
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    t = 0.5 * (lo + hi)
    for _ in range(3):
        step = (_radius(model, t) - r) / _dradius(model, t)
        t = np.clip(t - step, lo, hi)
    return np.where(r == 0, 0.0, t)


def theta_from_radius(model: RadialModel, radius):
    """Inverse of :func:`eval_radius` on the model's validated domain.

    Raises:
        OutOfImageError: radius negative or beyond ``r(theta_max)``.
    """
    r = np.asarray(radius, dtype=float)
    r_max = model.r_max
    if np.any(~np.isfinite(r)) or np.any(r < 0) or np.any(r > r_max * (1 + 1e-12)):
        raise OutOfImageError(
            f"radius outside [0, {r_max:.9g}] px (theta_max={model.theta_max:.9g} rad)",
            model.theta_max,
        )
    t = _invert(model, np.atleast_1d(np.minimum(r, r_max)), model.theta_max)
    return _as_output(t.reshape(r.shape), r.ndim == 0)


@dataclass(frozen=True)
class IntrinsicCalibration:
    """Fisheye intrinsics: radial model, principal point and image size.

    Projection is gated at ``fov_deg / 2``; the radial model must be valid at
    least that far.
    """

    model: RadialModel
    cx: float
    cy: float
    width: int
    height: int
    fov_deg: float
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if not 0 < self.fov_deg <= 360:
            raise ValueError("fov_deg must lie in (0, 360]")
        if self.model.theta_max + _THETA_EPS < self.theta_max:
            raise DomainError(
                f"model valid to {self.model.theta_max:.6g} rad but fov needs {self.theta_max:.6g}",
                self.model.theta_max,
            )

    @property
    def theta_max(self) -> float:
        """Angular gate of the lens: half the field of view, radians."""
        return math.radians(self.fov_deg) / 2

    @property
    def r_max(self) -> float:
        return float(_radius(self.model, np.asarray(self.theta_max)))

    @property
    def gate_model(self) -> RadialModel:
        return self.model.with_theta_max(self.theta_max)


def project_points(cal: IntrinsicCalibration, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of camera-frame points ``(N, 3)``.

    Returns:
        ``(uv, valid)``: pixel coordinates ``(N, 2)`` (NaN where invalid) and a
        boolean mask, False for rays beyond the lens field of view.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.hypot(x, y)
    if np.any((rho == 0) & (z == 0)):
        raise ValueError("cannot project a zero-length point")
    theta = np.arctan2(rho, z)
    valid = theta <= cal.theta_max + _THETA_EPS
    r = np.where(valid, _radius(cal.model, np.where(valid, theta, 0.0)), np.nan)
    safe = np.where(rho > 0, rho, 1.0)
    u = np.where(rho > 0, cal.cx + r * x / safe, cal.cx)
    v = np.where(rho > 0, cal.cy + r * y / safe, cal.cy)
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def project(cal: IntrinsicCalibration, point) -> tuple[float, float] | None:
    """Project a single camera-frame point; ``None`` when outside the FOV."""
    uv, valid = project_points(cal, point)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def unproject_pixels(cal: IntrinsicCalibration, uv) -> np.ndarray:
    """Unit rays ``(N, 3)`` for pixels ``(N, 2)``.

    Raises:
        OutOfImageError: any pixel lies farther from the principal point than
            ``r(theta_max)``.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    dx = uv[:, 0] - cal.cx
    dy = uv[:, 1] - cal.cy
    r = np.hypot(dx, dy)
    theta = np.asarray(theta_from_radius(cal.gate_model, r))
    safe = np.where(r > 0, r, 1.0)
    s = np.sin(theta)
    rays = np.stack(
        [np.where(r > 0, s * dx / safe, 0.0), np.where(r > 0, s * dy / safe, 0.0), np.cos(theta)],
        axis=-1,
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def unproject(cal: IntrinsicCalibration, pixel) -> np.ndarray:
    return unproject_pixels(cal, pixel)[0]


def calibration_from_dict(data: dict[str, Any]) -> IntrinsicCalibration:
    """Build and validate a calibration from its JSON object form.

    ``theta_max_deg`` is optional and defaults to ``fov_deg / 2``.
    """
    required = ("model", "coeffs", "cx", "cy", "width", "height", "fov_deg")
    missing = [k for k in required if k not in data]
    if missing:
        raise ValueError(f"calibration missing fields: {', '.join(missing)}")
    try:
        variant = Variant(str(data["model"]).lower())
    except ValueError:
        raise ValueError(f"unknown model {data['model']!r}") from None
    fov_deg = float(data["fov_deg"])
    theta_max = math.radians(float(data.get("theta_max_deg", fov_deg / 2)))
    model = RadialModel(variant, tuple(data["coeffs"]), theta_max)
    extra = {k: v for k, v in data.items() if k not in required and k != "theta_max_deg"}
    return IntrinsicCalibration(
        model=model,
        cx=float(data["cx"]),
        cy=float(data["cy"]),
        width=int(data["width"]),
        height=int(data["height"]),
        fov_deg=fov_deg,
        extra=extra,
    )


def calibration_to_dict(cal: IntrinsicCalibration) -> dict[str, Any]:
    out = {
        "model": cal.model.variant.value,
        "coeffs": list(cal.model.params),
        "cx": cal.cx,
        "cy": cal.cy,
        "width": cal.width,
        "height": cal.height,
        "fov_deg": cal.fov_deg,
    }
    if abs(cal.model.theta_max - cal.theta_max) > 1e-12:
        out["theta_max_deg"] = math.degrees(cal.model.theta_max)
    out.update(cal.extra)
    return out


def load_calibration(path: str | Path) -> IntrinsicCalibration:
    with open(path) as f:
        return calibration_from_dict(json.load(f))
