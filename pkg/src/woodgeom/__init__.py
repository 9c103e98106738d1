"""Fisheye camera geometry and perception-evaluation toolkit."""

__version__ = "0.1.0"

from .fisheye_models import (  # noqa: E402
    IntrinsicCalibration,
    RadialModel,
    Variant,
    eval_radius,
    load_calibration,
    project,
    theta_from_radius,
    unproject,
)
from .box3d_metrics import Box3D, SrtWeights, iou_3d, srt_score  # noqa: E402


def fixture_path(name: str = "fisheye_190.json"):
    """Path of a data file shipped with the package."""
    from importlib.resources import files

    return files(__name__).joinpath("data", name)


__all__ = [
    "__version__",
    "Box3D",
    "IntrinsicCalibration",
    "RadialModel",
    "SrtWeights",
    "Variant",
    "eval_radius",
    "fixture_path",
    "iou_3d",
    "load_calibration",
    "project",
    "srt_score",
    "theta_from_radius",
    "unproject",
]
