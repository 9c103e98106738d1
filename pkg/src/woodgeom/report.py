"""Run configuration, JSON reports and atomic file output."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import __version__

RNG_NAME = "numpy.random.default_rng (PCG64)"


@dataclass
class RunConfig:
    subcommand: str
    inputs: dict[str, str]
    output: str
    params: dict[str, Any]
    seed: int = 0
    threads: int = 1

    def missing_inputs(self) -> list[str]:
        return [p for p in self.inputs.values() if p is not None and not Path(p).is_file()]


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, tuples become lists, numpy scalars unwrap."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item) and getattr(obj, "ndim", 1) == 0:
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class EvalReport:
    subcommand: str
    config: dict[str, Any]
    results: dict[str, Any]
    timing: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    rng: dict[str, Any] = field(default_factory=dict)
    tool: str = "woodgeom"
    version: str = __version__

    def __post_init__(self) -> None:
        self.config = _clean(self.config)
        self.results = _clean(self.results)
        self.timing = _clean(self.timing)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write via a temporary file in the same directory, then rename into place."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_save(path: str | Path, writer) -> None:
    """Run ``writer(tmp_path)`` and rename the result to ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
