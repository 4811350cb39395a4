"""Optical-density colour deconvolution for H&E images.

Images are float arrays of shape (H, W, 3) with intensities in [0, 1].  Stain
vectors live in optical-density (OD) RGB space, one per row of a 3x3 matrix
ordered (hematoxylin, eosin, residual).  Concentrations ``c`` relate to OD by
``od = c @ M``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DecompositionError, ParameterError

OD_FLOOR = 1.0 / 255.0

HEMATOXYLIN_OD = (0.650, 0.704, 0.286)
EOSIN_OD = (0.072, 0.990, 0.105)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ParameterError("stain vector has zero norm")
    return v / n


@dataclass(frozen=True)
class StainMatrix:
    """Three unit OD vectors (hematoxylin, eosin, residual) as rows."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ParameterError(f"stain matrix must be 3x3, got {m.shape}")
        m = np.stack([_unit(row) for row in m])
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_vectors(cls, hematoxylin, eosin, residual=None) -> "StainMatrix":
        h, e = _unit(hematoxylin), _unit(eosin)
        if residual is None:
            residual = np.cross(h, e)
        return cls(np.stack([h, e, _unit(residual)]))

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.matrix[0]

    @property
    def eosin(self) -> np.ndarray:
        return self.matrix[1]

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix))

    def inverse(self) -> np.ndarray:
        cond = self.condition_number
        if not np.isfinite(cond) or cond > 1e12:
            raise DecompositionError(f"stain matrix is singular (condition number {cond:.3g})")
        return np.linalg.inv(self.matrix)

    @classmethod
    def load(cls, path) -> "StainMatrix":
        """Read a row-major, whitespace-separated 3x3 text file."""
        path = Path(path)
        if not path.exists():
            raise DataError(f"stain matrix file not found: {path}")
        values = np.loadtxt(path, dtype=np.float64)
        if values.size != 9:
            raise ParameterError(f"{path}: expected 9 values, found {values.size}")
        return cls(values.reshape(3, 3))

    def save(self, path) -> None:
        np.savetxt(path, self.matrix, fmt="%.10f")


DEFAULT_STAIN = StainMatrix.from_vectors(HEMATOXYLIN_OD, EOSIN_OD)


@dataclass
class ConcentrationMap:
    """Per-pixel stain concentrations, channels ordered like the stain matrix rows."""

    concentrations: np.ndarray
    stain: StainMatrix
    clipped: bool = True

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.concentrations[..., 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.concentrations[..., 1]


def rgb_to_od(image) -> np.ndarray:
    """Beer-Lambert transform ``-log10(I)`` with intensities floored at 1/255."""
    image = np.asarray(image, dtype=np.float64)
    return -np.log10(np.clip(image, OD_FLOOR, 1.0))


def od_to_rgb(od) -> np.ndarray:
    return np.power(10.0, -np.asarray(od, dtype=np.float64))


def deconvolve(od, stain: StainMatrix = DEFAULT_STAIN, clip: bool = True) -> ConcentrationMap:
    """Solve ``od = c @ M`` for c.  Negative concentrations are zeroed when ``clip``."""
    inv = stain.inverse()
    c = np.asarray(od, dtype=np.float64) @ inv
    if clip:
        c = np.maximum(c, 0.0)
    return ConcentrationMap(c, stain, clipped=clip)


def hematoxylin_target(image, stain: StainMatrix = DEFAULT_STAIN) -> np.ndarray:
    """Hematoxylin concentration min-max scaled to [0, 1] within the image.

    A constant concentration map has no range to scale and maps to zeros.
    """
    h = deconvolve(rgb_to_od(image), stain).hematoxylin
    lo, hi = h.min(), h.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)
