"""The Volume3D grid type and orientation-code helpers.

Orientation codes describe where each array axis points in LPS space:
``+1``/``-1`` is toward Left/Right, ``+2``/``-2`` toward Posterior/Anterior,
``+3``/``-3`` toward Superior/Inferior. ``(1, 2, 3)`` is LPS, ``(-1, -2, 3)``
is RAS.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LPS = (1, 2, 3)
RAS = (-1, -2, 3)

_LETTERS = {1: "L", -1: "R", 2: "P", -2: "A", 3: "S", -3: "I"}
_FROM_LETTER = {v: k for k, v in _LETTERS.items()}


def orientation_from_string(s: str) -> tuple[int, int, int]:
    codes = tuple(_FROM_LETTER[c] for c in s.upper())
    check_orientation(codes)
    return codes


def orientation_to_string(codes) -> str:
    return "".join(_LETTERS[int(c)] for c in codes)


def check_orientation(codes) -> None:
    if len(codes) != 3 or sorted(abs(int(c)) for c in codes) != [1, 2, 3]:
        raise ValueError(f"orientation {tuple(codes)} is not a signed permutation of X,Y,Z")


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3D scalar grid. ``voxels`` is indexed ``[x, y, z]`` (x fastest on disk)."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[int, int, int] = LPS
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float64, copy=True)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"expected a non-empty 3D array, got shape {vox.shape}")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        orient = tuple(int(c) for c in self.orientation)
        check_orientation(orient)
        object.__setattr__(self, "orientation", orient)
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError("origin must have 3 components")
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    def affine(self) -> np.ndarray:
        """4x4 voxel-index -> LPS-mm affine."""
        A = np.zeros((4, 4))
        A[3, 3] = 1.0
        for i, code in enumerate(self.orientation):
            A[abs(code) - 1, i] = np.sign(code) * self.spacing[i]
        A[:3, 3] = self.origin
        return A

    def same_grid(self, other: "Volume3D") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing)
            and self.orientation == other.orientation
        )

    def with_voxels(self, voxels: np.ndarray) -> "Volume3D":
        return Volume3D(voxels, self.spacing, self.orientation, self.origin, dict(self.meta))

    def __repr__(self):
        return (
            f"Volume3D(dims={self.dims}, spacing={self.spacing}, "
            f"orientation={orientation_to_string(self.orientation)})"
        )
