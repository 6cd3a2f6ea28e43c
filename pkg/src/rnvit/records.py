"""Per-lesion record types shared by the IO, preprocessing and phantom code."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .volume import Volume3D

PROGRESSION = 0
NECROSIS = 1

# Declared category vocabularies; order fixes the one-hot layout.
VOCAB = {
    "sex": ["female", "male"],
    "primary": ["nsclc", "breast", "melanoma", "sclc", "other"],
    "systemic": ["none", "chemo", "immuno", "targeted"],
}
CONTINUOUS_FIELDS = ("age", "recurrence_days")
CATEGORICAL_FIELDS = ("sex", "primary", "systemic")


@dataclass(frozen=True)
class ClinicalRecord:
    age: float
    sex: str
    primary: str
    systemic: str
    recurrence_days: float

    def __post_init__(self):
        if not self.age > 0:
            raise ValueError(f"age must be positive, got {self.age}")
        if not self.recurrence_days >= 0:
            raise ValueError(f"recurrence_days must be >= 0, got {self.recurrence_days}")


@dataclass(frozen=True, eq=False)
class LesionSample:
    id: str
    image: Volume3D
    mask: Volume3D
    label: Optional[int] = None
    clinical: Optional[ClinicalRecord] = None

    def __post_init__(self):
        if not self.image.same_grid(self.mask):
            raise ValueError(
                f"{self.id}: image {self.image.dims} and mask {self.mask.dims} are on different grids"
            )
        m = self.mask.voxels
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{self.id}: mask must be binary")
        if not m.any():
            raise ValueError(f"{self.id}: mask has no foreground voxels")
        if self.label not in (None, PROGRESSION, NECROSIS):
            raise ValueError(f"{self.id}: label must be 0 or 1, got {self.label}")
