"""Seeded synthetic cohort of necrosis-like and progression-like lesions.

Progression: thick, nodular, mostly solid enhancement. Necrosis: a thin
enhancing rim with an open angular gap around a dark, bubbly interior.
Both sit in a smooth background with Gaussian noise; 30% of samples carry a
bright sheet near one face that is independent of the class.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .imaging_io import write_raw_cohort
from .records import NECROSIS, PROGRESSION, VOCAB, ClinicalRecord, LesionSample
from .rng import stream
from .volume import Volume3D


@dataclass(frozen=True)
class PhantomSpec:
    n_unlabeled: int = 512
    n_labeled: int = 100
    class_balance: float = 0.34
    volume_side: int = 32
    noise_sigma: float = 0.2
    seed: int = 2024
    distractor_rate: float = 0.3

    def __post_init__(self):
        if self.n_unlabeled < 0 or self.n_labeled < 0:
            raise ValueError("sample counts must be >= 0")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.volume_side < 8:
            raise ValueError("volume_side must be at least 8")

    def to_dict(self):
        return asdict(self)


def _grid(S):
    ax = np.arange(S, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _background(rng, S, X, Y, Z):
    bg = np.full((S, S, S), 0.3)
    for _ in range(3):
        k = rng.uniform(0.5, 2.0, size=3) * 2 * math.pi / S
        bg += 0.05 * np.sin(k[0] * X + k[1] * Y + k[2] * Z + rng.uniform(0, 2 * math.pi))
    return bg


def _distractor(rng, S, X, Y, Z):
    """Bright 2-voxel sheet parallel to a random face, 1-3 voxels inside it."""
    axis = int(rng.integers(3))
    near_low = bool(rng.integers(2))
    depth = int(rng.integers(1, 3))
    coord = (X, Y, Z)[axis]
    lo = depth if near_low else S - depth - 2
    return ((coord >= lo) & (coord < lo + 2)).astype(np.float64)


def generate_lesion(label: int, rng: np.random.Generator, side: int = 32,
                    noise_sigma: float = 0.2, distractor: bool | None = None,
                    sample_id: str = "lesion") -> LesionSample:
    """Draw one lesion sub-volume of edge ``side`` (1 mm isotropic, LPS)."""
    if label not in (PROGRESSION, NECROSIS):
        raise ValueError(f"label must be 0 or 1, got {label}")
    S = side
    X, Y, Z = _grid(S)
    center = S / 2 - 0.5 + rng.uniform(-1.5, 1.5, size=3)
    r0 = S * rng.uniform(0.16, 0.24)
    radii = r0 * rng.uniform(0.85, 1.15, size=3)
    d = np.stack([X - center[0], Y - center[1], Z - center[2]])
    dist = np.sqrt((d ** 2).sum(axis=0)) + 1e-9
    u = d / dist
    # normalized ellipsoidal radius: 1 on the lesion surface
    rho = np.sqrt(((d / radii[:, None, None, None]) ** 2).sum(axis=0))

    bumps = np.zeros_like(rho)
    n_bumps = 4 if label == PROGRESSION else 2
    amp = 0.16 if label == PROGRESSION else 0.06
    for _ in range(n_bumps):
        dvec = _unit(rng)
        cosang = np.tensordot(dvec, u, axes=1)
        bumps += amp * rng.uniform(0.5, 1.0) * np.exp((cosang - 1.0) / 0.15)
    rho = rho / (1.0 + bumps)
    support = rho <= 1.0

    gain = rng.uniform(0.85, 1.15)
    img = _background(rng, S, X, Y, Z)
    if label == PROGRESSION:
        # thick enhancing shell around a partly enhancing core
        thickness = rng.uniform(0.45, 0.65)
        shell = support & (rho > 1.0 - thickness)
        img[support & ~shell] = rng.uniform(0.55, 0.8)
        img[shell] = 1.0
    else:
        thickness = rng.uniform(0.15, 0.25)
        rim = support & (rho > 1.0 - thickness)
        gap_dir = _unit(rng)
        half_gap = math.radians(rng.uniform(20.0, 90.0)) / 2.0
        in_gap = np.tensordot(gap_dir, u, axes=1) > math.cos(half_gap)
        interior = support & ~rim
        img[interior] = 0.2
        for _ in range(int(rng.integers(2, 5))):
            bc = center + _unit(rng) * r0 * rng.uniform(0.0, 0.5)
            br = r0 * rng.uniform(0.2, 0.35)
            bd = np.sqrt((X - bc[0]) ** 2 + (Y - bc[1]) ** 2 + (Z - bc[2]) ** 2)
            wall = interior & (np.abs(bd - br) < 0.6)
            img[wall] = 0.45
        img[rim & ~in_gap] = 1.0
        img[rim & in_gap] = 0.3
    img = img * gain

    if distractor:
        sheet = _distractor(rng, S, X, Y, Z) * ~support
        img = np.where(sheet > 0, 1.2 * gain, img)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)

    mask = support.astype(np.float64)
    meta = {"distractor": bool(distractor)}
    image = Volume3D(img, meta=meta)
    return LesionSample(sample_id, image, Volume3D(mask, meta=dict(meta)), label)


# -- clinical records ----------------------------------------------------

_PRIMARY_P = [0.50, 0.33, 0.07, 0.06, 0.04]
_SYSTEMIC_P = {PROGRESSION: [0.30, 0.35, 0.20, 0.15], NECROSIS: [0.20, 0.30, 0.35, 0.15]}
# median recurrence time in days; the class shift is the main clinical signal
_RECURRENCE_MEDIAN = {PROGRESSION: 420.0, NECROSIS: 290.0}


def generate_clinical(label: int, rng: np.random.Generator) -> ClinicalRecord:
    age = float(np.clip(np.round(rng.normal(57.0, 10.0), 1), 27.0, 85.0))
    sex = VOCAB["sex"][int(rng.random() < 0.4)]
    primary = VOCAB["primary"][int(rng.choice(5, p=_PRIMARY_P))]
    systemic = VOCAB["systemic"][int(rng.choice(4, p=_SYSTEMIC_P[label]))]
    rec = float(np.round(_RECURRENCE_MEDIAN[label] * math.exp(rng.normal(0.0, 0.6)), 1))
    return ClinicalRecord(age, sex, primary, systemic, rec)


# -- cohorts -------------------------------------------------------------

def necrosis_count(n: int, balance: float) -> int:
    return int(math.floor(balance * n + 0.5))


def _labels(spec: PhantomSpec, n: int, purpose: str) -> np.ndarray:
    k = necrosis_count(n, spec.class_balance)
    labels = np.array([NECROSIS] * k + [PROGRESSION] * (n - k))
    return stream(spec.seed, purpose, "labels").permutation(labels)


def _distractor_flags(spec, n, purpose):
    return stream(spec.seed, purpose, "distractor").random(n) < spec.distractor_rate


def generate_cohort(spec: PhantomSpec):
    """Return ``(unlabeled, labeled)`` sample lists.

    Unlabeled samples carry masks only (no label, no clinical record). Each
    sample draws from its own stream keyed by (seed, set, index).
    """
    unl_classes = _labels(spec, spec.n_unlabeled, "unlabeled")
    unl_dis = _distractor_flags(spec, spec.n_unlabeled, "unlabeled")
    unlabeled = []
    for i in range(spec.n_unlabeled):
        s = generate_lesion(int(unl_classes[i]), stream(spec.seed, "unlabeled", i),
                            spec.volume_side, spec.noise_sigma, bool(unl_dis[i]), f"u{i:04d}")
        unlabeled.append(LesionSample(s.id, s.image, s.mask, None, None))
    labels = _labels(spec, spec.n_labeled, "labeled")
    dis = _distractor_flags(spec, spec.n_labeled, "labeled")
    labeled = []
    for i in range(spec.n_labeled):
        rng = stream(spec.seed, "labeled", i)
        s = generate_lesion(int(labels[i]), rng, spec.volume_side, spec.noise_sigma,
                            bool(dis[i]), f"l{i:04d}")
        clin = generate_clinical(int(labels[i]), stream(spec.seed, "clinical", i))
        labeled.append(LesionSample(s.id, s.image, s.mask, int(labels[i]), clin))
    return unlabeled, labeled


def write_cohort(spec: PhantomSpec, out_dir) -> Path:
    """Generate and write ``unlabeled/`` and ``labeled/`` raw cohorts plus the phantom settings."""
    out_dir = Path(out_dir)
    unlabeled, labeled = generate_cohort(spec)
    write_raw_cohort(out_dir / "unlabeled", unlabeled)
    write_raw_cohort(out_dir / "labeled", labeled)
    meta = {"phantom_spec": spec.to_dict(),
            "distractor": {s.id: s.image.meta["distractor"] for s in unlabeled + labeled}}
    (out_dir / "phantom.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return out_dir
