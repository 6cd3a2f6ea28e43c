"""Deterministic preprocessing from a stored volume to a model-ready sub-volume."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._accel import njit, pick
from .records import CATEGORICAL_FIELDS, CONTINUOUS_FIELDS, VOCAB, ClinicalRecord, LesionSample
from .volume import LPS, Volume3D

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    pass


class UnknownCategoryError(ValueError):
    pass


# -- external-tool hooks -------------------------------------------------

def bias_field_correct(vol: Volume3D) -> Volume3D:
    log.debug("bias-field correction: identity pass-through")
    return vol


def register_to_atlas(vol: Volume3D) -> Volume3D:
    log.debug("atlas registration: identity pass-through")
    return vol


def skull_strip(vol: Volume3D) -> Volume3D:
    log.debug("skull stripping: identity pass-through")
    return vol


# -- geometry ------------------------------------------------------------

def reorient_lps(vol: Volume3D) -> Volume3D:
    """Permute/flip voxel axes so the array is stored in LPS order."""
    if vol.orientation == LPS:
        return vol
    src_axis = [None] * 3
    for i, code in enumerate(vol.orientation):
        src_axis[abs(code) - 1] = i
    data = np.transpose(vol.voxels, src_axis)
    spacing = tuple(vol.spacing[i] for i in src_axis)
    A = vol.affine()
    corner = np.zeros(3)
    for out_ax, i in enumerate(src_axis):
        if vol.orientation[i] < 0:
            data = np.flip(data, axis=out_ax)
            corner[i] = vol.dims[i] - 1
    origin = tuple(A[:3, :3] @ corner + A[:3, 3])
    return Volume3D(np.ascontiguousarray(data), spacing, LPS, origin, dict(vol.meta))


def _axis_coords(n_in: int, n_out: int, step: float):
    """Input-index coordinates of the output samples along one axis."""
    x = np.arange(n_out, dtype=np.float64) * step
    return np.clip(x, 0.0, n_in - 1)


def _linear_along(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, data.shape[axis] - 1)
    w = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a * (1.0 - w) + b * w


def _trilinear_numpy(data, cx, cy, cz):
    out = _linear_along(data, 0, cx)
    out = _linear_along(out, 1, cy)
    return _linear_along(out, 2, cz)


@njit
def _trilinear_jit(data, cx, cy, cz):
    nx, ny, nz = data.shape
    out = np.empty((cx.shape[0], cy.shape[0], cz.shape[0]))
    for i in range(cx.shape[0]):
        x0 = int(np.floor(cx[i]))
        x1 = min(x0 + 1, nx - 1)
        wx = cx[i] - x0
        for j in range(cy.shape[0]):
            y0 = int(np.floor(cy[j]))
            y1 = min(y0 + 1, ny - 1)
            wy = cy[j] - y0
            for k in range(cz.shape[0]):
                z0 = int(np.floor(cz[k]))
                z1 = min(z0 + 1, nz - 1)
                wz = cz[k] - z0
                c00 = data[x0, y0, z0] * (1 - wx) + data[x1, y0, z0] * wx
                c10 = data[x0, y1, z0] * (1 - wx) + data[x1, y1, z0] * wx
                c01 = data[x0, y0, z1] * (1 - wx) + data[x1, y0, z1] * wx
                c11 = data[x0, y1, z1] * (1 - wx) + data[x1, y1, z1] * wx
                c0 = c00 * (1 - wy) + c10 * wy
                c1 = c01 * (1 - wy) + c11 * wy
                out[i, j, k] = c0 * (1 - wz) + c1 * wz
    return out


trilinear = pick(_trilinear_jit, _trilinear_numpy)


def resample_isotropic(vol: Volume3D, target: float = 1.0, mode: str = "trilinear") -> Volume3D:
    """Resample onto an isotropic ``target`` mm grid anchored at voxel 0."""
    if not target > 0:
        raise ValueError("target spacing must be positive")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if all(s == target for s in vol.spacing):
        return vol
    dims_out = [max(1, int(round(d * s / target))) for d, s in zip(vol.dims, vol.spacing)]
    coords = [_axis_coords(d, n, target / s) for d, n, s in zip(vol.dims, dims_out, vol.spacing)]
    if mode == "nearest":
        idx = [np.floor(c + 0.5).astype(np.int64) for c in coords]
        data = vol.voxels[np.ix_(*idx)]
    else:
        data = trilinear(np.ascontiguousarray(vol.voxels), *coords)
    return Volume3D(data, (target,) * 3, vol.orientation, vol.origin, dict(vol.meta))


def crop_bounds(center, side: int):
    lo = [int(c) - side // 2 for c in center]
    return [(l, l + side) for l in lo]


def crop_subvolume(vol: Volume3D, center, side: int = 64) -> Volume3D:
    """Cut a ``side``^3 cube around ``center``; out-of-volume voxels are 0."""
    center = [int(c) for c in center]
    if any(not 0 <= c < d for c, d in zip(center, vol.dims)):
        raise ValueError(f"crop center {tuple(center)} outside volume {vol.dims}")
    out = np.zeros((side, side, side))
    src, dst = [], []
    for (lo, hi), d in zip(crop_bounds(center, side), vol.dims):
        a, b = max(lo, 0), min(hi, d)
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[tuple(dst)] = vol.voxels[tuple(src)]
    A = vol.affine()
    start = np.array([lo for lo, _ in crop_bounds(center, side)], dtype=float)
    origin = tuple(A[:3, :3] @ start + A[:3, 3])
    return Volume3D(out, vol.spacing, vol.orientation, origin, dict(vol.meta))


def zscore(vol: Volume3D) -> Volume3D:
    """Whole-volume z-score with the population standard deviation."""
    v = vol.voxels
    if v.min() == v.max():
        raise DegenerateInputError("cannot z-score a constant volume")
    mu = v.mean()
    sd = v.std()
    return vol.with_voxels((v - mu) / sd)


def mask_center(mask: Volume3D):
    idx = np.argwhere(mask.voxels > 0)
    if len(idx) == 0:
        raise DegenerateInputError("mask has no foreground")
    return tuple(int(c) for c in np.floor(idx.mean(axis=0) + 0.5))


def assemble_channels(image: Volume3D, mask: Volume3D, channels: int = 2) -> np.ndarray:
    """Stack into ``(C, S, S, S)``: channel 0 image, channel 1 mask.

    ``channels=1`` gives the image-only input (mask channel omitted).
    """
    if not image.same_grid(mask):
        raise ValueError(f"image {image.dims} and mask {mask.dims} grids differ")
    if channels == 1:
        return image.voxels[None].copy()
    if channels != 2:
        raise ValueError("channels must be 1 or 2")
    return np.stack([image.voxels, mask.voxels])


def preprocess_sample(sample: LesionSample, side: int, target: float = 1.0,
                      normalize: bool = True) -> LesionSample:
    """Run the full chain and return the cropped sample (z-scored unless ``normalize=False``)."""
    img = skull_strip(register_to_atlas(bias_field_correct(reorient_lps(sample.image))))
    msk = reorient_lps(sample.mask)
    img = resample_isotropic(img, target, "trilinear")
    msk = resample_isotropic(msk, target, "nearest")
    center = mask_center(msk)
    img = crop_subvolume(img, center, side)
    if normalize:
        img = zscore(img)
    msk = crop_subvolume(msk, center, side)
    return LesionSample(sample.id, img, msk, sample.label, sample.clinical)


# -- clinical encoding ---------------------------------------------------

@dataclass
class ClinicalStats:
    mean: dict
    std: dict

    def to_dict(self):
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["mean"]), dict(d["std"]))


def fit_clinical_stats(records) -> ClinicalStats:
    """Mean and population std of continuous fields over the training records."""
    mean, std = {}, {}
    for f in CONTINUOUS_FIELDS:
        x = np.array([getattr(r, f) for r in records], dtype=float)
        mean[f] = float(x.mean())
        sd = float(x.std())
        std[f] = sd if sd > 0 else 1.0
    return ClinicalStats(mean, std)


def clinical_columns(vocab=VOCAB) -> list[str]:
    cols = list(CONTINUOUS_FIELDS)
    for f in CATEGORICAL_FIELDS:
        cols += [f"{f}={v}" for v in vocab[f]]
    return cols


def encode_clinical(rec: ClinicalRecord, vocab, stats: ClinicalStats) -> np.ndarray:
    """Standardized continuous fields followed by one-hot categoricals."""
    out = [(getattr(rec, f) - stats.mean[f]) / stats.std[f] for f in CONTINUOUS_FIELDS]
    for f in CATEGORICAL_FIELDS:
        value = getattr(rec, f)
        cats = vocab[f]
        if value not in cats:
            raise UnknownCategoryError(f"{f}={value!r} not in vocabulary {cats}")
        onehot = [0.0] * len(cats)
        onehot[cats.index(value)] = 1.0
        out += onehot
    return np.array(out)
