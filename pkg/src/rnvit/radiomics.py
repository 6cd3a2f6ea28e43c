"""Masked-region radiomic features: first-order, shape and GLCM texture."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._accel import njit, pick
from .preprocess import clinical_columns, encode_clinical
from .records import VOCAB
from .volume import Volume3D

N_BINS = 32

FIRST_ORDER = ("mean", "median", "minimum", "maximum", "range", "variance", "skewness",
               "kurtosis", "energy", "entropy", "p10", "p90", "iqr")
SHAPE = ("volume", "surface_area", "sphericity", "max_diameter", "elongation", "flatness")
GLCM = ("contrast", "correlation", "joint_energy", "homogeneity", "joint_entropy")
RADIOMIC_COLUMNS = ([f"firstorder_{n}" for n in FIRST_ORDER] + [f"shape_{n}" for n in SHAPE]
                    + [f"glcm_{n}" for n in GLCM])

# the 13 unique 3D neighbour offsets (the other 13 are their negations)
DIRECTIONS = np.array([
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
], dtype=np.int64)


class FeatureError(ValueError):
    pass


def _arrays(image, mask):
    img = image.voxels if isinstance(image, Volume3D) else np.asarray(image, dtype=np.float64)
    m = mask.voxels if isinstance(mask, Volume3D) else np.asarray(mask)
    if img.shape != m.shape:
        raise FeatureError(f"image {img.shape} and mask {m.shape} shapes differ")
    m = m > 0
    if not m.any():
        raise FeatureError("empty mask")
    return img, m


def bin_edges(values: np.ndarray, bins: int = N_BINS) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    return np.linspace(lo, hi, bins + 1)


def quantize(values: np.ndarray, bins: int = N_BINS) -> np.ndarray:
    """Fixed bin count over [min, max] of ``values``; bin indices 0..bins-1."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64)
    q = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(q, 0, bins - 1)


# -- first order ---------------------------------------------------------

def first_order(image, mask, bins: int = N_BINS) -> dict:
    img, m = _arrays(image, mask)
    x = img[m]
    mean = float(x.mean())
    var = float(x.var())
    if var > 0:
        z = (x - mean) / np.sqrt(var)
        skew = float(np.mean(z ** 3))
        kurt = float(np.mean(z ** 4) - 3.0)
    else:
        skew = kurt = 0.0
    counts = np.bincount(quantize(x, bins), minlength=bins)
    p = counts[counts > 0] / x.size
    entropy = float(-(p * np.log2(p)).sum()) + 0.0
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    return {
        "mean": mean, "median": float(p50), "minimum": float(x.min()), "maximum": float(x.max()),
        "range": float(x.max() - x.min()), "variance": var, "skewness": skew, "kurtosis": kurt,
        "energy": float(np.sum(x * x)), "entropy": entropy,
        "p10": float(p10), "p90": float(p90), "iqr": float(p75 - p25),
    }


# -- shape ---------------------------------------------------------------

def _exposed_faces(m: np.ndarray) -> int:
    padded = np.pad(m, 1).astype(np.int8)
    return int(sum(np.abs(np.diff(padded, axis=a)).sum() for a in range(3)))


def surface_voxels(m: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour, as (n, 3) indices."""
    padded = np.pad(m, 1)
    inner = padded[1:-1, 1:-1, 1:-1].copy()
    for a in range(3):
        for s in (1, -1):
            inner &= np.roll(padded, s, axis=a)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~inner)


@njit
def _max_sqdist_jit(pts):
    best = 0.0
    n = pts.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d = 0.0
            for k in range(3):
                t = pts[i, k] - pts[j, k]
                d += t * t
            if d > best:
                best = d
    return best


def _max_sqdist_numpy(pts, chunk=512):
    best = 0.0
    for s in range(0, len(pts), chunk):
        block = pts[s : s + chunk]
        d = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d.max()))
    return best


max_sqdist = pick(_max_sqdist_jit, _max_sqdist_numpy)


def shape3d(mask, spacing=1.0) -> dict:
    if isinstance(mask, Volume3D):
        sp = np.asarray(mask.spacing, dtype=np.float64)
        if not np.allclose(sp, sp[0]):
            raise FeatureError(f"shape features need isotropic spacing, got {tuple(sp)}")
        spacing = float(sp[0])
        m = mask.voxels > 0
    else:
        m = np.asarray(mask) > 0
    if not m.any():
        raise FeatureError("empty mask")
    V = float(m.sum()) * spacing ** 3
    A = _exposed_faces(m) * spacing ** 2
    sphericity = np.pi ** (1 / 3) * (6 * V) ** (2 / 3) / A
    surf = surface_voxels(m).astype(np.float64)
    diameter = float(np.sqrt(max_sqdist(surf))) * spacing
    pts = np.argwhere(m).astype(np.float64) * spacing
    if len(pts) > 1:
        ev = np.sort(np.linalg.eigvalsh(np.cov(pts.T, bias=True)))[::-1]
        ev = np.clip(ev, 0.0, None)
    else:
        ev = np.zeros(3)
    if ev[0] > 0:
        elongation = float(np.sqrt(ev[1] / ev[0]))
        flatness = float(np.sqrt(ev[2] / ev[0]))
    else:  # a single voxel has no preferred axis
        elongation = flatness = 1.0
    return {"volume": V, "surface_area": float(A), "sphericity": float(sphericity),
            "max_diameter": diameter, "elongation": elongation, "flatness": flatness}


# -- GLCM ----------------------------------------------------------------

@njit
def _glcm_counts_jit(q, offsets, bins):
    nd = offsets.shape[0]
    X, Y, Z = q.shape
    out = np.zeros((nd, bins, bins))
    for d in range(nd):
        dx, dy, dz = offsets[d, 0], offsets[d, 1], offsets[d, 2]
        for x in range(X):
            x2 = x + dx
            if x2 < 0 or x2 >= X:
                continue
            for y in range(Y):
                y2 = y + dy
                if y2 < 0 or y2 >= Y:
                    continue
                for z in range(Z):
                    z2 = z + dz
                    if z2 < 0 or z2 >= Z:
                        continue
                    a = q[x, y, z]
                    b = q[x2, y2, z2]
                    if a >= 0 and b >= 0:
                        out[d, a, b] += 1.0
    return out


def _glcm_counts_numpy(q, offsets, bins):
    out = np.zeros((len(offsets), bins, bins))
    shape = np.array(q.shape)
    for d, off in enumerate(offsets):
        src = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, shape))
        dst = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, shape))
        a, b = q[src].ravel(), q[dst].ravel()
        ok = (a >= 0) & (b >= 0)
        np.add.at(out[d], (a[ok], b[ok]), 1.0)
    return out


glcm_counts = pick(_glcm_counts_jit, _glcm_counts_numpy)


def glcm_matrices(image, mask, bins: int = N_BINS, distance: int = 1, directions=None):
    """Symmetric normalized co-occurrence matrices, one per direction with pairs."""
    img, m = _arrays(image, mask)
    if m.sum() < 2:
        raise FeatureError("GLCM needs at least two foreground voxels")
    q = np.full(img.shape, -1, dtype=np.int64)
    q[m] = quantize(img[m], bins)
    offs = DIRECTIONS if directions is None else np.asarray(directions, dtype=np.int64).reshape(-1, 3)
    counts = glcm_counts(q, offs * distance, bins)
    sym = counts + counts.transpose(0, 2, 1)
    totals = sym.sum(axis=(1, 2))
    keep = totals > 0
    if not keep.any():
        raise FeatureError("no co-occurring voxel pairs inside the mask")
    return sym[keep] / totals[keep][:, None, None]


def _glcm_features(P):
    n = P.shape[0]
    i, j = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1), indexing="ij")
    mu_i, mu_j = (i * P).sum(), (j * P).sum()
    sd_i = np.sqrt((((i - mu_i) ** 2) * P).sum())
    sd_j = np.sqrt((((j - mu_j) ** 2) * P).sum())
    if sd_i * sd_j > 0:
        corr = float((((i - mu_i) * (j - mu_j)) * P).sum() / (sd_i * sd_j))
    else:  # flat region: perfectly dependent by convention
        corr = 1.0
    nz = P[P > 0]
    return np.array([
        float((((i - j) ** 2) * P).sum()),
        corr,
        float((P ** 2).sum()),
        float((P / (1.0 + np.abs(i - j))).sum()),
        float(-(nz * np.log2(nz)).sum()) + 0.0,
    ])


def glcm(image, mask, bins: int = N_BINS, distance: int = 1, directions=None) -> dict:
    """Per-direction features averaged over the directions that have pairs."""
    mats = glcm_matrices(image, mask, bins, distance, directions)
    feats = np.mean([_glcm_features(P) for P in mats], axis=0)
    return dict(zip(GLCM, map(float, feats)))


# -- feature table -------------------------------------------------------

PROVENANCE = ("radiomic", "clinical", "model")


@dataclass
class FeatureTable:
    ids: list
    columns: list
    values: np.ndarray
    provenance: list
    missing: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.ids), len(self.columns)):
            raise ValueError(f"matrix {self.values.shape} does not match "
                             f"{len(self.ids)} rows x {len(self.columns)} columns")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        if len(self.provenance) != len(self.columns):
            raise ValueError("one provenance tag per column required")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")
        if self.missing is None:
            self.missing = np.isnan(self.values)

    def column(self, name) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def select(self, names) -> "FeatureTable":
        """Keep ``names`` in the given order; rows never move. Unknown names raise."""
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise KeyError(f"columns not in table: {missing}")
        idx = [self.columns.index(n) for n in names]
        return FeatureTable(list(self.ids), list(names), self.values[:, idx],
                            [self.provenance[i] for i in idx], self.missing[:, idx], dict(self.meta))

    def rows(self, ids) -> "FeatureTable":
        pos = {r: k for k, r in enumerate(self.ids)}
        idx = [pos[r] for r in ids]
        return FeatureTable(list(ids), list(self.columns), self.values[idx],
                            list(self.provenance), self.missing[idx], dict(self.meta))

    def schema_hash(self) -> str:
        text = "\n".join(f"{c}\t{p}" for c, p in zip(self.columns, self.provenance))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_csv(self, path) -> Path:
        """Write the matrix as CSV plus a ``.json`` sidecar with tags and metadata."""
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id"] + self.columns)
            for r, row in zip(self.ids, self.values):
                w.writerow([r] + [repr(float(v)) for v in row])
        side = {"columns": self.columns, "provenance": self.provenance,
                "schema_sha256": self.schema_hash(), **self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        if header[1:] != side["columns"]:
            raise ValueError(f"{path}: CSV header does not match sidecar columns")
        meta = {k: v for k, v in side.items() if k not in ("columns", "provenance", "schema_sha256")}
        values = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
        return cls([r[0] for r in body], header[1:], values, side["provenance"], meta=meta)


def radiomic_vector(image: Volume3D, mask: Volume3D, bins: int = N_BINS) -> np.ndarray:
    fo = first_order(image, mask, bins)
    sh = shape3d(mask)
    tx = glcm(image, mask, bins)
    return np.array([fo[n] for n in FIRST_ORDER] + [sh[n] for n in SHAPE] + [tx[n] for n in GLCM])


def extract_all(samples, clinical_stats=None, vocab=VOCAB, bins: int = N_BINS) -> FeatureTable:
    """24 radiomic columns per sample, then encoded clinical columns when stats are given."""
    rows, edges = [], {}
    for s in samples:
        try:
            vec = radiomic_vector(s.image, s.mask, bins)
            if clinical_stats is not None:
                if s.clinical is None:
                    raise FeatureError("missing clinical record")
                vec = np.r_[vec, encode_clinical(s.clinical, vocab, clinical_stats)]
        except ValueError as e:
            raise FeatureError(f"lesion {s.id}: {e}") from e
        rows.append(vec)
        vals = s.image.voxels[s.mask.voxels > 0]
        edges[s.id] = [float(vals.min()), float(vals.max())]
    columns = list(RADIOMIC_COLUMNS)
    prov = ["radiomic"] * len(columns)
    if clinical_stats is not None:
        clin = clinical_columns(vocab)
        columns += clin
        prov += ["clinical"] * len(clin)
    spacing = list(samples[0].image.spacing) if samples else None
    meta = {"bins": bins, "bin_range": edges, "spacing": spacing}
    return FeatureTable([s.id for s in samples], columns,
                        np.array(rows).reshape(len(samples), len(columns)), prov, meta=meta)
