"""NIfTI-1 reading/writing and the raw cohort (CSV index + .nii) format.

Only uncompressed single-file ``.nii`` (magic ``n+1``) is written; detached
``.hdr``/``.img`` pairs (magic ``ni1``) can be read. Voxels are always
returned as float64 with ``scl_slope``/``scl_inter`` applied.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import ClinicalRecord, LesionSample
from .volume import Volume3D, check_orientation

log = logging.getLogger(__name__)

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352

DTYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}
_INT_RANGE = {2: (0, 255), 4: (-32768, 32767)}

# (name, struct code, count); order and sizes follow the NIfTI-1 layout.
_FIELDS = [
    ("sizeof_hdr", "i", 1),
    ("data_type", "10s", 1),
    ("db_name", "18s", 1),
    ("extents", "i", 1),
    ("session_error", "h", 1),
    ("regular", "c", 1),
    ("dim_info", "B", 1),
    ("dim", "h", 8),
    ("intent_p1", "f", 1),
    ("intent_p2", "f", 1),
    ("intent_p3", "f", 1),
    ("intent_code", "h", 1),
    ("datatype", "h", 1),
    ("bitpix", "h", 1),
    ("slice_start", "h", 1),
    ("pixdim", "f", 8),
    ("vox_offset", "f", 1),
    ("scl_slope", "f", 1),
    ("scl_inter", "f", 1),
    ("slice_end", "h", 1),
    ("slice_code", "B", 1),
    ("xyzt_units", "B", 1),
    ("cal_max", "f", 1),
    ("cal_min", "f", 1),
    ("slice_duration", "f", 1),
    ("toffset", "f", 1),
    ("glmax", "i", 1),
    ("glmin", "i", 1),
    ("descrip", "80s", 1),
    ("aux_file", "24s", 1),
    ("qform_code", "h", 1),
    ("sform_code", "h", 1),
    ("quatern_b", "f", 1),
    ("quatern_c", "f", 1),
    ("quatern_d", "f", 1),
    ("qoffset_x", "f", 1),
    ("qoffset_y", "f", 1),
    ("qoffset_z", "f", 1),
    ("srow_x", "f", 4),
    ("srow_y", "f", 4),
    ("srow_z", "f", 4),
    ("intent_name", "16s", 1),
    ("magic", "4s", 1),
]
_FORMAT = "".join(f"{n}{c}" if n > 1 else c for _, c, n in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(ValueError):
    pass


@dataclass
class NiftiHeader:
    fields: dict
    endian: str  # "<" or ">"

    @property
    def datatype(self) -> int:
        return self.fields["datatype"]

    @property
    def dim(self) -> tuple:
        return self.fields["dim"]

    @property
    def pixdim(self) -> tuple:
        return self.fields["pixdim"]

    @property
    def vox_offset(self) -> float:
        return self.fields["vox_offset"]

    @property
    def magic(self) -> bytes:
        return self.fields["magic"]


def detect_endian(raw: bytes) -> str:
    """Classify a header prefix as little ('<') or big ('>') endian.

    Raises NiftiError when ``sizeof_hdr`` is 348 under neither byte order.
    """
    if len(raw) < 4:
        raise NiftiError("file too short to hold a NIfTI-1 header")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        return "<"
    if struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        return ">"
    raise NiftiError("sizeof_hdr is not 348 under either byte order; not a NIfTI-1 file")


def unpack_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"header truncated: expected {HEADER_SIZE} bytes, got {len(raw)}")
    endian = detect_endian(raw)
    values = struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])
    fields, i = {}, 0
    for name, _, n in _FIELDS:
        fields[name] = values[i] if n == 1 else tuple(values[i : i + n])
        i += n
    return NiftiHeader(fields, endian)


def pack_header(fields: dict, endian: str = "<") -> bytes:
    flat = []
    for name, _, n in _FIELDS:
        v = fields[name]
        flat.extend(v if n > 1 else [v])
    return struct.pack(endian + _FORMAT, *flat)


def _blank_fields() -> dict:
    f = {}
    for name, code, n in _FIELDS:
        if code.endswith("s"):
            f[name] = b""
        elif code == "c":
            f[name] = b"\x00"
        elif code == "f":
            f[name] = (0.0,) * n if n > 1 else 0.0
        else:
            f[name] = (0,) * n if n > 1 else 0
    f["sizeof_hdr"] = HEADER_SIZE
    f["regular"] = b"r"
    return f


# -- orientation ---------------------------------------------------------

def _quatern_to_matrix(b, c, d, qfac):
    a = 1.0 - (b * b + c * c + d * d)
    if a < 1e-7:
        a = 1.0 / math.sqrt(b * b + c * c + d * d)
        b, c, d, a = b * a, c * a, d * a, 0.0
    else:
        a = math.sqrt(a)
    R = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - c * c - b * b],
        ]
    )
    if qfac < 0:
        R[:, 2] *= -1
    return R


def _matrix_to_quatern(R):
    """Rotation (det +1 after qfac) to quaternion (b, c, d), qfac."""
    R = np.array(R, dtype=float)
    qfac = 1.0
    if np.linalg.det(R) < 0:
        qfac = -1.0
        R[:, 2] *= -1
    r11, r12, r13 = R[0]
    r21, r22, r23 = R[1]
    r31, r32, r33 = R[2]
    a = r11 + r22 + r33 + 1.0
    if a > 0.5:
        a = 0.5 * math.sqrt(a)
        b = 0.25 * (r32 - r23) / a
        c = 0.25 * (r13 - r31) / a
        d = 0.25 * (r21 - r12) / a
    else:
        xd = 1.0 + r11 - (r22 + r33)
        yd = 1.0 + r22 - (r11 + r33)
        zd = 1.0 + r33 - (r11 + r22)
        if xd > 1.0:
            b = 0.5 * math.sqrt(xd)
            c = 0.25 * (r12 + r21) / b
            d = 0.25 * (r13 + r31) / b
            a = 0.25 * (r32 - r23) / b
        elif yd > 1.0:
            c = 0.5 * math.sqrt(yd)
            b = 0.25 * (r12 + r21) / c
            d = 0.25 * (r23 + r32) / c
            a = 0.25 * (r13 - r31) / c
        else:
            d = 0.5 * math.sqrt(zd)
            b = 0.25 * (r13 + r31) / d
            c = 0.25 * (r23 + r32) / d
            a = 0.25 * (r21 - r12) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), qfac


def _ras_to_lps(v):
    v = np.asarray(v, dtype=float)
    return np.array([-v[0], -v[1], v[2]])


def _orientation_from_axes(axes_ras, tol=1e-4):
    """Reduce direction columns (RAS) to signed LPS axis codes; reject oblique."""
    codes = []
    for j in range(3):
        v = _ras_to_lps(axes_ras[:, j])
        n = np.linalg.norm(v)
        if n == 0:
            raise NiftiError("degenerate orientation: zero-length axis")
        v = v / n
        k = int(np.argmax(np.abs(v)))
        off = np.delete(np.abs(v), k)
        if off.max() > tol:
            raise NiftiError(f"oblique orientation not supported (axis {j} direction {v.round(4)})")
        codes.append(int(np.sign(v[k])) * (k + 1))
    check_orientation(codes)
    return tuple(codes)


def _geometry(hdr: NiftiHeader):
    f = hdr.fields
    spacing = tuple(abs(float(p)) for p in f["pixdim"][1:4])
    if f["sform_code"] > 0:
        M = np.array([f["srow_x"], f["srow_y"], f["srow_z"]], dtype=float)
        axes, offset = M[:, :3], M[:, 3]
    elif f["qform_code"] > 0:
        qfac = -1.0 if f["pixdim"][0] < 0 else 1.0
        axes = _quatern_to_matrix(f["quatern_b"], f["quatern_c"], f["quatern_d"], qfac)
        offset = np.array([f["qoffset_x"], f["qoffset_y"], f["qoffset_z"]], dtype=float)
    else:
        # method 1 of the standard: index axes are the RAS axes
        axes, offset = np.eye(3), np.zeros(3)
    orientation = _orientation_from_axes(axes)
    origin = tuple(float(x) for x in _ras_to_lps(offset))
    return spacing, orientation, origin


# -- reading -------------------------------------------------------------

def read_nifti(path) -> Volume3D:
    path = Path(path)
    if path.suffix == ".gz":
        raise NiftiError(f"{path}: compressed NIfTI is not supported, decompress first")
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        hdr = unpack_header(head)
        magic = hdr.magic
        if magic == b"n+1\x00":
            offset = int(hdr.vox_offset)
            if offset < DEFAULT_VOX_OFFSET:
                raise NiftiError(f"{path}: vox_offset {hdr.vox_offset} < 352 for single-file NIfTI")
            data_path, data_offset = path, offset
        elif magic == b"ni1\x00":
            data_path, data_offset = path.with_suffix(".img"), int(hdr.vox_offset)
        else:
            raise NiftiError(f"{path}: bad magic {magic!r}")

    code = hdr.datatype
    if code not in DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    dim = hdr.dim
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = [int(d) for d in dim[1 : ndim + 1]]
    if any(d < 1 for d in shape):
        raise NiftiError(f"{path}: non-positive dimension in {shape}")
    if any(d != 1 for d in shape[3:]):
        raise NiftiError(f"{path}: only 3D volumes are supported, dims {shape}")
    shape = (shape + [1, 1, 1])[:3]
    dtype = np.dtype(DTYPES[code]).newbyteorder(hdr.endian)
    nvox = shape[0] * shape[1] * shape[2]
    expected = nvox * dtype.itemsize
    with open(data_path, "rb") as fh:
        fh.seek(data_offset)
        payload = fh.read(expected)
    if len(payload) != expected:
        raise NiftiError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype, count=nvox).astype(np.float64)
    slope, inter = float(hdr.fields["scl_slope"]), float(hdr.fields["scl_inter"])
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope != 1.0 or inter != 0.0:
        data = data * slope + inter
    spacing, orientation, origin = _geometry(hdr)
    vox = data.reshape(shape, order="F")
    return Volume3D(vox, spacing, orientation, origin, {"datatype": code})


# -- writing -------------------------------------------------------------

def _encode_voxels(vol: Volume3D, datatype: int) -> bytes:
    v = vol.voxels
    if datatype in _INT_RANGE:
        if not np.all(np.isfinite(v)):
            raise NiftiError(f"non-finite voxel cannot be stored as integer datatype {datatype}")
        lo, hi = _INT_RANGE[datatype]
        # round half to even; out-of-range is an error rather than silent clipping
        r = np.rint(v)
        if r.min() < lo or r.max() > hi:
            raise NiftiError(f"values [{r.min()}, {r.max()}] outside datatype {datatype} range")
        v = r
    return np.asarray(v, dtype=np.dtype(DTYPES[datatype]).newbyteorder("<")).tobytes(order="F")


def write_nifti(vol: Volume3D, path, datatype: int = 64) -> None:
    """Write ``vol`` as a single-file little-endian NIfTI-1.

    Integer datatypes round half-to-even and refuse NaN/Inf or out-of-range values.
    """
    if datatype not in DTYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    payload = _encode_voxels(vol, datatype)
    f = _blank_fields()
    f["dim"] = (3, *vol.dims, 1, 1, 1, 1)
    f["datatype"] = datatype
    f["bitpix"] = np.dtype(DTYPES[datatype]).itemsize * 8
    A = vol.affine()  # LPS
    axes_ras = A[:3, :3].copy()
    axes_ras[:2] *= -1
    offset_ras = _ras_to_lps(A[:3, 3])
    rot = axes_ras / np.asarray(vol.spacing)[None, :]
    (b, c, d), qfac = _matrix_to_quatern(rot)
    f["pixdim"] = (qfac, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    f["vox_offset"] = float(DEFAULT_VOX_OFFSET)
    f["scl_slope"] = 1.0
    f["scl_inter"] = 0.0
    f["xyzt_units"] = 2  # mm
    f["qform_code"] = 1
    f["sform_code"] = 1
    f["quatern_b"], f["quatern_c"], f["quatern_d"] = b, c, d
    f["qoffset_x"], f["qoffset_y"], f["qoffset_z"] = (float(x) for x in offset_ras)
    f["srow_x"] = (*axes_ras[0], offset_ras[0])
    f["srow_y"] = (*axes_ras[1], offset_ras[1])
    f["srow_z"] = (*axes_ras[2], offset_ras[2])
    f["magic"] = b"n+1\x00"
    blob = pack_header(f, "<") + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + payload
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc


# -- raw cohort ----------------------------------------------------------

INDEX_NAME = "index.csv"
INDEX_COLUMNS = [
    "id", "label", "age", "sex", "primary", "systemic", "recurrence_days", "image", "mask",
]


def _parse_clinical(row) -> ClinicalRecord | None:
    if not row.get("age"):
        return None
    return ClinicalRecord(
        age=float(row["age"]),
        sex=row["sex"],
        primary=row["primary"],
        systemic=row["systemic"],
        recurrence_days=float(row["recurrence_days"]),
    )


def read_raw_cohort(directory) -> list[LesionSample]:
    """Load every sample listed in ``<directory>/index.csv``, in index order."""
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"missing cohort index {index}")
    samples = []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            img_path = directory / row["image"]
            mask_path = directory / row["mask"]
            for p in (img_path, mask_path):
                if not p.exists():
                    raise FileNotFoundError(f"sample {row['id']}: listed file {p} is missing")
            image = read_nifti(img_path)
            mask = read_nifti(mask_path)
            if image.dims != mask.dims:
                raise ValueError(
                    f"sample {row['id']}: image dims {image.dims} != mask dims {mask.dims}"
                )
            mask = mask.with_voxels((mask.voxels > 0).astype(np.float64))
            label = int(row["label"]) if row.get("label", "") != "" else None
            samples.append(
                LesionSample(row["id"], image, mask, label, _parse_clinical(row))
            )
    return samples


def write_raw_cohort(directory, samples, datatype: int = 64) -> None:
    """Write samples and an index file; labels/clinical fields left blank when absent."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    rows = []
    for s in samples:
        img_name, mask_name = f"{s.id}_t1ce.nii", f"{s.id}_mask.nii"
        write_nifti(s.image, directory / img_name, datatype)
        write_nifti(s.mask, directory / mask_name, 2)
        c = s.clinical
        rows.append(
            {
                "id": s.id,
                "label": "" if s.label is None else str(s.label),
                "age": "" if c is None else repr(float(c.age)),
                "sex": "" if c is None else c.sex,
                "primary": "" if c is None else c.primary,
                "systemic": "" if c is None else c.systemic,
                "recurrence_days": "" if c is None else repr(float(c.recurrence_days)),
                "image": img_name,
                "mask": mask_name,
            }
        )
    with open(directory / INDEX_NAME, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=INDEX_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
