"""Volumetric image I/O, normalization, and study catalogs.

Volumes are stored on disk as little-endian single-file NIfTI-1 (.nii) with
float32 data. Catalogs are JSON manifests listing per-study metadata and
volume paths (relative paths resolve against the manifest's directory).
"""

from __future__ import annotations

import datetime
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    CatalogError,
    DegenerateInputError,
    UnsupportedShapeError,
    VolumeFormatError,
)

_NIFTI1_HDR_SIZE = 348
_NIFTI1_MAGIC = b"n+1\x00"
_VOX_OFFSET = 352.0

# NIfTI-1 datatype codes accepted on read; everything is cast to float32.
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    256: np.dtype("<i1"),
    512: np.dtype("<u2"),
    768: np.dtype("<u4"),
}


class Modality(Enum):
    T1 = "T1"
    FLAIR = "FLAIR"
    LABEL = "LABEL"
    PROB = "PROB"


class Split(Enum):
    TRAIN = "TRAIN"
    VALIDATION = "VALIDATION"
    TEST = "TEST"


@dataclass(frozen=True)
class Volume:
    """3D scalar grid indexed (x, y, z) with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if data.ndim != 3 or min(data.shape) < 1:
            raise UnsupportedShapeError(f"volume must be 3D with all dims >= 1, got shape {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise UnsupportedShapeError(f"spacing components must be > 0, got {self.spacing}")
        if self.modality is Modality.LABEL:
            if not np.all((data == 0.0) | (data == 1.0)):
                raise DegenerateInputError("LABEL volume contains values other than 0.0/1.0")
        elif self.modality is Modality.PROB:
            if data.min() < 0.0 or data.max() > 1.0:
                raise DegenerateInputError("PROB volume contains values outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class Study:
    """One patient visit: T1 + FLAIR (and optionally a lesion label)."""

    patient_id: str
    scanner_id: str
    acquired_at: datetime.date
    t1: Volume
    flair: Volume
    label: Volume | None = None

    def __post_init__(self):
        vols = [self.t1, self.flair] + ([self.label] if self.label is not None else [])
        shapes = {v.shape for v in vols}
        spacings = {v.spacing for v in vols}
        if len(shapes) != 1 or len(spacings) != 1:
            raise UnsupportedShapeError(
                f"study {self.patient_id}/{self.acquired_at}: t1/flair/label must share "
                f"dimensions and spacing (shapes {shapes}, spacings {spacings})"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t1.shape


@dataclass(frozen=True)
class StudyEntry:
    """Catalog row: study metadata plus volume paths (label optional)."""

    patient_id: str
    scanner_id: str
    acquired_at: datetime.date
    t1_path: Path
    flair_path: Path
    split: Split
    label_path: Path | None = None

    def key(self) -> tuple[str, str, str]:
        return (self.patient_id, self.scanner_id, self.acquired_at.isoformat())

    def load(self) -> Study:
        label = None
        if self.label_path is not None:
            label = load_volume(self.label_path, modality=Modality.LABEL)
        return Study(
            patient_id=self.patient_id,
            scanner_id=self.scanner_id,
            acquired_at=self.acquired_at,
            t1=load_volume(self.t1_path, modality=Modality.T1),
            flair=load_volume(self.flair_path, modality=Modality.FLAIR),
            label=label,
        )


@dataclass
class StudyCatalog:
    """A list of study entries with a TRAIN/VALIDATION/TEST split assignment."""

    entries: list[StudyEntry] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        seen = {}
        for e in self.entries:
            k = e.key()
            if k in seen:
                raise CatalogError(f"duplicate study {k}")
            seen[k] = e
        by_patient: dict[str, set[Split]] = {}
        for e in self.entries:
            by_patient.setdefault(e.patient_id, set()).add(e.split)
        offenders = sorted(p for p, splits in by_patient.items() if len(splits) > 1)
        if offenders:
            raise CatalogError(f"patients present in more than one split: {offenders}")

    def subset(self, split: Split) -> "StudyCatalog":
        return StudyCatalog([e for e in self.entries if e.split is split])

    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _pack_header(shape, spacing, descrip: bytes) -> bytes:
    hdr = bytearray(_NIFTI1_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI1_HDR_SIZE)          # sizeof_hdr
    dim = [3, shape[0], shape[1], shape[2], 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)                     # dim
    struct.pack_into("<h", hdr, 70, 16)                        # datatype = float32
    struct.pack_into("<h", hdr, 72, 32)                        # bitpix
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)                  # pixdim
    struct.pack_into("<f", hdr, 108, _VOX_OFFSET)              # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                      # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)                      # scl_inter
    struct.pack_into("<80s", hdr, 148, descrip)                # descrip
    struct.pack_into("<h", hdr, 252, 1)                        # qform_code (scanner)
    struct.pack_into("<3f", hdr, 268, 0.0, 0.0, 0.0)           # quatern offsets
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)  # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)  # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)  # srow_z
    struct.pack_into("<4s", hdr, 344, _NIFTI1_MAGIC)           # magic
    return bytes(hdr)


def save_volume(v: Volume, path: str | Path) -> None:
    """Write a Volume as a single-file little-endian float32 NIfTI-1 image.

    The modality tag is recorded in the header's descrip field so that
    load_volume inverts save_volume exactly.
    """
    path = Path(path)
    descrip = f"modality={v.modality.value}".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(_pack_header(v.shape, v.spacing, descrip))
            f.write(b"\x00\x00\x00\x00")  # no header extensions
            # NIfTI stores x fastest: write in Fortran order.
            f.write(np.asfortranarray(v.data).tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"failed to write volume to {path}: {exc}") from exc


def load_volume(path: str | Path, modality: Modality | None = None) -> Volume:
    """Read a single-frame NIfTI-1 volume, casting values to float32.

    When `modality` is None, the tag embedded by save_volume is used if
    present, otherwise T1 is assumed.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise OSError(f"failed to read volume from {path}: {exc}") from exc
    if len(raw) < _NIFTI1_HDR_SIZE + 4:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] != _NIFTI1_HDR_SIZE:
        raise VolumeFormatError(f"{path}: bad sizeof_hdr (not little-endian NIfTI-1?)")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (_NIFTI1_MAGIC, b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise VolumeFormatError(f"{path}: dim[0]={ndim} outside [3, 7]")
    extents = list(dim[1 : 1 + ndim])
    if any(d > 1 for d in extents[3:]):
        raise UnsupportedShapeError(f"{path}: more than 3 non-singleton dimensions (dim={extents})")
    shape = tuple(extents[:3])
    if min(shape) < 1:
        raise VolumeFormatError(f"{path}: non-positive spatial extent {shape}")

    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
    dt = _DTYPES[datatype]

    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"{path}: non-positive pixdim {pixdim[1:4]}")

    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    if vox_offset < _NIFTI1_HDR_SIZE:
        raise VolumeFormatError(f"{path}: vox_offset {vox_offset} inside header")
    scl_slope = struct.unpack_from("<f", raw, 112)[0]
    scl_inter = struct.unpack_from("<f", raw, 116)[0]

    count = int(np.prod(shape))
    end = vox_offset + count * dt.itemsize
    if len(raw) < end:
        raise VolumeFormatError(f"{path}: truncated data section ({len(raw)} < {end} bytes)")
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset)
    data = flat.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = (data * np.float32(slope) + np.float32(scl_inter)).astype(np.float32)

    if modality is None:
        descrip = struct.unpack_from("<80s", raw, 148)[0].split(b"\x00", 1)[0].decode("ascii", "replace")
        if descrip.startswith("modality="):
            modality = Modality(descrip.split("=", 1)[1])
        else:
            modality = Modality.T1
    return Volume(data=data, spacing=spacing, modality=modality)


def normalize_volume(v: Volume) -> Volume:
    """Rescale an intensity volume to zero mean and unit (population) std.

    Statistics are taken over all voxels; constant volumes are rejected.
    """
    if v.modality not in (Modality.T1, Modality.FLAIR):
        raise DegenerateInputError(f"normalization applies to T1/FLAIR volumes, not {v.modality.value}")
    if v.data.size < 2:
        raise DegenerateInputError("normalization needs at least 2 voxels")
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()  # population std (ddof=0)
    if std < 1e-12:
        raise DegenerateInputError(f"constant-valued volume (std={std:g}) cannot be normalized")
    out = ((x - mean) / std).astype(np.float32)
    return replace(v, data=out)


def _entry_to_json(e: StudyEntry, base: Path) -> dict:
    def rel(p: Path | None):
        if p is None:
            return None
        p = Path(p)
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return p.as_posix()

    d = {
        "patient_id": e.patient_id,
        "scanner_id": e.scanner_id,
        "acquired_at": e.acquired_at.isoformat(),
        "t1_path": rel(e.t1_path),
        "flair_path": rel(e.flair_path),
        "split": e.split.value,
    }
    if e.label_path is not None:
        d["label_path"] = rel(e.label_path)
    return d


def save_catalog(catalog: StudyCatalog, path: str | Path) -> None:
    """Write the catalog as a JSON manifest with paths relative to it."""
    path = Path(path)
    base = path.parent.resolve()
    doc = {"studies": [_entry_to_json(e, base) for e in catalog.entries]}
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_catalog(path: str | Path) -> StudyCatalog:
    """Load and validate a JSON catalog manifest.

    Raises CatalogError when required fields are missing, referenced volume
    files do not exist, studies collide, or a patient spans several splits.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("studies"), list):
        raise CatalogError(f"{path}: manifest must be an object with a 'studies' list")
    base = path.parent.resolve()
    entries = []
    missing = []
    for i, row in enumerate(doc["studies"]):
        try:
            label_path = row.get("label_path")
            e = StudyEntry(
                patient_id=str(row["patient_id"]),
                scanner_id=str(row["scanner_id"]),
                acquired_at=datetime.date.fromisoformat(row["acquired_at"]),
                t1_path=base / row["t1_path"],
                flair_path=base / row["flair_path"],
                split=Split(row["split"]),
                label_path=(base / label_path) if label_path else None,
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise CatalogError(f"{path}: study #{i} invalid: {exc!r}") from exc
        for p in (e.t1_path, e.flair_path, e.label_path):
            if p is not None and not p.exists():
                missing.append(f"{e.patient_id}/{e.acquired_at.isoformat()}: {p}")
        entries.append(e)
    if missing:
        raise CatalogError("manifest references missing volume files:\n  " + "\n  ".join(missing))
    return StudyCatalog(entries)
