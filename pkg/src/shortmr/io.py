"""File formats: single-file NIfTI-1 volumes, cohort manifests, JSON reports.

Only a small NIfTI-1 subset is read and written: little-endian ``n+1``
files with a 348-byte header, no extensions, ``vox_offset`` 352, 3D data of
type float32, int16 or int32. Anything else is rejected on read.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .phantom import VOCAB, Cohort, PhantomSpec, SubjectRecord
from .volume import Atlas, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
DTYPES = {16: np.dtype("<f4"), 4: np.dtype("<i2"), 8: np.dtype("<i4")}
DTYPE_CODES = {np.dtype("float32"): 16, np.dtype("int16"): 4, np.dtype("int32"): 8}

MANIFEST_COLUMNS = ("subject_id", "sample_id", "sex", "race", "age", "diagnosis", "volume_path")


class NiftiFormatError(ValueError):
    pass


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid cohort manifest:\n  " + "\n  ".join(problems))
        self.problems = problems


def write_volume(v: Volume, path: str | Path, dtype=None) -> Path:
    data = np.asarray(v.data)
    dtype = np.dtype(dtype) if dtype is not None else data.dtype
    if dtype == np.float64:
        dtype = np.dtype("float32")
    if dtype == np.int64:
        dtype = np.dtype("int32")
    if dtype not in DTYPE_CODES:
        raise NiftiFormatError(f"unsupported datatype {dtype}")
    cast = data.astype(dtype)
    if dtype.kind in "iu" and not np.array_equal(cast, data):
        raise NiftiFormatError(f"values not representable as {dtype}")
    if dtype.kind == "f" and data.dtype.kind == "f" and not np.all(np.isfinite(cast)):
        raise NiftiFormatError(f"values overflow {dtype}")
    code = DTYPE_CODES[dtype]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dims = [3, *data.shape, 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    hdr[344:348] = MAGIC

    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(cast.astype(dtype.newbyteorder("<")).tobytes(order="F"))
    return path


def read_volume(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < VOX_OFFSET:
        raise NiftiFormatError(f"{path}: file too short for a NIfTI-1 header")
    (size_le,) = struct.unpack_from("<i", raw, 0)
    if size_le != HEADER_SIZE:
        (size_be,) = struct.unpack_from(">i", raw, 0)
        if size_be == HEADER_SIZE:
            raise NiftiFormatError(f"{path}: big-endian NIfTI files are not supported")
        raise NiftiFormatError(f"{path}: sizeof_hdr is {size_le}, expected 348")
    if raw[344:348] != MAGIC:
        raise NiftiFormatError(f"{path}: bad magic {raw[344:348]!r}, expected single-file 'n+1'")
    if raw[348] != 0:
        raise NiftiFormatError(f"{path}: header extensions are not supported")
    dims = struct.unpack_from("<8h", raw, 40)
    if dims[0] != 3 or any(d != 1 for d in dims[4:]) or min(dims[1:4]) < 1:
        raise NiftiFormatError(f"{path}: only 3D volumes are supported, dim = {list(dims)}")
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {code}")
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    if int(vox_offset) != VOX_OFFSET:
        raise NiftiFormatError(f"{path}: vox_offset {vox_offset} != 352")
    pixdim = struct.unpack_from("<8f", raw, 76)
    shape = tuple(int(d) for d in dims[1:4])
    dtype = DTYPES[code]
    n = int(np.prod(shape))
    payload = raw[VOX_OFFSET : VOX_OFFSET + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise NiftiFormatError(f"{path}: truncated data block")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    spacing = tuple(float(s) if s > 0 else 1.0 for s in pixdim[1:4])
    return Volume(data.astype(dtype.newbyteorder("=")), spacing)


def save_atlas(atlas: Atlas, directory: str | Path) -> None:
    directory = Path(directory)
    write_volume(Volume(atlas.labels.astype(np.int32), atlas.spacing), directory / "atlas.nii")
    names = {str(k): v for k, v in sorted(atlas.region_names.items())}
    write_json({"n_regions": atlas.n_regions, "region_names": names}, directory / "atlas.json")


def load_atlas(directory: str | Path) -> Atlas:
    directory = Path(directory)
    vol = read_volume(directory / "atlas.nii")
    meta = json.loads((directory / "atlas.json").read_text(encoding="utf-8"))
    names = {int(k): v for k, v in meta["region_names"].items()}
    return Atlas(vol.data.astype(np.int32), meta["n_regions"], names, vol.spacing)


def save_cohort(cohort: Cohort, directory: str | Path) -> Path:
    """Write volumes, ``cohort.csv`` and (if present) atlas and phantom metadata."""
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    manifest = directory / "cohort.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for rec in cohort.subjects:
            for sid in rec.sample_ids:
                rel = f"volumes/{sid}.nii"
                write_volume(cohort.samples[sid], directory / rel)
                w.writerow([rec.subject_id, sid, rec.sex, rec.race, repr(rec.age), rec.diagnosis, rel])
    if cohort.atlas is not None:
        save_atlas(cohort.atlas, directory)
    if cohort.ground_truth is not None:
        write_json(cohort.ground_truth.to_dict(), directory / "phantom.json")
    return manifest


def load_cohort(manifest_path: str | Path) -> Cohort:
    """Read a cohort manifest, collecting every bad row before failing."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    problems: list[str] = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError([f"header must be exactly {','.join(MANIFEST_COLUMNS)}, got {header}"])
        rows = list(reader)

    sample_rows: dict[str, list[int]] = {}
    subjects: dict[str, dict] = {}
    samples: dict[str, Volume] = {}
    for i, row in enumerate(rows, start=1):
        if len(row) != len(MANIFEST_COLUMNS):
            problems.append(f"row {i}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            continue
        rec = dict(zip(MANIFEST_COLUMNS, row))
        sample_rows.setdefault(rec["sample_id"], []).append(i)
        bad = False
        for key in ("sex", "race", "diagnosis"):
            if rec[key] not in VOCAB[key]:
                problems.append(
                    f"row {i}: unknown enum value {rec[key]!r} for {key} (expected one of {list(VOCAB[key])})"
                )
                bad = True
        try:
            age = float(rec["age"])
        except ValueError:
            problems.append(f"row {i}: age {rec['age']!r} is not a number")
            bad = True
        if bad:
            continue
        meta = (rec["sex"], rec["race"], age, rec["diagnosis"])
        subj = subjects.setdefault(rec["subject_id"], {"meta": meta, "samples": [], "row": i})
        if subj["meta"] != meta:
            problems.append(f"row {i}: subject {rec['subject_id']} has inconsistent metadata (first seen on row {subj['row']})")
            continue
        subj["samples"].append(rec["sample_id"])
        path = root / rec["volume_path"]
        if not path.exists():
            problems.append(f"row {i}: volume file not found: {rec['volume_path']}")
            continue
        try:
            samples[rec["sample_id"]] = read_volume(path)
        except (NiftiFormatError, ValueError) as exc:
            problems.append(f"row {i}: unreadable volume {rec['volume_path']}: {exc}")
    for sid, where in sample_rows.items():
        if len(where) > 1:
            problems.append(f"duplicate sample_id {sid!r} on rows {', '.join(map(str, where))}")
    if problems:
        raise ManifestError(problems)

    records = [
        SubjectRecord(sub_id, s["meta"][0], s["meta"][1], s["meta"][2], s["meta"][3], tuple(s["samples"]))
        for sub_id, s in subjects.items()
    ]
    atlas = load_atlas(root) if (root / "atlas.nii").exists() else None
    truth = None
    if (root / "phantom.json").exists():
        truth = PhantomSpec.from_dict(json.loads((root / "phantom.json").read_text(encoding="utf-8")))
    return Cohort(records, samples, truth, atlas)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(payload: Any, path: str | Path) -> Path:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    path = Path(path)
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
