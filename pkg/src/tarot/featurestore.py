"""On-disk and in-memory representation of per-sample feature matrices.

Binary layout ("TFS"): bytes 0-3 magic ``TFS1``; byte 4 dtype code
(0 = float32, 1 = float64); bytes 5-7 reserved zero; bytes 8-15 row count
(u64 LE); bytes 16-23 column count (u64 LE); then ``n * d`` values,
row-major little-endian.  Sample IDs live in a JSON sidecar
``<stem>.manifest.json`` so the numeric payload stays mmap-friendly.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadHeaderError,
    BadMagicError,
    DataError,
    FormatError,
    NonFiniteError,
    NonFiniteFileError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"TFS1"
HEADER_SIZE = 24
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

CSV_MAX_ROWS = 100_000


def _check_finite(data: np.ndarray, ids: Sequence[str] | None = None) -> None:
    if np.isfinite(data).all():
        return
    flat = np.isfinite(data.reshape(-1))
    idx = int(np.argmin(flat))
    row, col = divmod(idx, data.shape[1])
    where = f"row {row}, col {col}"
    if ids is not None:
        where += f" (id {ids[row]!r})"
    raise NonFiniteError(f"non-finite value at {where}")


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense n x d matrix of per-sample feature vectors with stable IDs.

    Immutable after construction: the stored array is made read-only, so a
    matrix can be shared freely across workers.
    """

    data: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            raise DataError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        n, d = arr.shape
        if n < 1 or d < 1:
            raise DataError(f"feature matrix must be at least 1x1, got {n}x{d}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise ShapeMismatchError(f"{len(ids)} ids for {n} rows")
        if len(set(ids)) != n:
            raise DataError("sample ids are not distinct")
        _check_finite(arr, ids)
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy(order="C")
        else:
            arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def _wrap_owned(cls, data: np.ndarray, ids: Sequence[str]) -> "FeatureMatrix":
        # Skips the defensive copy; only for arrays the engine just created.
        data.setflags(write=False)
        return cls(data, tuple(ids))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype


def default_ids(n: int) -> tuple[str, ...]:
    return tuple(str(i) for i in range(n))


def sidecar_path(path: Path | str) -> Path:
    """Sidecar manifest path for a feature file: ``<stem>.manifest.json``."""
    p = Path(path)
    return p.with_name(p.stem + ".manifest.json")


def write_features(m: FeatureMatrix, path: Path | str, *, sidecar: bool = True) -> None:
    """Write a feature matrix as a TFS file (plus ID sidecar by default)."""
    path = Path(path)
    code = _CODE_FOR_DTYPE[np.dtype(m.dtype)]
    header = MAGIC + struct.pack("<B3xQQ", code, m.n, m.d)
    le = m.data.astype(_DTYPE_CODES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(le).tobytes())
    if sidecar:
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump({"ids": list(m.ids)}, fh)
            fh.write("\n")


def load_features(path: Path | str, *, ids: Sequence[str] | None = None) -> FeatureMatrix:
    """Load a TFS feature file, validating structure and finiteness.

    IDs come from ``ids`` if given, else from the ``<stem>.manifest.json``
    sidecar, else default to row indices.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < 4 or header[:4] != MAGIC:
            raise BadMagicError(path, 0, f"bad magic {header[:4]!r}, expected {MAGIC!r}")
        if len(header) < HEADER_SIZE:
            raise TruncatedPayloadError(
                path, len(header), f"header is {len(header)} bytes, need {HEADER_SIZE}"
            )
        code = header[4]
        if code not in _DTYPE_CODES:
            raise BadHeaderError(path, 4, f"unknown dtype code {code}")
        if header[5:8] != b"\x00\x00\x00":
            raise BadHeaderError(path, 5, "reserved bytes are not zero")
        n, d = struct.unpack("<QQ", header[8:24])
        if n < 1 or d < 1:
            raise BadHeaderError(path, 8, f"declared shape {n}x{d} is empty")
        dtype = _DTYPE_CODES[code]
        want = n * d
        values = np.fromfile(fh, dtype=dtype, count=want)
        if values.size < want:
            raise TruncatedPayloadError(
                path,
                HEADER_SIZE + values.size * dtype.itemsize,
                f"payload holds {values.size} of {want} declared values",
            )
        if fh.read(1):
            raise FormatError(
                path, HEADER_SIZE + want * dtype.itemsize, "trailing bytes after payload"
            )
    finite = np.isfinite(values)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise NonFiniteFileError(
            path, HEADER_SIZE + idx * dtype.itemsize, f"non-finite value at element {idx}"
        )
    data = values.reshape(n, d).astype(dtype.newbyteorder("="), copy=False)

    if ids is None:
        sc = sidecar_path(path)
        if sc.exists():
            with open(sc, "r", encoding="utf-8") as fh:
                ids = json.load(fh).get("ids")
    if ids is None:
        ids = default_ids(n)
    if len(ids) != n:
        raise ShapeMismatchError(f"{path}: {len(ids)} sidecar ids for {n} rows")
    return FeatureMatrix._wrap_owned(np.ascontiguousarray(data), ids)


def load_csv_features(path: Path | str, *, dtype=np.float64) -> FeatureMatrix:
    """Ingest a CSV file: header row names the dims, first column is the ID."""
    path = Path(path)
    ids: list[str] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(path, 0, "empty CSV file") from None
        d = len(header) - 1
        if d < 1:
            raise FormatError(path, 0, "CSV header must name at least one dimension")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise FormatError(path, 0, f"line {lineno}: {len(row)} fields, expected {d + 1}")
            ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(path, 0, f"line {lineno}: {exc}") from None
            if len(rows) > CSV_MAX_ROWS:
                raise DataError(f"{path}: CSV ingestion is limited to {CSV_MAX_ROWS} rows")
    if not rows:
        raise FormatError(path, 0, "CSV file has no data rows")
    return FeatureMatrix(np.asarray(rows, dtype=dtype), tuple(ids))


@dataclass(frozen=True)
class DatasetManifest:
    """Names a dataset role and the feature file(s) backing it."""

    role: str
    feature_file: Path
    count: int
    checkpoint_files: tuple[Path, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.role not in ("candidate", "target"):
            raise DataError(f"manifest role must be candidate or target, got {self.role!r}")


def load_manifest(path: Path | str) -> DatasetManifest:
    """Load and validate a dataset manifest.

    ``path`` may be the manifest JSON itself or a feature file with a
    sidecar.  Referenced files must exist and agree on n; checkpoint files
    must share d.
    """
    path = Path(path)
    if path.suffix == ".json":
        manifest_file = path
    else:
        manifest_file = sidecar_path(path)
    if not manifest_file.exists():
        raise DataError(f"manifest not found: {manifest_file}")
    with open(manifest_file, "r", encoding="utf-8") as fh:
        doc = json.load(fh)

    if path.suffix != ".json":
        # caller named the feature file itself; use its path as given
        feature_file = path
    elif doc.get("feature_file"):
        # paths inside a manifest are relative to the manifest
        feature_file = Path(doc["feature_file"])
        if not feature_file.is_absolute():
            feature_file = manifest_file.parent / feature_file
    else:
        # Conventional pairing: drop ".manifest.json", restore ".tfs".
        feature_file = manifest_file.with_name(
            manifest_file.name[: -len(".manifest.json")] + ".tfs"
        )
    if not feature_file.exists():
        raise DataError(f"feature file not found: {feature_file}")

    ids = doc.get("ids")
    if ids is None:
        raise DataError(f"{manifest_file}: manifest lacks an ids list")
    role = doc.get("role", "candidate")
    checkpoints = tuple(
        (manifest_file.parent / c if not Path(c).is_absolute() else Path(c))
        for c in doc.get("checkpoints", [])
    )
    n, d = _peek_shape(feature_file)
    if n != len(ids):
        raise ShapeMismatchError(f"{feature_file}: header declares {n} rows, manifest has {len(ids)} ids")
    for ck in checkpoints:
        if not ck.exists():
            raise DataError(f"checkpoint feature file not found: {ck}")
        cn, cd = _peek_shape(ck)
        if cn != n:
            raise ShapeMismatchError(f"{ck}: {cn} rows, expected {n}")
        if cd != d:
            raise ShapeMismatchError(f"{ck}: {cd} columns, expected {d}")
    return DatasetManifest(role=role, feature_file=feature_file, count=n, checkpoint_files=checkpoints)


def _peek_shape(path: Path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
    if len(header) < 4 or header[:4] != MAGIC:
        raise BadMagicError(path, 0, f"bad magic {header[:4]!r}, expected {MAGIC!r}")
    if len(header) < HEADER_SIZE:
        raise TruncatedPayloadError(path, len(header), "incomplete header")
    n, d = struct.unpack("<QQ", header[8:24])
    return n, d


def load_dataset(manifest: DatasetManifest) -> FeatureMatrix:
    """Materialize a manifest: load its features, summing checkpoints if present."""
    ids = None
    sc = sidecar_path(manifest.feature_file)
    if sc.exists():
        with open(sc, "r", encoding="utf-8") as fh:
            ids = json.load(fh).get("ids")
    if manifest.checkpoint_files:
        mats = [load_features(p, ids=ids) for p in manifest.checkpoint_files]
        return aggregate_checkpoints(mats)
    return load_features(manifest.feature_file, ids=ids)


def aggregate_checkpoints(mats: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Sum feature matrices elementwise across checkpoints (64-bit accumulation)."""
    if not mats:
        raise DataError("aggregate_checkpoints needs at least one matrix")
    first = mats[0]
    total = np.zeros(first.data.shape, dtype=np.float64)
    for m in mats:
        if m.data.shape != first.data.shape:
            raise ShapeMismatchError(f"checkpoint shape {m.data.shape} != {first.data.shape}")
        if m.ids != first.ids:
            raise ShapeMismatchError("checkpoint ID lists differ")
        total += m.data.astype(np.float64, copy=False)
    return FeatureMatrix._wrap_owned(total, first.ids)
