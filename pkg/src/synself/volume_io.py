"""Voxel volumes, synapse tables and embedding matrices, plus their on-disk formats.

Volume files are a single JSON header line followed by the raw little-endian
payload in x-fastest order: ``index(x, y, z) = x + nx * (y + ny * z)``.
In-memory arrays are C-ordered with axes ``[z, y, x]`` so that the flat memory
layout matches the file payload exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

HEADER_MAX_BYTES = 65536
DTYPE_WIDTH = {"u8": 1, "u64": 8}
EMBEDDING_KINDS = ("penultimate", "projected")
UNIT_NORM_TOL = 1e-9


class VolumeFormatError(ValueError):
    """Malformed volume/table/embedding file or invariant violation."""


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]  # (nx, ny, nz)
    dtype: str
    voxel_size_nm: tuple[float, float, float] = (8.0, 8.0, 8.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise VolumeFormatError(f"dims must be three extents >= 1, got {self.dims}")
        if self.dtype not in DTYPE_WIDTH:
            raise VolumeFormatError(f"unknown dtype {self.dtype!r} (want 'u8' or 'u64')")
        if len(self.voxel_size_nm) != 3 or any(s <= 0 for s in self.voxel_size_nm):
            raise VolumeFormatError(f"voxel sizes must be > 0, got {self.voxel_size_nm}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size_nm", tuple(float(s) for s in self.voxel_size_nm))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def linear_index(x: int, y: int, z: int, dims: tuple[int, int, int]) -> int:
    """Flat payload index of voxel (x, y, z); x varies fastest."""
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


class _BaseVolume:
    """Shared behaviour for intensity/segmentation volumes.

    ``voxels`` has shape (nz, ny, nx) so voxel (x, y, z) is ``voxels[z, y, x]``.
    """

    _np_dtype: np.dtype
    _header_dtype: str

    def __init__(self, header: VolumeHeader, voxels: np.ndarray):
        if header.dtype != self._header_dtype:
            raise VolumeFormatError(
                f"{type(self).__name__} requires dtype {self._header_dtype!r}, got {header.dtype!r}"
            )
        nx, ny, nz = header.dims
        voxels = np.asarray(voxels, dtype=self._np_dtype)
        if voxels.shape != (nz, ny, nx):
            raise VolumeFormatError(
                f"voxel array shape {voxels.shape} does not match dims (nx,ny,nz)={header.dims}"
            )
        self.header = header
        self.voxels = np.ascontiguousarray(voxels)

    def voxel(self, x: int, y: int, z: int):
        return self.voxels[z, y, x]

    def in_bounds(self, pos: tuple[int, int, int]) -> bool:
        nx, ny, nz = self.header.dims
        x, y, z = pos
        return 0 <= x < nx and 0 <= y < ny and 0 <= z < nz

    def __eq__(self, other) -> bool:
        return (
            type(other) is type(self)
            and other.header == self.header
            and np.array_equal(other.voxels, self.voxels)
        )


class IntensityVolume(_BaseVolume):
    _np_dtype = np.uint8
    _header_dtype = "u8"


class SegmentationVolume(_BaseVolume):
    """Supervoxel label grid; label 0 means 'no segment'."""

    _np_dtype = np.uint64
    _header_dtype = "u64"


def check_same_geometry(a: _BaseVolume, b: _BaseVolume) -> None:
    if a.header.dims != b.header.dims or a.header.voxel_size_nm != b.header.voxel_size_nm:
        raise VolumeFormatError(
            f"volume geometry mismatch: {a.header.dims}/{a.header.voxel_size_nm} vs "
            f"{b.header.dims}/{b.header.voxel_size_nm}"
        )


@dataclass(frozen=True)
class SynapseRecord:
    id: int
    pos: tuple[int, int, int]  # (x, y, z) voxel coordinates
    supervoxel_id: int
    class_label: int | None = None

    def __post_init__(self):
        if self.id < 0:
            raise VolumeFormatError(f"synapse id must be non-negative, got {self.id}")
        if self.supervoxel_id <= 0:
            raise VolumeFormatError(
                f"synapse {self.id}: supervoxel_id must be a positive label, got {self.supervoxel_id}"
            )
        if self.class_label is not None and self.class_label < 0:
            raise VolumeFormatError(
                f"synapse {self.id}: class_label must be non-negative, got {self.class_label}"
            )
        object.__setattr__(self, "pos", tuple(int(c) for c in self.pos))


@dataclass
class EmbeddingMatrix:
    """Per-synapse representations, row-aligned with ``synapse_ids``."""

    synapse_ids: list[int]
    values: np.ndarray  # (M, D) float64
    kind: str = "penultimate"
    _skip_checks: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self._skip_checks:
            return
        if self.kind not in EMBEDDING_KINDS:
            raise VolumeFormatError(f"embedding kind must be one of {EMBEDDING_KINDS}, got {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise VolumeFormatError(f"embedding matrix must be M x D with M,D >= 1, got shape {self.values.shape}")
        if len(self.synapse_ids) != self.values.shape[0]:
            raise VolumeFormatError(
                f"{len(self.synapse_ids)} synapse ids for {self.values.shape[0]} embedding rows"
            )
        if len(set(self.synapse_ids)) != len(self.synapse_ids):
            raise VolumeFormatError("duplicate synapse ids in embedding matrix")
        if self.kind == "projected":
            norms = np.linalg.norm(self.values, axis=1)
            bad = np.nonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)[0]
            if bad.size:
                i = int(bad[0])
                raise VolumeFormatError(
                    f"projected embedding row for id {self.synapse_ids[i]} has norm {norms[i]!r}, expected 1"
                )

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def row_of(self, synapse_id: int) -> np.ndarray:
        return self.values[self.synapse_ids.index(synapse_id)]


# ---------------------------------------------------------------------------
# volume files


def _atomic_write(path, write_fn) -> None:
    """Write via a temp file + rename so failures leave no partial file."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            write_fn(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_volume(vol: IntensityVolume | SegmentationVolume, path) -> None:
    header = vol.header
    head = {
        "dims": list(header.dims),
        "dtype": header.dtype,
        "voxel_size_nm": list(header.voxel_size_nm),
    }
    payload = np.ascontiguousarray(vol.voxels).astype(
        "<u1" if header.dtype == "u8" else "<u8", copy=False
    )

    def body(f):
        f.write(json.dumps(head, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        f.write(payload.tobytes())

    _atomic_write(path, body)


def read_volume(path) -> IntensityVolume | SegmentationVolume:
    with open(path, "rb") as f:
        line = f.readline(HEADER_MAX_BYTES)
        if not line.endswith(b"\n"):
            raise VolumeFormatError(
                f"{path}: malformed header at byte offset 0: no newline within {HEADER_MAX_BYTES} bytes"
            )
        try:
            head = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise VolumeFormatError(f"{path}: malformed header at byte offset 0: {e}") from e
        if not isinstance(head, dict) or not {"dims", "dtype", "voxel_size_nm"} <= set(head):
            raise VolumeFormatError(
                f"{path}: malformed header at byte offset 0: need keys dims, dtype, voxel_size_nm"
            )
        if head["dtype"] not in DTYPE_WIDTH:
            raise VolumeFormatError(
                f"{path}: unknown dtype {head['dtype']!r} in header at byte offset 0"
            )
        try:
            header = VolumeHeader(tuple(head["dims"]), head["dtype"], tuple(head["voxel_size_nm"]))
        except (TypeError, VolumeFormatError) as e:
            raise VolumeFormatError(f"{path}: malformed header at byte offset 0: {e}") from e
        payload_offset = len(line)
        expected = header.n_voxels * DTYPE_WIDTH[header.dtype]
        data = f.read()
    if len(data) != expected:
        raise VolumeFormatError(
            f"{path}: payload length mismatch at byte offset {payload_offset}: "
            f"expected {expected} bytes, got {len(data)}"
        )
    nx, ny, nz = header.dims
    if header.dtype == "u8":
        arr = np.frombuffer(data, dtype=np.uint8).reshape(nz, ny, nx).copy()
        return IntensityVolume(header, arr)
    arr = np.frombuffer(data, dtype="<u8").reshape(nz, ny, nx).astype(np.uint64)
    return SegmentationVolume(header, arr)


# ---------------------------------------------------------------------------
# synapse tables

SYNAPSE_COLUMNS = ["id", "x", "y", "z", "supervoxel_id", "class_label"]


def write_synapse_table(records: list[SynapseRecord], path) -> None:
    def body(f):
        import io

        text = io.TextIOWrapper(f, encoding="utf-8", newline="")
        w = csv.writer(text, lineterminator="\n")
        w.writerow(SYNAPSE_COLUMNS)
        for r in records:
            w.writerow(
                [r.id, r.pos[0], r.pos[1], r.pos[2], r.supervoxel_id,
                 "" if r.class_label is None else r.class_label]
            )
        text.flush()
        text.detach()

    _atomic_write(path, body)


def _parse_int(value: str, column: str, row: int, path) -> int:
    try:
        return int(value)
    except ValueError:
        raise VolumeFormatError(
            f"{path}: non-integer field {column}={value!r} at data row {row}"
        ) from None


def read_synapse_table(path) -> list[SynapseRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise VolumeFormatError(f"{path}: empty synapse table") from None
        if header != SYNAPSE_COLUMNS:
            missing = [c for c in SYNAPSE_COLUMNS if c not in header]
            detail = f"missing column(s) {missing}" if missing else f"unexpected header {header}"
            raise VolumeFormatError(f"{path}: bad synapse table header: {detail}")
        records = []
        seen = set()
        for row_i, row in enumerate(reader):
            if len(row) != len(SYNAPSE_COLUMNS):
                raise VolumeFormatError(
                    f"{path}: data row {row_i} has {len(row)} fields, expected {len(SYNAPSE_COLUMNS)}"
                )
            rid = _parse_int(row[0], "id", row_i, path)
            if rid in seen:
                raise VolumeFormatError(f"{path}: duplicate synapse id {rid} at data row {row_i}")
            seen.add(rid)
            pos = tuple(_parse_int(row[i], c, row_i, path) for i, c in ((1, "x"), (2, "y"), (3, "z")))
            sv = _parse_int(row[4], "supervoxel_id", row_i, path)
            label = None if row[5] == "" else _parse_int(row[5], "class_label", row_i, path)
            records.append(SynapseRecord(rid, pos, sv, label))
    return records


def check_synapses_in_bounds(records: list[SynapseRecord], header: VolumeHeader) -> None:
    nx, ny, nz = header.dims
    for r in records:
        x, y, z = r.pos
        if not (0 <= x < nx and 0 <= y < ny and 0 <= z < nz):
            raise VolumeFormatError(
                f"synapse {r.id} at {r.pos} lies outside volume dims {header.dims}"
            )


# ---------------------------------------------------------------------------
# embedding matrices


def _fmt17(v: float) -> str:
    return f"{v:.17g}"


def write_embeddings(emb: EmbeddingMatrix, path) -> None:
    def body(f):
        lines = [f"# kind={emb.kind}"]
        lines.append("id," + ",".join(f"e{j}" for j in range(emb.dim)))
        for rid, row in zip(emb.synapse_ids, emb.values):
            lines.append(f"{rid}," + ",".join(_fmt17(v) for v in row))
        f.write(("\n".join(lines) + "\n").encode("utf-8"))

    _atomic_write(path, body)


def read_embeddings(path) -> EmbeddingMatrix:
    with open(path, encoding="utf-8") as f:
        kind_line = f.readline().rstrip("\n")
        if not kind_line.startswith("# kind="):
            raise VolumeFormatError(f"{path}: first line must be '# kind=<kind>', got {kind_line!r}")
        kind = kind_line[len("# kind="):]
        header = f.readline().rstrip("\n").split(",")
        if len(header) < 2 or header[0] != "id" or header[1:] != [f"e{j}" for j in range(len(header) - 1)]:
            raise VolumeFormatError(f"{path}: bad embedding header {header}")
        dim = len(header) - 1
        ids, rows = [], []
        for row_i, line in enumerate(f):
            parts = line.rstrip("\n").split(",")
            if len(parts) != dim + 1:
                raise VolumeFormatError(
                    f"{path}: ragged row {row_i}: {len(parts)} fields, expected {dim + 1}"
                )
            ids.append(_parse_int(parts[0], "id", row_i, path))
            try:
                rows.append([float(p) for p in parts[1:]])
            except ValueError:
                raise VolumeFormatError(f"{path}: non-numeric entry at data row {row_i}") from None
    if not rows:
        raise VolumeFormatError(f"{path}: embedding matrix has no rows")
    return EmbeddingMatrix(ids, np.array(rows, dtype=np.float64), kind)
