"""Population archive: frozen trajectory vectors, exact top-k inner-product search, snapshots."""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .encoder import UNIT_NORM_TOL, TrajectoryVector
from .errors import ArchiveError, ParseError

MAGIC = b"TRJARCH\x00"
VERSION = 1
ID_BYTES = 32
_HEADER = struct.Struct("<8sIIQ")       # magic, version, dim, size
_RECORD_META = struct.Struct("<32sBd1s")  # id, label, age, sex


@dataclass(frozen=True)
class ArchiveEntry:
    subject_id: str
    trajectory: TrajectoryVector
    label: int
    age: float
    sex: str


@dataclass(frozen=True)
class Neighbor:
    subject_id: str
    similarity: float
    label: int
    age: float
    sex: str


@dataclass(frozen=True)
class RetrievalResult:
    neighbors: tuple[Neighbor, ...]
    k: int

    @property
    def labels(self) -> list[int]:
        return [n.label for n in self.neighbors]

    @property
    def similarities(self) -> list[float]:
        return [n.similarity for n in self.neighbors]


class PopulationArchive:
    """Immutable store; row order is insertion order and breaks similarity ties."""

    def __init__(self, ids, matrix, labels, ages, sexes, dim=None):
        self._ids = tuple(ids)
        self._matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        if self._matrix.ndim != 2:
            self._matrix = self._matrix.reshape(len(self._ids), dim or 0)
        self._matrix.setflags(write=False)
        self._labels = tuple(int(v) for v in labels)
        self._ages = tuple(float(a) for a in ages)
        self._sexes = tuple(sexes)
        self._index = {sid: i for i, sid in enumerate(self._ids)}

    @property
    def size(self) -> int:
        return len(self._ids)

    def __len__(self):
        return self.size

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def __contains__(self, subject_id) -> bool:
        return subject_id in self._index

    def entry(self, i: int) -> ArchiveEntry:
        return ArchiveEntry(self._ids[i], TrajectoryVector(self._matrix[i].copy(), self._ids[i]),
                            self._labels[i], self._ages[i], self._sexes[i])

    def entries(self) -> list[ArchiveEntry]:
        return [self.entry(i) for i in range(self.size)]

    def _result(self, idx, sims, k) -> RetrievalResult:
        return RetrievalResult(tuple(
            Neighbor(self._ids[i], float(s), self._labels[i], self._ages[i], self._sexes[i])
            for i, s in zip(idx, sims)), k)

    def search(self, query, k: int) -> RetrievalResult:
        return search(self, query, k)

    def search_batch(self, queries: np.ndarray, k: int) -> list[RetrievalResult]:
        _check_searchable(self, k)
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise ArchiveError(f"query batch shape {q.shape} does not match archive dim {self.dim}")
        norms = np.linalg.norm(q, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad.size:
            raise ArchiveError(f"query row {int(bad[0])} is not unit-norm")
        idx, sims = kernels.topk_inner_product_batch(self._matrix, q, k)
        return [self._result(i, s, k) for i, s in zip(idx, sims)]


def build_archive(entries: Sequence[ArchiveEntry]) -> PopulationArchive:
    seen = set()
    rows = []
    dim = None
    for e in entries:
        if e.subject_id in seen:
            raise ArchiveError(f"duplicate subject id {e.subject_id!r}")
        seen.add(e.subject_id)
        vec = np.asarray(e.trajectory.values if isinstance(e.trajectory, TrajectoryVector)
                         else e.trajectory, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if vec.ndim != 1 or abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ArchiveError(f"entry {e.subject_id!r} is not unit-norm (norm {norm:.6f})")
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise ArchiveError(f"entry {e.subject_id!r} has dim {vec.size}, expected {dim}")
        if e.label not in (0, 1):
            raise ArchiveError(f"entry {e.subject_id!r} has label {e.label!r}")
        if len(e.subject_id.encode()) > ID_BYTES:
            raise ArchiveError(f"subject id {e.subject_id!r} longer than {ID_BYTES} bytes")
        rows.append(vec)
    matrix = np.stack(rows) if rows else np.zeros((0, 0))
    return PopulationArchive([e.subject_id for e in entries], matrix,
                             [e.label for e in entries], [e.age for e in entries],
                             [e.sex for e in entries])


def archive_from_arrays(ids, vectors, labels, ages, sexes) -> PopulationArchive:
    entries = [ArchiveEntry(str(i), TrajectoryVector(v, str(i)), int(y), float(a), str(s))
               for i, v, y, a, s in zip(ids, vectors, labels, ages, sexes)]
    return build_archive(entries)


def _check_searchable(archive: PopulationArchive, k: int):
    if archive.size == 0:
        raise ArchiveError("search on an empty archive")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ArchiveError(f"k must be a positive integer, got {k!r}")


def search(archive: PopulationArchive, query, k: int) -> RetrievalResult:
    """Exact top-k by inner product; ties go to the earlier-inserted entry."""
    _check_searchable(archive, k)
    q = query.values if isinstance(query, TrajectoryVector) else np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.size != archive.dim:
        raise ArchiveError(f"query dim {q.size} does not match archive dim {archive.dim}")
    if abs(float(np.linalg.norm(q)) - 1.0) > UNIT_NORM_TOL:
        raise ArchiveError("query is not unit-norm")
    idx, sims = kernels.topk_inner_product(archive.matrix, np.ascontiguousarray(q), int(k))
    return archive._result(idx, sims, int(k))


# ---------------------------------------------------------------- snapshots

def _encode(archive: PopulationArchive) -> bytes:
    dim = archive.dim if archive.size else 0
    parts = [_HEADER.pack(MAGIC, VERSION, dim, archive.size)]
    for i in range(archive.size):
        sex = archive._sexes[i].encode()
        if len(sex) != 1:
            raise ArchiveError(f"sex code {archive._sexes[i]!r} must be one byte")
        parts.append(_RECORD_META.pack(archive._ids[i].encode(), archive._labels[i],
                                       archive._ages[i], sex))
        parts.append(archive.matrix[i].astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_archive(archive: PopulationArchive, path) -> None:
    path = Path(path)
    data = _encode(archive)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path) -> PopulationArchive:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise ParseError(f"{path}: archive file truncated")
    magic, version, dim, size = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"{path}: not an archive snapshot")
    if version != VERSION:
        raise ParseError(f"{path}: unsupported archive version {version}")
    rec = _RECORD_META.size + 8 * dim
    expected = _HEADER.size + size * rec + 4
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(data)} (truncated or corrupt)")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:expected - 4]) != crc:
        raise ParseError(f"{path}: checksum mismatch")
    ids, labels, ages, sexes = [], [], [], []
    matrix = np.zeros((size, dim))
    off = _HEADER.size
    for i in range(size):
        raw_id, label, age, sex = _RECORD_META.unpack_from(data, off)
        off += _RECORD_META.size
        ids.append(raw_id.rstrip(b"\x00").decode())
        labels.append(label)
        ages.append(age)
        sexes.append(sex.decode())
        matrix[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=off)
        off += 8 * dim
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate ids in snapshot")
    return PopulationArchive(ids, matrix, labels, ages, sexes, dim=dim)
