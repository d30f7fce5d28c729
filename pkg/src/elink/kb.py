"""On-disk knowledge base: entity records plus fixed-stride float32 embeddings.

Directory layout (all integers little-endian)::

    kb.header   magic b"ELKB" | version u32 | entity_count u64 | embedding_dim u32
                | qid_count u64 | records_bytes u64                       (36 bytes)
    kb.idmap    entity_count x (entity_id u64, record_offset u64), sorted by id;
                row index is the record ordinal
    kb.records  entity_count x (length u32, UTF-8 JSON object), in ordinal order
    kb.vectors  entity_count x embedding_dim float32, in ordinal order

Embedding lookups are a single positional read of ``dim * 4`` bytes, so linking
touches only the candidates it scores. Every read against ``kb.vectors`` and
``kb.records`` goes through an :class:`IoCounter` so tests can verify that.
"""

from __future__ import annotations

import json
import logging
import os
import re
import struct
import threading
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptKbError, DimensionMismatchError, EntityNotFound, NotAKbError

logger = logging.getLogger(__name__)

MAGIC = b"ELKB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQIQQ")
_LEN = struct.Struct("<I")
IDMAP_DTYPE = np.dtype([("entity_id", "<u8"), ("offset", "<u8")])
VECTOR_DTYPE = np.dtype("<f4")

HEADER_FILE = "kb.header"
RECORDS_FILE = "kb.records"
VECTORS_FILE = "kb.vectors"
IDMAP_FILE = "kb.idmap"
SEGMENT_FILES = (HEADER_FILE, IDMAP_FILE, RECORDS_FILE, VECTORS_FILE)

MAX_ENTITY_ID = 2**64 - 1
QID_RE = re.compile(r"Q[0-9]+")


@dataclass(frozen=True)
class EntityRecord:
    entity_id: int
    title: str
    description: str
    wikipedia_url: str
    wikidata_qid: str | None
    instance_of: tuple[str, ...]
    embedding_dim: int

    def __post_init__(self):
        if not 0 <= self.entity_id <= MAX_ENTITY_ID:
            raise ValueError(f"entity_id out of u64 range: {self.entity_id}")
        if not self.title:
            raise ValueError("title must be non-empty")
        if self.wikidata_qid is not None and not QID_RE.fullmatch(self.wikidata_qid):
            raise ValueError(f"malformed wikidata_qid: {self.wikidata_qid!r}")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if not isinstance(self.instance_of, tuple):
            object.__setattr__(self, "instance_of", tuple(self.instance_of))

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "title": self.title,
            "description": self.description,
            "wikipedia_url": self.wikipedia_url,
            "wikidata_qid": self.wikidata_qid,
            "instance_of": list(self.instance_of),
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EntityRecord:
        return cls(
            entity_id=int(d["entity_id"]),
            title=d["title"],
            description=d["description"],
            wikipedia_url=d["wikipedia_url"],
            wikidata_qid=d.get("wikidata_qid"),
            instance_of=tuple(d.get("instance_of", ())),
            embedding_dim=int(d["embedding_dim"]),
        )


@dataclass(frozen=True)
class KbStats:
    entity_count: int
    embedding_dim: int
    bytes_on_disk: int
    qid_coverage: float

    def to_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "embedding_dim": self.embedding_dim,
            "bytes_on_disk": self.bytes_on_disk,
            "qid_coverage": self.qid_coverage,
        }


@dataclass
class IoCounter:
    """Byte/read accounting for the records and vectors segments."""

    vector_bytes: int = 0
    vector_reads: int = 0
    record_bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add_vector(self, nbytes: int, reads: int = 1) -> None:
        with self._lock:
            self.vector_bytes += nbytes
            self.vector_reads += reads

    def add_record(self, nbytes: int) -> None:
        with self._lock:
            self.record_bytes += nbytes

    def snapshot(self) -> tuple[int, int, int]:
        with self._lock:
            return self.vector_bytes, self.vector_reads, self.record_bytes

    def reset(self) -> None:
        with self._lock:
            self.vector_bytes = self.vector_reads = self.record_bytes = 0


def _encode_record(rec: EntityRecord) -> bytes:
    body = json.dumps(rec.to_dict(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(body)) + body


def put_entities(
    path: str | os.PathLike,
    records: Sequence[EntityRecord],
    vectors: np.ndarray | Sequence[Sequence[float]],
) -> KbStats:
    """Write a KB to ``path``. Row ``i`` of ``vectors`` belongs to ``records[i]``.

    Records are stored sorted by entity_id regardless of input order, so the
    output bytes depend only on the set of (record, vector) pairs.
    """
    path = Path(path)
    vectors = np.asarray(vectors, dtype=np.float32)
    n = len(records)
    if vectors.ndim != 2:
        if n == 0 and vectors.size == 0:
            raise DimensionMismatchError("cannot infer embedding_dim for an empty KB; pass shape (0, dim)")
        raise DimensionMismatchError(f"vectors must be 2-D, got shape {vectors.shape}")
    if vectors.shape[0] != n:
        raise DimensionMismatchError(f"{n} records but {vectors.shape[0]} vectors")
    dim = vectors.shape[1]
    if dim <= 0:
        raise DimensionMismatchError("embedding_dim must be positive")
    if not np.isfinite(vectors).all():
        raise ValueError("embeddings must be finite")
    for rec in records:
        if rec.embedding_dim != dim:
            raise DimensionMismatchError(
                f"record {rec.entity_id} declares dim {rec.embedding_dim}, vectors have {dim}"
            )

    ids = np.fromiter((r.entity_id for r in records), dtype=np.uint64, count=n)
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    if n > 1:
        dup = np.nonzero(sorted_ids[1:] == sorted_ids[:-1])[0]
        if dup.size:
            raise ValueError(f"duplicate entity_id {int(sorted_ids[dup[0]])}")

    path.mkdir(parents=True, exist_ok=True)
    (path / HEADER_FILE).unlink(missing_ok=True)
    idmap = np.zeros(n, dtype=IDMAP_DTYPE)
    idmap["entity_id"] = sorted_ids
    qid_count = 0
    offset = 0
    with open(path / RECORDS_FILE, "wb") as fh:
        for ordinal, src in enumerate(order):
            rec = records[int(src)]
            blob = _encode_record(rec)
            idmap["offset"][ordinal] = offset
            fh.write(blob)
            offset += len(blob)
            if rec.wikidata_qid is not None:
                qid_count += 1
    with open(path / VECTORS_FILE, "wb") as fh:
        fh.write(np.ascontiguousarray(vectors[order], dtype=VECTOR_DTYPE).tobytes())
    with open(path / IDMAP_FILE, "wb") as fh:
        fh.write(idmap.tobytes())
    # header last: a directory without one is "not a KB", never half-valid
    with open(path / HEADER_FILE, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, dim, qid_count, offset))
    logger.info("wrote KB at %s: %d entities, dim %d", path, n, dim)
    return KbStats(
        entity_count=n,
        embedding_dim=dim,
        bytes_on_disk=sum((path / f).stat().st_size for f in SEGMENT_FILES),
        qid_coverage=qid_count / n if n else 1.0,
    )


class KbHandle:
    """Read handle over a KB directory. Safe to share between threads."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        header_path = self.path / HEADER_FILE
        if not self.path.is_dir() or not header_path.is_file():
            raise NotAKbError(f"not a KB: {self.path}")
        raw = header_path.read_bytes()
        if len(raw) != HEADER.size:
            raise CorruptKbError(f"header has {len(raw)} bytes, expected {HEADER.size}")
        magic, version, count, dim, qid_count, records_bytes = HEADER.unpack(raw)
        if magic != MAGIC:
            raise NotAKbError(f"not a KB (bad magic {magic!r}): {self.path}")
        if version != FORMAT_VERSION:
            raise CorruptKbError(f"unsupported KB format version {version}")
        if dim <= 0 or qid_count > count:
            raise CorruptKbError("inconsistent header fields")
        self.entity_count = count
        self.embedding_dim = dim
        self._qid_count = qid_count
        self._stride = dim * VECTOR_DTYPE.itemsize

        for name in (IDMAP_FILE, RECORDS_FILE, VECTORS_FILE):
            if not (self.path / name).is_file():
                raise CorruptKbError(f"missing segment {name}")
        vec_size = (self.path / VECTORS_FILE).stat().st_size
        if vec_size != count * self._stride:
            row_bytes, rem = divmod(vec_size, count) if count else (0, 1)
            if rem == 0 and row_bytes % VECTOR_DTYPE.itemsize == 0:
                raise DimensionMismatchError(
                    f"header dim {dim} but vectors segment holds "
                    f"{vec_size // count // VECTOR_DTYPE.itemsize} floats per record"
                )
            raise CorruptKbError(f"vectors segment is {vec_size} bytes, expected {count * self._stride}")
        if (self.path / RECORDS_FILE).stat().st_size != records_bytes:
            raise CorruptKbError("records segment size does not match header")
        idmap_raw = (self.path / IDMAP_FILE).read_bytes()
        if len(idmap_raw) != count * IDMAP_DTYPE.itemsize:
            raise CorruptKbError("idmap size does not match header entity_count")
        idmap = np.frombuffer(idmap_raw, dtype=IDMAP_DTYPE)
        self._ids = np.ascontiguousarray(idmap["entity_id"])
        self._offsets = np.ascontiguousarray(idmap["offset"])
        if count > 1 and not (self._ids[1:] > self._ids[:-1]).all():
            raise CorruptKbError("idmap not strictly sorted by entity_id")

        self.io = IoCounter()
        self._rec_fd = os.open(self.path / RECORDS_FILE, os.O_RDONLY)
        self._vec_fd = os.open(self.path / VECTORS_FILE, os.O_RDONLY)
        self._closed = False
        if count:
            first = self._read_record(0)
            if first.embedding_dim != dim:
                self.close()
                raise DimensionMismatchError(
                    f"header dim {dim} but record {first.entity_id} declares {first.embedding_dim}"
                )

    # -- lifecycle -------------------------------------------------------

    def close(self) -> None:
        if not self._closed:
            os.close(self._rec_fd)
            os.close(self._vec_fd)
            self._closed = True

    def __enter__(self) -> KbHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __len__(self) -> int:
        return self.entity_count

    def __repr__(self) -> str:
        return f"KbHandle({str(self.path)!r}, entities={self.entity_count}, dim={self.embedding_dim})"

    # -- lookup ----------------------------------------------------------

    @property
    def entity_ids(self) -> np.ndarray:
        """All entity ids in ordinal order (read-only view)."""
        view = self._ids.view()
        view.flags.writeable = False
        return view

    def ordinal(self, entity_id: int) -> int:
        if not 0 <= entity_id <= MAX_ENTITY_ID:
            raise EntityNotFound(entity_id)
        key = np.uint64(entity_id)
        pos = int(np.searchsorted(self._ids, key))
        if pos >= self.entity_count or self._ids[pos] != key:
            raise EntityNotFound(entity_id)
        return pos

    def __contains__(self, entity_id: int) -> bool:
        try:
            self.ordinal(entity_id)
        except EntityNotFound:
            return False
        return True

    def _pread_exact(self, fd: int, n: int, offset: int, what: str) -> bytes:
        buf = os.pread(fd, n, offset)
        if len(buf) != n:
            raise CorruptKbError(f"truncated {what} at offset {offset}: wanted {n} bytes, got {len(buf)}")
        return buf

    def _read_record(self, ordinal: int) -> EntityRecord:
        off = int(self._offsets[ordinal])
        (length,) = _LEN.unpack(self._pread_exact(self._rec_fd, _LEN.size, off, "record length"))
        body = self._pread_exact(self._rec_fd, length, off + _LEN.size, "record body")
        self.io.add_record(_LEN.size + length)
        try:
            return EntityRecord.from_dict(json.loads(body))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptKbError(f"undecodable record at ordinal {ordinal}: {exc}") from exc

    def get_entity(self, entity_id: int) -> EntityRecord:
        return self._read_record(self.ordinal(entity_id))

    def entity_at(self, ordinal: int) -> EntityRecord:
        return self._read_record(ordinal)

    def embedding_at(self, ordinal: int) -> np.ndarray:
        buf = self._pread_exact(self._vec_fd, self._stride, ordinal * self._stride, "vector")
        self.io.add_vector(self._stride)
        return np.frombuffer(buf, dtype=VECTOR_DTYPE).astype(np.float32)

    def get_embedding(self, entity_id: int) -> np.ndarray:
        return self.embedding_at(self.ordinal(entity_id))

    def get_embeddings(self, entity_ids: Iterable[int]) -> np.ndarray:
        """Stack embeddings for ``entity_ids`` (in the given order), one read each."""
        return self.embeddings_at([self.ordinal(int(e)) for e in entity_ids])

    def embeddings_at(self, ordinals: Iterable[int]) -> np.ndarray:
        ordinals = [int(o) for o in ordinals]
        for o in ordinals:
            if not 0 <= o < self.entity_count:
                raise IndexError(f"ordinal {o} out of range")
        out = np.empty((len(ordinals), self.embedding_dim), dtype=np.float32)
        stride = self._stride
        for row, ordinal in enumerate(ordinals):
            buf = self._pread_exact(self._vec_fd, stride, ordinal * stride, "vector")
            out[row] = np.frombuffer(buf, dtype=VECTOR_DTYPE)
        self.io.add_vector(stride * len(ordinals), len(ordinals))
        return out

    # -- scans -----------------------------------------------------------

    def iter_records(self) -> Iterator[EntityRecord]:
        """Stream every record in ordinal (entity_id) order."""
        with open(self.path / RECORDS_FILE, "rb") as fh:
            for ordinal in range(self.entity_count):
                head = fh.read(_LEN.size)
                if len(head) != _LEN.size:
                    raise CorruptKbError(f"truncated record length at ordinal {ordinal}")
                (length,) = _LEN.unpack(head)
                body = fh.read(length)
                if len(body) != length:
                    raise CorruptKbError(f"truncated record body at ordinal {ordinal}")
                self.io.add_record(_LEN.size + length)
                try:
                    yield EntityRecord.from_dict(json.loads(body))
                except (ValueError, KeyError, TypeError) as exc:
                    raise CorruptKbError(f"undecodable record at ordinal {ordinal}: {exc}") from exc

    def iter_vector_blocks(self, block_rows: int = 8192) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(first_ordinal, block)`` over the whole embedding segment."""
        for start in range(0, self.entity_count, block_rows):
            rows = min(block_rows, self.entity_count - start)
            buf = self._pread_exact(self._vec_fd, rows * self._stride, start * self._stride, "vector block")
            self.io.add_vector(len(buf))
            yield start, np.frombuffer(buf, dtype=VECTOR_DTYPE).reshape(rows, self.embedding_dim)

    def stats(self) -> KbStats:
        n = self.entity_count
        return KbStats(
            entity_count=n,
            embedding_dim=self.embedding_dim,
            bytes_on_disk=sum((self.path / f).stat().st_size for f in SEGMENT_FILES),
            qid_coverage=self._qid_count / n if n else 1.0,
        )

    @property
    def vectors_file_bytes(self) -> int:
        return self.entity_count * self._stride


def open_kb(path: str | os.PathLike) -> KbHandle:
    return KbHandle(path)


def check_embedding(values: Sequence[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Coerce to a float32 vector, enforcing length and finiteness."""
    vec = np.asarray(values, dtype=np.float32)
    if vec.ndim != 1:
        raise DimensionMismatchError(f"embedding must be 1-D, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise DimensionMismatchError(f"embedding length {vec.shape[0]} != dim {dim}")
    if not np.isfinite(vec).all():
        raise ValueError("embedding contains NaN or Inf")
    return vec
