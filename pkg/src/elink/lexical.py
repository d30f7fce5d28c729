"""Inverted index over entity ``title`` and ``description`` with multi-match BM25.

Scoring follows Elasticsearch's ``multi_match`` over per-field BM25:

* per field and term: Okapi BM25, k1=1.2, b=0.75, Lucene idf
  ``ln(1 + (N - df + 0.5) / (df + 0.5))``, N = number of indexed entities;
* field score = boost * sum over distinct query terms (in query order);
* ``best_fields`` combines fields by max, ``most_fields`` by sum.

Query terms are OR-ed; entities matching no term in any searched field are
never returned. Results are ordered by score descending, then entity_id
ascending.
"""

from __future__ import annotations

import io
import logging
import math
import os
import struct
import zlib
from collections import Counter
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import ANALYZER_VERSION, tokenize
from .errors import EmptyQueryError, IndexFormatError, IndexVersionError, ValidationError
from .kb import KbHandle

logger = logging.getLogger(__name__)

FIELDS = ("title", "description")
K1 = 1.2
B = 0.75
DEFAULT_BOOSTS = {"title": 2.0, "description": 1.0}
DEFAULT_TOP_K = 250
MATCH_TYPES = ("best_fields", "most_fields")

INDEX_MAGIC = b"ELIX"
INDEX_VERSION = 1


def idf(doc_count: int, df: int) -> float:
    return math.log(1.0 + (doc_count - df + 0.5) / (df + 0.5))


def bm25_field_score(
    tf: float,
    df: int,
    doc_count: int,
    field_len: float,
    avg_field_len: float,
    k1: float = K1,
    b: float = B,
) -> float:
    """BM25 contribution of one term in one field of one document."""
    if tf <= 0:
        return 0.0
    if df < 1:
        raise ValueError("document frequency must be >= 1 for a matching term")
    rel_len = field_len / avg_field_len if avg_field_len > 0 else 0.0
    return idf(doc_count, df) * (tf * (k1 + 1) / (tf + k1 * (1 - b + b * rel_len)))


@dataclass(frozen=True)
class QuerySpec:
    query_text: str
    field_boosts: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BOOSTS))
    match_type: str = "best_fields"
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if self.match_type not in MATCH_TYPES:
            raise ValidationError(f"match_type must be one of {MATCH_TYPES}, got {self.match_type!r}")
        if not self.field_boosts:
            raise ValidationError("at least one field must be searched")
        for name, boost in self.field_boosts.items():
            if name not in FIELDS:
                raise ValidationError(f"unknown field {name!r}; expected one of {FIELDS}")
            if not boost > 0:
                raise ValidationError(f"boost for {name!r} must be > 0, got {boost}")

    def terms(self) -> list[str]:
        return list(dict.fromkeys(tokenize(self.query_text)))


class CandidateList:
    """Ranked ``(entity_id, score)`` pairs; scores non-increasing, ties by id."""

    __slots__ = ("entity_ids", "scores", "ordinals")

    def __init__(self, entity_ids: np.ndarray, scores: np.ndarray, ordinals: np.ndarray | None = None):
        self.entity_ids = np.asarray(entity_ids, dtype=np.uint64)
        self.scores = np.asarray(scores, dtype=np.float64)
        self.ordinals = None if ordinals is None else np.asarray(ordinals, dtype=np.int64)

    @classmethod
    def empty(cls) -> CandidateList:
        return cls(np.empty(0, np.uint64), np.empty(0, np.float64), np.empty(0, np.int64))

    def __len__(self) -> int:
        return len(self.entity_ids)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return iter(zip(self.entity_ids.tolist(), self.scores.tolist()))

    def __getitem__(self, i: int) -> tuple[int, float]:
        return int(self.entity_ids[i]), float(self.scores[i])

    def ids(self) -> list[int]:
        return self.entity_ids.tolist()

    def to_list(self) -> list[tuple[int, float]]:
        return list(self)

    def __repr__(self) -> str:
        head = ", ".join(f"({e}, {s:.4g})" for e, s in self.to_list()[:3])
        return f"CandidateList(n={len(self)}, [{head}{', ...' if len(self) > 3 else ''}])"


def rank_candidates(
    ordinals: np.ndarray, scores: np.ndarray, entity_ids: np.ndarray, top_k: int
) -> CandidateList:
    """Top ``top_k`` of ``(ordinal, score)`` by score desc, entity_id asc."""
    if len(ordinals) > top_k:
        neg = -scores
        cutoff = np.partition(neg, top_k - 1)[top_k - 1]
        keep = neg <= cutoff
        ordinals, scores = ordinals[keep], scores[keep]
    ids = entity_ids[ordinals]
    order = np.lexsort((ids, -scores))[:top_k]
    return CandidateList(ids[order], scores[order], ordinals[order])


@dataclass
class FieldIndex:
    """Postings for one field, stored as CSR-style flat arrays."""

    lengths: np.ndarray  # uint32 [N], token count per entity
    terms: dict[str, int]  # term -> row into offsets
    offsets: np.ndarray  # int64 [n_terms + 1]
    ordinals: np.ndarray  # uint32, sorted within each term
    tfs: np.ndarray  # uint32

    @property
    def avg_length(self) -> float:
        n = len(self.lengths)
        return float(int(self.lengths.sum(dtype=np.uint64)) / n) if n else 0.0

    def postings(self, term: str) -> tuple[np.ndarray, np.ndarray] | None:
        row = self.terms.get(term)
        if row is None:
            return None
        lo, hi = int(self.offsets[row]), int(self.offsets[row + 1])
        return self.ordinals[lo:hi], self.tfs[lo:hi]

    def doc_freq(self, term: str) -> int:
        row = self.terms.get(term)
        return 0 if row is None else int(self.offsets[row + 1] - self.offsets[row])


class LexIndex:
    def __init__(
        self,
        entity_ids: np.ndarray,
        fields: dict[str, FieldIndex],
        analyzer: str = ANALYZER_VERSION,
    ):
        self.entity_ids = np.asarray(entity_ids, dtype=np.uint64)
        self.fields = fields
        self.analyzer = analyzer
        self._avg = {name: f.avg_length for name, f in fields.items()}
        self._len_f64 = {name: f.lengths.astype(np.float64) for name, f in fields.items()}

    @property
    def doc_count(self) -> int:
        return len(self.entity_ids)

    def avg_length(self, field_name: str) -> float:
        return self._avg[field_name]

    def field_lengths(self, field_name: str) -> np.ndarray:
        return self._len_f64[field_name]

    def field_scores(self, field_name: str, terms: list[str]) -> tuple[np.ndarray, np.ndarray] | None:
        """Unboosted per-entity field score (dense over ordinals) and match mask."""
        fi = self.fields[field_name]
        n = self.doc_count
        acc = None
        lengths = self._len_f64[field_name]
        avg = self._avg[field_name]
        for term in terms:
            post = fi.postings(term)
            if post is None:
                continue
            ords, tfs = post
            if acc is None:
                acc = np.zeros(n, dtype=np.float64)
                matched = np.zeros(n, dtype=bool)
            term_idf = idf(n, len(ords))
            tf = tfs.astype(np.float64)
            rel_len = lengths[ords] / avg
            acc[ords] += term_idf * (tf * (K1 + 1) / (tf + K1 * (1 - B + B * rel_len)))
            matched[ords] = True
        if acc is None:
            return None
        return acc, matched

    def multi_match(self, query: QuerySpec) -> CandidateList:
        return multi_match(self, query)

    def save(self, path: str | os.PathLike) -> None:
        save_index(self, path)


def multi_match(index: LexIndex, query: QuerySpec) -> CandidateList:
    terms = query.terms()
    if not terms:
        raise EmptyQueryError(f"query {query.query_text!r} has no indexable tokens")
    combined = None
    matched = None
    for name in FIELDS:
        if name not in query.field_boosts:
            continue
        res = index.field_scores(name, terms)
        if res is None:
            continue
        raw, mask = res
        boosted = query.field_boosts[name] * raw
        if combined is None:
            combined, matched = boosted, mask
        else:
            if query.match_type == "best_fields":
                combined = np.maximum(combined, boosted)
            else:
                combined = combined + boosted
            matched = matched | mask
    if combined is None:
        return CandidateList.empty()
    ords = np.flatnonzero(matched)
    return rank_candidates(ords, combined[ords], index.entity_ids, query.top_k)


def build_index(kb: KbHandle) -> LexIndex:
    n = kb.entity_count
    per_field: dict[str, dict[str, list[tuple[int, int]]]] = {f: {} for f in FIELDS}
    lengths = {f: np.zeros(n, dtype=np.uint32) for f in FIELDS}
    entity_ids = np.array(kb.entity_ids, dtype=np.uint64)
    for ordinal, rec in enumerate(kb.iter_records()):
        for name, text in (("title", rec.title), ("description", rec.description)):
            toks = tokenize(text)
            lengths[name][ordinal] = len(toks)
            postings = per_field[name]
            for term, tf in Counter(toks).items():
                postings.setdefault(term, []).append((ordinal, tf))
    fields = {}
    for name in FIELDS:
        postings = per_field[name]
        vocab = sorted(postings)
        offsets = np.zeros(len(vocab) + 1, dtype=np.int64)
        total = 0
        for i, term in enumerate(vocab):
            total += len(postings[term])
            offsets[i + 1] = total
        flat = np.empty((total, 2), dtype=np.uint32)
        pos = 0
        for term in vocab:
            block = postings[term]
            flat[pos : pos + len(block)] = block
            pos += len(block)
        fields[name] = FieldIndex(
            lengths=lengths[name],
            terms={t: i for i, t in enumerate(vocab)},
            offsets=offsets,
            ordinals=np.ascontiguousarray(flat[:, 0]),
            tfs=np.ascontiguousarray(flat[:, 1]),
        )
    logger.info("indexed %d entities", n)
    return LexIndex(entity_ids, fields)


# -- serialization -----------------------------------------------------------
#
# magic b"ELIX" | version u32 | analyzer tag (u16 len, utf-8) | doc_count u64
# | n_fields u32 | entity_ids u64[N]
# per field (in FIELDS order):
#   name (u16 len, utf-8) | lengths u32[N] | n_terms u32 | postings_total u64
#   | terms blob (u32 len, "\n"-joined utf-8, sorted) | offsets i64[n_terms+1]
#   | ordinals u32[total] | tfs u32[total]
# crc32 of all preceding bytes, u32


def _put_str(buf: io.BytesIO, s: str, fmt: str = "<H") -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(raw)))
    buf.write(raw)


def serialize_index(index: LexIndex) -> bytes:
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<I", INDEX_VERSION))
    _put_str(buf, index.analyzer)
    buf.write(struct.pack("<QI", index.doc_count, len(index.fields)))
    buf.write(index.entity_ids.astype("<u8").tobytes())
    for name in FIELDS:
        fi = index.fields[name]
        _put_str(buf, name)
        buf.write(fi.lengths.astype("<u4").tobytes())
        vocab = sorted(fi.terms, key=fi.terms.__getitem__)
        buf.write(struct.pack("<IQ", len(vocab), len(fi.ordinals)))
        _put_str(buf, "\n".join(vocab), "<I")
        buf.write(fi.offsets.astype("<i8").tobytes())
        buf.write(fi.ordinals.astype("<u4").tobytes())
        buf.write(fi.tfs.astype("<u4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_index(index: LexIndex, path: str | os.PathLike) -> None:
    Path(path).write_bytes(serialize_index(index))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexFormatError("index file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str = "<H") -> str:
        (n,) = self.unpack(fmt)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError("index file has a corrupt string") from exc

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt)


def load_index(path: str | os.PathLike) -> LexIndex:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"not an index file: {path}")
    r = _Reader(data[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != INDEX_VERSION:
        raise IndexVersionError(f"index format version {version}, expected {INDEX_VERSION}")
    analyzer = r.string()
    if analyzer != ANALYZER_VERSION:
        raise IndexVersionError(f"index built with analyzer {analyzer!r}, this build uses {ANALYZER_VERSION!r}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise IndexFormatError("index checksum mismatch (truncated or corrupt)")
    n, n_fields = r.unpack("<QI")
    entity_ids = r.array("<u8", n).astype(np.uint64)
    fields = {}
    for _ in range(n_fields):
        name = r.string()
        lengths = r.array("<u4", n).astype(np.uint32)
        n_terms, total = r.unpack("<IQ")
        blob = r.string("<I")
        vocab = blob.split("\n") if n_terms else []
        if len(vocab) != n_terms:
            raise IndexFormatError(f"field {name!r}: term table size mismatch")
        offsets = r.array("<i8", n_terms + 1).astype(np.int64)
        ordinals = r.array("<u4", total).astype(np.uint32)
        tfs = r.array("<u4", total).astype(np.uint32)
        if offsets[-1] != total:
            raise IndexFormatError(f"field {name!r}: postings offsets inconsistent")
        fields[name] = FieldIndex(lengths, {t: i for i, t in enumerate(vocab)}, offsets, ordinals, tfs)
    if set(fields) != set(FIELDS) or r.pos != len(r.data):
        raise IndexFormatError("index file layout mismatch")
    return LexIndex(entity_ids, fields, analyzer)
