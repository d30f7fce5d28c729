"""Dense second stage: context encoders, dot-product rerank, exact cosine KNN.

Also home to the model-container pruning tool, which strips the
candidate-tower tensors from a bi-encoder checkpoint since entity vectors
are already stored in the KB.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO, Protocol

import numpy as np

from .analysis import tokenize
from .errors import DimensionMismatchError, ModelContainerError, ValidationError
from .kb import KbHandle, check_embedding
from .lexical import CandidateList, rank_candidates

logger = logging.getLogger(__name__)


class ContextEncoder(Protocol):
    dim: int

    def encode(self, text: str, start: int, end: int) -> np.ndarray: ...


class StubEncoder:
    """Deterministic hashed n-gram encoder standing in for the context tower.

    Each unigram and bigram of the utterance tokens is hashed (keyed BLAKE2b,
    fixed seed) to one bucket and a sign; the bucket counts are L2-normalized.
    Entity vectors built with :meth:`embed_tokens` live in the same space, so
    shared context words raise the dot product.
    """

    def __init__(self, dim: int, seed: int = 0, ngram: int = 2):
        if dim <= 0:
            raise ValueError("dim must be positive")
        if ngram < 1:
            raise ValueError("ngram must be >= 1")
        self.dim = dim
        self.seed = seed
        self.ngram = ngram
        key = seed.to_bytes(8, "little", signed=False)
        dim_ = dim

        @lru_cache(maxsize=1 << 16)
        def slot(feature: str) -> tuple[int, float]:
            h = int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=key).digest(), "little")
            return h % dim_, (1.0 if h >> 63 else -1.0)

        self._slot = slot

    def features(self, tokens: Sequence[str]) -> Iterator[str]:
        for n in range(1, self.ngram + 1):
            for i in range(len(tokens) - n + 1):
                yield " ".join(tokens[i : i + n])

    def embed_tokens(self, tokens: Sequence[str], weight: float = 1.0) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for feat in self.features(tokens):
            idx, sign = self._slot(feat)
            vec[idx] += sign * weight
        norm = float(np.sqrt(vec @ vec))
        if norm > 0:
            vec /= norm
        return vec.astype(np.float32)

    def encode(self, text: str, start: int, end: int) -> np.ndarray:
        tokens = tokenize(text[:start]) + tokenize(text[start:end]) + tokenize(text[end:])
        return self.embed_tokens(tokens)

    def __repr__(self) -> str:
        return f"StubEncoder(dim={self.dim}, seed={self.seed}, ngram={self.ngram})"


class EncoderMiss(KeyError):
    pass


class PrecomputedEncoder:
    """Context vectors looked up by exact ``(utterance, start, end)``. No fallback."""

    def __init__(self, table: dict[tuple[str, int, int], np.ndarray], dim: int):
        self.dim = dim
        self._table = table

    @classmethod
    def load(cls, path: str | os.PathLike, dim: int | None = None) -> PrecomputedEncoder:
        table: dict[tuple[str, int, int], np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    key = (row["utterance"], int(row["span_start"]), int(row["span_end"]))
                    vec = check_embedding(row["vector"], dim)
                except (ValueError, KeyError, TypeError) as exc:
                    raise ValidationError(f"{path}:{lineno}: bad encoding row: {exc}") from exc
                if dim is None:
                    dim = len(vec)
                table[key] = vec
        if dim is None:
            raise ValidationError(f"{path}: no encodings and no dim given")
        return cls(table, dim)

    def encode(self, text: str, start: int, end: int) -> np.ndarray:
        try:
            return self._table[(text, start, end)]
        except KeyError:
            raise EncoderMiss(f"no precomputed encoding for span ({start}, {end}) of {text!r}") from None

    def __len__(self) -> int:
        return len(self._table)


@dataclass(frozen=True)
class RerankedList:
    entity_ids: np.ndarray
    scores: np.ndarray
    provenance: str

    def __len__(self) -> int:
        return len(self.entity_ids)

    def __iter__(self):
        return iter(zip(self.entity_ids.tolist(), self.scores.tolist()))

    def top(self) -> tuple[int, float]:
        return int(self.entity_ids[0]), float(self.scores[0])


def rerank(
    context_vec: np.ndarray,
    candidates: CandidateList,
    kb: KbHandle,
    embeddings: np.ndarray | None = None,
    provenance: str = "mmq",
) -> RerankedList:
    """Order candidates by ``dot(context_vec, embedding)``; lexical scores are ignored.

    ``embeddings`` may carry already-fetched candidate vectors (row-aligned
    with ``candidates``) to avoid a second read.
    """
    if len(candidates) == 0:
        raise ValidationError("cannot rerank an empty candidate list")
    ctx = np.asarray(context_vec, dtype=np.float64)
    if ctx.shape != (kb.embedding_dim,):
        raise DimensionMismatchError(f"context vector has shape {ctx.shape}, KB dim is {kb.embedding_dim}")
    if embeddings is None:
        embeddings = kb.get_embeddings(candidates.ids())
    scores = embeddings.astype(np.float64) @ ctx
    ids = candidates.entity_ids
    order = np.lexsort((ids, -scores))
    return RerankedList(ids[order], scores[order], provenance)


def cosine_knn(context_vec: np.ndarray, kb: KbHandle, k: int, block_rows: int = 8192) -> CandidateList:
    """Exact top-k entities by cosine similarity, scanning every KB vector."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if kb.entity_count == 0:
        raise ValidationError("cosine_knn over an empty KB")
    q = np.asarray(context_vec, dtype=np.float64)
    if q.shape != (kb.embedding_dim,):
        raise DimensionMismatchError(f"context vector has shape {q.shape}, KB dim is {kb.embedding_dim}")
    qnorm = float(np.sqrt(q @ q))
    if qnorm == 0.0:
        raise ValidationError("zero-norm context vector has no cosine similarity")
    scores = np.empty(kb.entity_count, dtype=np.float64)
    for start, block in kb.iter_vector_blocks(block_rows):
        m = block.astype(np.float64)
        norms = np.sqrt(np.einsum("ij,ij->i", m, m))
        dots = m @ q
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = dots / (norms * qnorm)
        cos[norms == 0.0] = 0.0
        scores[start : start + len(m)] = cos
    ordinals = np.arange(kb.entity_count)
    return rank_candidates(ordinals, scores, np.asarray(kb.entity_ids), k)


# -- model container pruning -------------------------------------------------
#
# magic b"ELWT", then until EOF: name_len u32 | name utf-8 | byte_len u64 | payload

CONTAINER_MAGIC = b"ELWT"
_NAME_LEN = struct.Struct("<I")
_PAYLOAD_LEN = struct.Struct("<Q")
_COPY_CHUNK = 1 << 20


@dataclass(frozen=True)
class PruneReport:
    tensors_kept: int
    tensors_removed: int
    bytes_before: int
    bytes_after: int

    @property
    def ratio(self) -> float:
        return self.bytes_after / self.bytes_before if self.bytes_before else 1.0

    def to_dict(self) -> dict:
        return {
            "tensors_kept": self.tensors_kept,
            "tensors_removed": self.tensors_removed,
            "bytes_before": self.bytes_before,
            "bytes_after": self.bytes_after,
            "ratio": self.ratio,
        }


def write_container(path: str | os.PathLike, tensors: Iterable[tuple[str, bytes]]) -> None:
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        for name, payload in tensors:
            raw = name.encode("utf-8")
            fh.write(_NAME_LEN.pack(len(raw)))
            fh.write(raw)
            fh.write(_PAYLOAD_LEN.pack(len(payload)))
            fh.write(payload)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelContainerError(f"truncated container while reading {what}")
    return buf


def iter_container(fh: BinaryIO, size: int) -> Iterator[tuple[str, int, int]]:
    """Yield ``(name, payload_offset, payload_len)``; leaves ``fh`` positioned arbitrarily."""
    if _read_exact(fh, len(CONTAINER_MAGIC), "magic") != CONTAINER_MAGIC:
        raise ModelContainerError("bad container magic")
    pos = len(CONTAINER_MAGIC)
    while pos < size:
        fh.seek(pos)
        (name_len,) = _NAME_LEN.unpack(_read_exact(fh, _NAME_LEN.size, "name length"))
        try:
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelContainerError("tensor name is not UTF-8") from exc
        (n,) = _PAYLOAD_LEN.unpack(_read_exact(fh, _PAYLOAD_LEN.size, "payload length"))
        offset = pos + _NAME_LEN.size + name_len + _PAYLOAD_LEN.size
        if offset + n > size:
            raise ModelContainerError(f"tensor {name!r} payload runs past end of file")
        yield name, offset, n
        pos = offset + n


def read_container(path: str | os.PathLike) -> dict[str, bytes]:
    size = os.path.getsize(path)
    out = {}
    with open(path, "rb") as fh:
        for name, offset, n in list(iter_container(fh, size)):
            fh.seek(offset)
            out[name] = fh.read(n)
    return out


def prune_model_artifact(
    in_path: str | os.PathLike, out_path: str | os.PathLike, remove_prefix: str = "cand_"
) -> PruneReport:
    """Copy the container, dropping every tensor whose name starts with ``remove_prefix``."""
    in_path, out_path = Path(in_path), Path(out_path)
    size = in_path.stat().st_size
    with open(in_path, "rb") as src:
        entries = list(iter_container(src, size))
        kept = [e for e in entries if not e[0].startswith(remove_prefix)]
        if not kept:
            raise ModelContainerError(f"every tensor matches prefix {remove_prefix!r}; refusing to write an empty model")
        tmp = out_path.with_name(out_path.name + ".tmp")
        with open(tmp, "wb") as dst:
            dst.write(CONTAINER_MAGIC)
            for name, offset, n in kept:
                raw = name.encode("utf-8")
                dst.write(_NAME_LEN.pack(len(raw)) + raw + _PAYLOAD_LEN.pack(n))
                src.seek(offset)
                remaining = n
                while remaining:
                    chunk = src.read(min(_COPY_CHUNK, remaining))
                    dst.write(chunk)
                    remaining -= len(chunk)
        os.replace(tmp, out_path)
    report = PruneReport(
        tensors_kept=len(kept),
        tensors_removed=len(entries) - len(kept),
        bytes_before=size,
        bytes_after=out_path.stat().st_size,
    )
    logger.info("pruned %s -> %s: %s", in_path, out_path, report)
    return report
