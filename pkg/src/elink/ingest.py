"""Offline KB build: entity dump + precomputed Wikipedia->Wikidata mapping -> filtered KB.

Dump format (JSONL, one entity per line)::

    {"title": ..., "description": ..., "wikipedia_url": ..., "embedding": [...]}

Mapping format (TSV, 3+ columns, extra columns ignored)::

    wikipedia_title <TAB> Q-id <TAB> comma-separated instance-of tags
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, IngestError
from .kb import QID_RE, EntityRecord, KbStats, check_embedding, put_entities

logger = logging.getLogger(__name__)

DEFAULT_BANNED_TYPES = frozenset({"person", "disambiguation", "location"})
MAPPING_MALFORMED_LIMIT = 0.10
DUMP_MALFORMED_LIMIT = 0.01
BUILD_REPORT_FILE = "build_report.json"

_ID_HASH_KEY = b"elink-entity-id-v1"


def normalize_title(title: str) -> str:
    """Underscores to spaces, whitespace collapsed. Case is preserved."""
    return " ".join(title.replace("_", " ").split())


def normalize_tag(tag: str) -> str:
    return " ".join(tag.split()).lower()


def entity_id_for_url(url: str) -> int:
    digest = hashlib.blake2b(url.encode("utf-8"), digest_size=8, key=_ID_HASH_KEY).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class RawEntity:
    title: str
    description: str
    wikipedia_url: str
    embedding: np.ndarray
    entity_id: int | None = None

    def __post_init__(self):
        if not self.title:
            raise ValueError("title must be non-empty")


@dataclass
class WikiMapping:
    entries: dict[str, tuple[str, tuple[str, ...]]] = field(default_factory=dict)
    row_errors: list[str] = field(default_factory=list)
    duplicates: int = 0

    def lookup(self, title: str) -> tuple[str, tuple[str, ...]] | None:
        return self.entries.get(normalize_title(title))

    def add(self, title: str, qid: str, instance_of: Iterable[str]) -> bool:
        """Insert a row; returns False (and counts a duplicate) if the title is taken."""
        key = normalize_title(title)
        if key in self.entries:
            self.duplicates += 1
            return False
        self.entries[key] = (qid, tuple(instance_of))
        return True

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class FilterConfig:
    banned_types: frozenset[str] = DEFAULT_BANNED_TYPES
    drop_unmapped: bool = False

    def __post_init__(self):
        tags = frozenset(normalize_tag(t) for t in self.banned_types)
        if any(not t for t in tags):
            raise ValueError("banned_types members must be non-empty")
        object.__setattr__(self, "banned_types", tags)


def load_wiki_mapping(path: str | os.PathLike) -> WikiMapping:
    mapping = WikiMapping()
    total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            total += 1
            cols = line.split("\t")
            if len(cols) < 3:
                mapping.row_errors.append(f"line {lineno}: expected >= 3 columns, got {len(cols)}")
                continue
            title, qid, tags = cols[0], cols[1].strip(), cols[2]
            if not normalize_title(title):
                mapping.row_errors.append(f"line {lineno}: empty title")
                continue
            if not QID_RE.fullmatch(qid):
                mapping.row_errors.append(f"line {lineno}: invalid QID {qid!r}")
                continue
            instance_of = [t for t in (normalize_tag(x) for x in tags.split(",")) if t]
            if not mapping.add(title, qid, instance_of):
                logger.debug("line %d: duplicate title %r, keeping first row", lineno, title)
    if mapping.duplicates:
        logger.warning("%s: %d duplicate titles resolved first-row-wins", path, mapping.duplicates)
    if total and len(mapping.row_errors) > MAPPING_MALFORMED_LIMIT * total:
        raise IngestError(
            f"{path}: {len(mapping.row_errors)}/{total} malformed rows exceeds {MAPPING_MALFORMED_LIMIT:.0%}",
            mapping.row_errors,
        )
    if mapping.row_errors:
        logger.warning("%s: skipped %d malformed rows", path, len(mapping.row_errors))
    return mapping


def resolve_wikidata(raw: RawEntity, mapping: WikiMapping) -> EntityRecord:
    hit = mapping.lookup(raw.title)
    qid, instance_of = hit if hit is not None else (None, ())
    entity_id = raw.entity_id if raw.entity_id is not None else entity_id_for_url(raw.wikipedia_url)
    return EntityRecord(
        entity_id=entity_id,
        title=raw.title,
        description=raw.description,
        wikipedia_url=raw.wikipedia_url,
        wikidata_qid=qid,
        instance_of=instance_of,
        embedding_dim=len(raw.embedding),
    )


def filter_entity(record: EntityRecord, config: FilterConfig) -> bool:
    """True to keep the record."""
    if config.drop_unmapped and record.wikidata_qid is None:
        return False
    return not any(normalize_tag(t) in config.banned_types for t in record.instance_of)


def drop_reason(record: EntityRecord, config: FilterConfig) -> str | None:
    if config.drop_unmapped and record.wikidata_qid is None:
        return "unmapped"
    for tag in record.instance_of:
        if normalize_tag(tag) in config.banned_types:
            return f"type:{normalize_tag(tag)}"
    return None


def parse_dump_line(line: str) -> RawEntity:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("dump line is not a JSON object")
    for key in ("title", "description", "wikipedia_url", "embedding"):
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    if not isinstance(obj["title"], str) or not obj["title"]:
        raise ValueError("title must be a non-empty string")
    if not isinstance(obj["description"], str) or not isinstance(obj["wikipedia_url"], str):
        raise ValueError("description and wikipedia_url must be strings")
    emb = obj["embedding"]
    if not isinstance(emb, list) or not emb or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in emb
    ):
        raise ValueError("embedding must be a non-empty array of numbers")
    entity_id = obj.get("entity_id")
    if entity_id is not None and (not isinstance(entity_id, int) or not 0 <= entity_id < 2**64):
        raise ValueError("entity_id must be an unsigned 64-bit integer")
    return RawEntity(
        title=obj["title"],
        description=obj["description"],
        wikipedia_url=obj["wikipedia_url"],
        embedding=check_embedding(emb),
        entity_id=entity_id,
    )


def build_kb(
    dump_path: str | os.PathLike,
    mapping_path: str | os.PathLike,
    config: FilterConfig,
    out_path: str | os.PathLike,
) -> KbStats:
    """Resolve, filter, and write a KB. Also writes ``build_report.json`` next to it."""
    mapping = load_wiki_mapping(mapping_path)
    records: list[EntityRecord] = []
    vectors: list[np.ndarray] = []
    malformed: list[str] = []
    dropped: Counter[str] = Counter()
    seen_urls: dict[int, str] = {}
    total = 0
    dim = None
    with open(dump_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            total += 1
            try:
                raw = parse_dump_line(line)
            except ValueError as exc:
                malformed.append(f"line {lineno}: {exc}")
                continue
            if dim is None:
                dim = len(raw.embedding)
            elif len(raw.embedding) != dim:
                raise DimensionMismatchError(
                    f"{dump_path}:{lineno}: embedding length {len(raw.embedding)} != {dim}"
                )
            rec = resolve_wikidata(raw, mapping)
            prev = seen_urls.get(rec.entity_id)
            if prev is not None:
                if prev == raw.wikipedia_url:
                    dropped["duplicate_url"] += 1
                    continue
                raise IngestError(f"entity_id collision between {prev!r} and {raw.wikipedia_url!r}")
            seen_urls[rec.entity_id] = raw.wikipedia_url
            reason = drop_reason(rec, config)
            if reason is not None:
                dropped[reason] += 1
                continue
            records.append(rec)
            vectors.append(raw.embedding)
    if total and len(malformed) > DUMP_MALFORMED_LIMIT * total:
        raise IngestError(
            f"{dump_path}: {len(malformed)}/{total} malformed lines exceeds {DUMP_MALFORMED_LIMIT:.0%}",
            malformed,
        )
    if dim is None:
        raise IngestError(f"{dump_path}: no valid entities; cannot determine embedding dim", malformed)
    matrix = np.stack(vectors) if vectors else np.zeros((0, dim), dtype=np.float32)
    stats = put_entities(out_path, records, matrix)
    report = {
        "input_lines": total,
        "malformed": len(malformed),
        "dropped": dict(sorted(dropped.items())),
        "dropped_total": sum(dropped.values()),
        "kept": len(records),
        "mapping_rows": len(mapping),
        "mapping_row_errors": len(mapping.row_errors),
        "mapping_duplicates": mapping.duplicates,
        "banned_types": sorted(config.banned_types),
        "drop_unmapped": config.drop_unmapped,
        "stats": stats.to_dict(),
    }
    Path(out_path, BUILD_REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if malformed:
        logger.warning("%s: skipped %d malformed lines", dump_path, len(malformed))
    logger.info("built KB: %d kept of %d (dropped %s)", len(records), total, dict(dropped))
    return stats
