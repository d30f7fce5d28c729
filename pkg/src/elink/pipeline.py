"""End-to-end linking: detect -> retrieve -> encode -> rerank -> enrich.

Retrieval modes:

``mmq``         multi-match lexical top-k, then dense rerank (the default)
``cosine_knn``  exact cosine top-k over all KB vectors, then dense rerank
``mmq_only``    multi-match rank-1, no encoding or rerank (ablation)
"""

from __future__ import annotations

import logging
import os
import time
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from .dense import ContextEncoder, PrecomputedEncoder, StubEncoder, cosine_knn, rerank
from .errors import DimensionMismatchError, EmptyQueryError, ValidationError
from .kb import EntityRecord, KbHandle, open_kb
from .lexical import (
    DEFAULT_BOOSTS,
    DEFAULT_TOP_K,
    INDEX_VERSION,
    CandidateList,
    LexIndex,
    QuerySpec,
    load_index,
    multi_match,
)
from .mention import Gazetteer, Mention, build_gazetteer, detect, from_external_spans

logger = logging.getLogger(__name__)

RETRIEVAL_MODES = ("mmq", "cosine_knn", "mmq_only")


@dataclass(frozen=True)
class LinkerConfig:
    top_k: int = DEFAULT_TOP_K
    retrieval_mode: str = "mmq"
    match_type: str = "best_fields"
    field_boosts: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BOOSTS))
    echo_top_n: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if self.retrieval_mode not in RETRIEVAL_MODES:
            raise ValidationError(f"retrieval_mode must be one of {RETRIEVAL_MODES}, got {self.retrieval_mode!r}")
        if self.echo_top_n < 0:
            raise ValidationError("echo_top_n must be >= 0")
        # surfaces bad match_type / boosts at construction time
        self.query("x")

    def query(self, text: str) -> QuerySpec:
        return QuerySpec(text, dict(self.field_boosts), self.match_type, self.top_k)


def make_encoder(spec: str, dim: int) -> ContextEncoder:
    """``stub``, ``stub:SEED`` or ``precomputed:PATH``."""
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        return StubEncoder(dim, seed=int(arg) if arg else 0)
    if kind == "precomputed" and arg:
        return PrecomputedEncoder.load(arg, dim)
    raise ValidationError(f"unknown encoder spec {spec!r}; expected stub[:SEED] or precomputed:PATH")


@dataclass
class LinkerDeps:
    kb: KbHandle
    index: LexIndex
    gazetteer: Gazetteer
    encoder: ContextEncoder

    def __post_init__(self):
        if self.index.doc_count != self.kb.entity_count or not np.array_equal(
            self.index.entity_ids, self.kb.entity_ids
        ):
            raise ValidationError(
                f"index covers {self.index.doc_count} entities that do not match the KB's {self.kb.entity_count}"
            )
        if self.encoder.dim != self.kb.embedding_dim:
            raise DimensionMismatchError(f"encoder dim {self.encoder.dim} != KB dim {self.kb.embedding_dim}")

    @classmethod
    def load(
        cls,
        kb_path: str | os.PathLike,
        index_path: str | os.PathLike,
        encoder: str = "stub",
        alias_path: str | os.PathLike | None = None,
    ) -> LinkerDeps:
        kb = open_kb(kb_path)
        try:
            index = load_index(index_path)
            gaz = build_gazetteer(kb, alias_path)
            enc = make_encoder(encoder, kb.embedding_dim)
            return cls(kb, index, gaz, enc)
        except Exception:
            kb.close()
            raise

    @property
    def index_version(self) -> str:
        return f"{INDEX_VERSION}/{self.index.analyzer}"


@dataclass
class Timing:
    detect_ms: float = 0.0
    retrieve_ms: float = 0.0
    encode_ms: float = 0.0
    rerank_ms: float = 0.0
    total_ms: float = 0.0

    def to_dict(self) -> dict:
        return {k: round(v, 3) for k, v in self.__dict__.items()}


@dataclass
class MentionLink:
    mention: Mention
    entity: EntityRecord | None
    dense_score: float | None = None
    lexical_score: float | None = None
    nil_reason: str | None = None
    candidate_ids: list[int] = field(default_factory=list)
    echo: list[dict] = field(default_factory=list)

    @property
    def is_nil(self) -> bool:
        return self.entity is None

    def to_dict(self) -> dict:
        out = {"mention": self.mention.to_dict(), "nil": self.is_nil}
        if self.entity is not None:
            e = self.entity
            out["entity"] = {
                "entity_id": e.entity_id,
                "title": e.title,
                "wikipedia_url": e.wikipedia_url,
                "wikidata_qid": e.wikidata_qid,
                "instance_of": list(e.instance_of),
            }
            out["dense_score"] = self.dense_score
            out["lexical_score"] = self.lexical_score
        else:
            out["entity"] = None
            out["nil_reason"] = self.nil_reason
        out["num_candidates"] = len(self.candidate_ids)
        if self.echo:
            out["candidates"] = self.echo
        return out


@dataclass
class LinkResult:
    text: str
    mode: str
    mentions: list[MentionLink]
    timing: Timing

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "mode": self.mode,
            "mentions": [m.to_dict() for m in self.mentions],
            "timing": self.timing.to_dict(),
        }


def _ms(t0: int, t1: int) -> float:
    return (t1 - t0) / 1e6


def _nil(mention: Mention, reason: str, candidates: CandidateList | None = None) -> MentionLink:
    ids = candidates.ids() if candidates is not None else []
    return MentionLink(mention, None, nil_reason=reason, candidate_ids=ids)


def _link_mention(
    text: str, mention: Mention, config: LinkerConfig, deps: LinkerDeps, timing: Timing
) -> MentionLink:
    kb = deps.kb
    clock = time.perf_counter_ns
    mode = config.retrieval_mode

    if mode == "cosine_knn":
        t0 = clock()
        ctx = deps.encoder.encode(text, mention.start, mention.end)
        t1 = clock()
        timing.encode_ms += _ms(t0, t1)
        if not np.any(ctx):
            return _nil(mention, "zero_context")
        candidates = cosine_knn(ctx, kb, config.top_k)
        embeddings = kb.embeddings_at(candidates.ordinals)
        timing.retrieve_ms += _ms(t1, clock())
    else:
        t0 = clock()
        try:
            candidates = multi_match(deps.index, config.query(mention.surface))
        except EmptyQueryError:
            timing.retrieve_ms += _ms(t0, clock())
            return _nil(mention, "empty_query")
        if len(candidates) == 0:
            timing.retrieve_ms += _ms(t0, clock())
            return _nil(mention, "no_candidates", candidates)
        if mode == "mmq_only":
            timing.retrieve_ms += _ms(t0, clock())
            top_id, top_score = candidates[0]
            link = MentionLink(
                mention, kb.get_entity(top_id), None, top_score, candidate_ids=candidates.ids()
            )
            if config.echo_top_n:
                link.echo = [{"entity_id": e, "lexical_score": s} for e, s in candidates.to_list()[: config.echo_top_n]]
            return link
        # candidates arrive "with their embeddings": fetching them is retrieval work
        embeddings = kb.embeddings_at(candidates.ordinals)
        t1 = clock()
        timing.retrieve_ms += _ms(t0, t1)
        ctx = deps.encoder.encode(text, mention.start, mention.end)
        timing.encode_ms += _ms(t1, clock())

    if len(candidates) == 0:
        return _nil(mention, "no_candidates", candidates)
    t0 = clock()
    provenance = "cosine_knn" if mode == "cosine_knn" else "mmq"
    ranked = rerank(ctx, candidates, kb, embeddings=embeddings, provenance=provenance)
    timing.rerank_ms += _ms(t0, clock())
    top_id, top_score = ranked.top()
    lexical = dict(zip(candidates.entity_ids.tolist(), candidates.scores.tolist()))
    link = MentionLink(
        mention,
        kb.get_entity(top_id),
        dense_score=top_score,
        lexical_score=lexical[top_id] if provenance == "mmq" else None,
        candidate_ids=candidates.ids(),
    )
    if config.echo_top_n:
        link.echo = [
            {"entity_id": e, "dense_score": s} for e, s in list(ranked)[: config.echo_top_n]
        ]
    return link


def _link_mentions(
    text: str, mentions: list[Mention], config: LinkerConfig, deps: LinkerDeps, t_start: int, timing: Timing
) -> LinkResult:
    links = [_link_mention(text, m, config, deps, timing) for m in mentions]
    timing.total_ms = _ms(t_start, time.perf_counter_ns())
    return LinkResult(text, config.retrieval_mode, links, timing)


def link_text(text: str, config: LinkerConfig, deps: LinkerDeps) -> LinkResult:
    t_start = time.perf_counter_ns()
    timing = Timing()
    mentions = detect(text, deps.gazetteer)
    timing.detect_ms = _ms(t_start, time.perf_counter_ns())
    return _link_mentions(text, mentions, config, deps, t_start, timing)


def link_with_spans(
    text: str, spans: Iterable[tuple], config: LinkerConfig, deps: LinkerDeps
) -> LinkResult:
    t_start = time.perf_counter_ns()
    timing = Timing()
    mentions = from_external_spans(text, spans)
    timing.detect_ms = _ms(t_start, time.perf_counter_ns())
    return _link_mentions(text, mentions, config, deps, t_start, timing)


class Linker:
    """Convenience bundle of deps + default config."""

    def __init__(self, deps: LinkerDeps, config: LinkerConfig | None = None):
        self.deps = deps
        self.config = config or LinkerConfig()

    def link(self, text: str, **overrides) -> LinkResult:
        cfg = replace(self.config, **overrides) if overrides else self.config
        return link_text(text, cfg, self.deps)

    def link_spans(self, text: str, spans: Iterable[tuple], **overrides) -> LinkResult:
        cfg = replace(self.config, **overrides) if overrides else self.config
        return link_with_spans(text, spans, cfg, self.deps)
