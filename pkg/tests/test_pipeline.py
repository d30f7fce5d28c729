from dataclasses import replace

import numpy as np
import pytest

from elink.dense import StubEncoder
from elink.errors import DimensionMismatchError, ValidationError
from elink.kb import open_kb
from elink.lexical import QuerySpec, build_index, multi_match
from elink.pipeline import Linker, LinkerConfig, LinkerDeps, link_text, link_with_spans, make_encoder

from .conftest import ACME_DIM, ACME_UTTERANCE, acme_records
from .oracles import BruteBM25, dot_brute_force

MMQ = LinkerConfig()
LEXICAL = LinkerConfig(retrieval_mode="mmq_only")
COSINE = LinkerConfig(retrieval_mode="cosine_knn")


def test_acme_links_to_q1001(acme_deps):
    result = link_text(ACME_UTTERANCE, MMQ, acme_deps)
    assert len(result.mentions) == 1
    link = result.mentions[0]
    assert link.mention.surface == "acme"
    assert link.entity.wikidata_qid == "Q1001"
    assert link.entity.entity_id in link.candidate_ids


def test_acme_agrees_with_stage_oracle(acme_deps):
    # lexical stage by brute force, then brute-force dot products over those candidates
    records, vectors = acme_records()
    cands = BruteBM25(records).search("acme", {"title": 2.0, "description": 1.0})
    by_id = {r.entity_id: (r, v) for r, v in zip(records, vectors)}
    ctx = StubEncoder(ACME_DIM).encode(ACME_UTTERANCE, 4, 8)
    ranked = dot_brute_force([by_id[e][1] for e, _ in cands], [e for e, _ in cands], ctx)
    want = by_id[ranked[0][0]][0]
    got = link_text(ACME_UTTERANCE, MMQ, acme_deps).mentions[0]
    assert got.entity == want
    assert got.dense_score == pytest.approx(ranked[0][1], rel=1e-9)


def test_no_mention_gives_empty_result(acme_deps):
    result = link_text("nothing interesting here", MMQ, acme_deps)
    assert result.mentions == []
    assert result.timing.total_ms >= 0
    assert link_with_spans(ACME_UTTERANCE, [], MMQ, acme_deps).mentions == []


def test_span_path_equals_detect_path(acme_deps):
    text = "I called Acme Corporation today"
    detected = link_text(text, MMQ, acme_deps)
    spanned = link_with_spans(text, [(9, 25)], MMQ, acme_deps)
    a, b = detected.mentions[0], spanned.mentions[0]
    assert (a.entity, a.dense_score, a.lexical_score, a.candidate_ids) == (
        b.entity,
        b.dense_score,
        b.lexical_score,
        b.candidate_ids,
    )
    with pytest.raises(ValidationError):
        link_with_spans(text, [(9, 99)], MMQ, acme_deps)


def test_nil_reasons(acme_deps):
    no_cands = link_with_spans("hello zzz", [(6, 9)], MMQ, acme_deps).mentions[0]
    assert no_cands.is_nil and no_cands.nil_reason == "no_candidates"
    assert no_cands.to_dict()["nil_reason"] == "no_candidates"
    empty_q = link_with_spans("hello ...", [(6, 9)], MMQ, acme_deps).mentions[0]
    assert empty_q.nil_reason == "empty_query"
    zero_ctx = link_with_spans("...", [(0, 3)], COSINE, acme_deps).mentions[0]
    assert zero_ctx.nil_reason == "zero_context"


def test_deterministic(deps10k, bench10k):
    bench, _ = bench10k
    for g in bench.gold[:20]:
        a = link_text(g.text, MMQ, deps10k).to_dict()
        b = link_text(g.text, MMQ, deps10k).to_dict()
        a.pop("timing"), b.pop("timing")
        assert a == b


def test_chosen_entity_is_a_candidate(deps10k, bench10k):
    bench, _ = bench10k
    for config in (MMQ, LEXICAL, COSINE, replace(MMQ, top_k=10)):
        for g in bench.gold[:40]:
            for link in link_with_spans(g.text, [(g.start, g.end)], config, deps10k).mentions:
                if not link.is_nil:
                    assert link.entity.entity_id in link.candidate_ids
                    assert len(link.candidate_ids) <= config.top_k


def test_mmq_only_is_lexical_rank1(homonym_deps, homonym):
    bench, _ = homonym
    for g in bench.gold:
        link = link_with_spans(g.text, [(g.start, g.end)], LEXICAL, homonym_deps).mentions[0]
        top = multi_match(homonym_deps.index, QuerySpec(g.text[g.start : g.end]))[0][0]
        assert link.entity.entity_id == top
        assert link.dense_score is None


def test_mmq_only_ignores_context(homonym_deps, homonym):
    bench, _ = homonym
    pair = [g for g in bench.gold if g.text[g.start : g.end] == bench.gold[0].text[bench.gold[0].start : bench.gold[0].end]]
    assert len(pair) == 2 and pair[0].qid != pair[1].qid
    chosen = {link_with_spans(g.text, [(g.start, g.end)], LEXICAL, homonym_deps).mentions[0].entity.wikidata_qid for g in pair}
    assert len(chosen) == 1
    full = {link_with_spans(g.text, [(g.start, g.end)], MMQ, homonym_deps).mentions[0].entity.wikidata_qid for g in pair}
    assert full == {g.qid for g in pair}


def test_reads_at_most_top_k_embeddings(deps10k, bench10k):
    bench, _ = bench10k
    kb = deps10k.kb
    for k in (5, 50, 250):
        for g in bench.gold[:10]:
            kb.io.reset()
            link_with_spans(g.text, [(g.start, g.end)], replace(MMQ, top_k=k), deps10k)
            _, reads, _ = kb.io.snapshot()
            assert reads <= k
    kb.io.reset()
    link_with_spans(bench.gold[0].text, [(bench.gold[0].start, bench.gold[0].end)], LEXICAL, deps10k)
    assert kb.io.snapshot()[1] == 0


def test_echo_candidates(acme_deps):
    result = link_text(ACME_UTTERANCE, replace(MMQ, echo_top_n=2), acme_deps).to_dict()
    echo = result["mentions"][0]["candidates"]
    assert len(echo) == 2 and echo[0]["dense_score"] >= echo[1]["dense_score"]


def test_config_validation():
    with pytest.raises(ValidationError):
        LinkerConfig(top_k=0)
    with pytest.raises(ValidationError):
        LinkerConfig(retrieval_mode="bm25")
    with pytest.raises(ValidationError):
        LinkerConfig(field_boosts={"title": -1})


def test_make_encoder(tmp_path):
    assert make_encoder("stub", 8).dim == 8
    assert make_encoder("stub:3", 8).seed == 3
    with pytest.raises(ValidationError):
        make_encoder("bert", 8)


def test_deps_reject_mismatch(acme_paths, deps10k):
    with open_kb(acme_paths["kb"]) as kb:
        index = build_index(kb)
        with pytest.raises(DimensionMismatchError):
            LinkerDeps(kb, index, deps10k.gazetteer, StubEncoder(ACME_DIM + 1))
        with pytest.raises(ValidationError):
            LinkerDeps(kb, deps10k.index, deps10k.gazetteer, StubEncoder(ACME_DIM))


def test_linker_wrapper(acme_deps):
    linker = Linker(acme_deps)
    assert linker.link(ACME_UTTERANCE).mentions[0].entity.wikidata_qid == "Q1001"
    assert linker.link(ACME_UTTERANCE, retrieval_mode="mmq_only").mode == "mmq_only"
    assert linker.link_spans(ACME_UTTERANCE, [(4, 8)]).mentions[0].mention.surface == "acme"


def test_result_json_shape(acme_deps):
    d = link_text(ACME_UTTERANCE, MMQ, acme_deps).to_dict()
    assert set(d) == {"text", "mode", "mentions", "timing"}
    assert set(d["timing"]) == {"detect_ms", "retrieve_ms", "encode_ms", "rerank_ms", "total_ms"}
    m = d["mentions"][0]
    assert m["entity"]["wikidata_qid"] == "Q1001" and m["nil"] is False
    assert isinstance(m["dense_score"], float) and np.isfinite(m["lexical_score"])
