import os

import numpy as np
import pytest

from elink.analysis import normalize_phrase, tokenize, tokenize_with_offsets
from elink.errors import CorruptKbError, DimensionMismatchError, EntityNotFound, NotAKbError
from elink.kb import (
    HEADER_FILE,
    SEGMENT_FILES,
    VECTORS_FILE,
    EntityRecord,
    check_embedding,
    open_kb,
    put_entities,
)


def rec(eid, title="T", qid=None, dim=4, desc="", types=()):
    return EntityRecord(eid, title, desc, f"https://en.wikipedia.org/wiki/{title}_{eid}", qid, types, dim)


@pytest.fixture
def three(tmp_path):
    records = [rec(7, "Seven", "Q7"), rec(3, "Three", "Q3"), rec(11, "Eleven")]
    vectors = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]], dtype=np.float32)
    put_entities(tmp_path / "kb", records, vectors)
    return tmp_path / "kb", records, vectors


def test_tokenize_examples():
    assert tokenize("Acme Corp.") == ["acme", "corp"]
    assert tokenize("") == []
    assert tokenize("ABC-123 def") == ["abc", "123", "def"]
    assert tokenize("under_score Émile") == ["under", "score", "émile"]


def test_tokenize_offsets_point_into_original():
    text = "Hi, ACME-Corp!"
    toks = tokenize_with_offsets(text)
    assert [t.text for t in toks] == ["hi", "acme", "corp"]
    assert [text[t.start : t.end] for t in toks] == ["Hi", "ACME", "Corp"]
    assert normalize_phrase("  Acme   CORPORATION ") == "acme corporation"


def test_open_three_entity_fixture(three):
    path, records, _ = three
    with open_kb(path) as kb:
        stats = kb.stats()
        assert stats.entity_count == 3
        assert stats.qid_coverage == pytest.approx(2 / 3)
        for r in records:
            assert kb.get_entity(r.entity_id) == r
        assert list(kb.entity_ids) == [3, 7, 11]


def test_embedding_round_trip(three):
    path, _, _ = three
    with open_kb(path) as kb:
        assert kb.get_embedding(7).tolist() == [1.0, 0.0, 0.0, 0.0]
        assert kb.get_embeddings([11, 3]).tolist() == [[0, 0, 1, 0], [0, 1, 0, 0]]


def test_unknown_id_is_not_found(three):
    path, _, _ = three
    with open_kb(path) as kb:
        with pytest.raises(EntityNotFound) as exc:
            kb.get_entity(8)
        assert exc.value.entity_id == 8
        with pytest.raises(EntityNotFound):
            kb.get_embedding(99)
        assert 7 in kb and 8 not in kb


def test_empty_dir_is_not_a_kb(tmp_path):
    with pytest.raises(NotAKbError, match="not a KB"):
        open_kb(tmp_path)
    with pytest.raises(NotAKbError):
        open_kb(tmp_path / "missing")


def test_bad_magic(three):
    path, _, _ = three
    raw = bytearray((path / HEADER_FILE).read_bytes())
    raw[:4] = b"XXXX"
    (path / HEADER_FILE).write_bytes(bytes(raw))
    with pytest.raises(NotAKbError):
        open_kb(path)


def test_dim_mismatch_detected(three):
    path, _, _ = three
    # 3 records x 5 floats instead of 4
    (path / VECTORS_FILE).write_bytes(np.zeros((3, 5), dtype="<f4").tobytes())
    with pytest.raises(DimensionMismatchError):
        open_kb(path)


def test_truncated_vectors_is_corrupt(three):
    path, _, _ = three
    data = (path / VECTORS_FILE).read_bytes()
    (path / VECTORS_FILE).write_bytes(data[:-3])
    with pytest.raises(CorruptKbError):
        open_kb(path)


def test_empty_kb(tmp_path):
    stats = put_entities(tmp_path / "kb", [], np.zeros((0, 8), dtype=np.float32))
    assert stats.entity_count == 0 and stats.qid_coverage == 1.0
    with open_kb(tmp_path / "kb") as kb:
        assert kb.stats().entity_count == 0
        assert kb.stats().qid_coverage == 1.0
        assert list(kb.iter_records()) == []


def test_put_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        put_entities(tmp_path / "a", [rec(1), rec(1, "U")], np.zeros((2, 4)))
    with pytest.raises(DimensionMismatchError):
        put_entities(tmp_path / "b", [rec(1, dim=3)], np.zeros((1, 4)))
    with pytest.raises(DimensionMismatchError):
        put_entities(tmp_path / "c", [rec(1), rec(2)], np.zeros((1, 4)))
    with pytest.raises(ValueError, match="finite"):
        put_entities(tmp_path / "d", [rec(1)], [[np.nan, 0, 0, 0]])


def test_record_validation():
    with pytest.raises(ValueError):
        rec(1, qid="X12")
    with pytest.raises(ValueError):
        rec(-1)
    with pytest.raises(ValueError):
        rec(1, title="")
    assert rec(2**64 - 1).entity_id == 2**64 - 1


def test_check_embedding():
    assert check_embedding([1, 2], 2).dtype == np.float32
    with pytest.raises(DimensionMismatchError):
        check_embedding([1, 2, 3], 2)
    with pytest.raises(ValueError):
        check_embedding([1, float("inf")])


def test_1000_record_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    ids = np.unique(rng.integers(0, 2**63, size=1000, dtype=np.uint64))
    records = [
        rec(int(i), f"Entity {k}", f"Q{k}" if k % 3 else None, dim=8, desc=f"desc {k}", types=("product",))
        for k, i in enumerate(ids)
    ]
    vectors = rng.normal(size=(1000, 8)).astype(np.float32)
    put_entities(tmp_path / "kb", records, vectors)
    with open_kb(tmp_path / "kb") as kb:
        for r, v in zip(records, vectors):
            assert kb.get_entity(r.entity_id) == r
            assert np.array_equal(kb.get_embedding(r.entity_id), v)
        assert [r.entity_id for r in kb.iter_records()] == sorted(int(i) for i in ids)


def test_put_is_order_independent(tmp_path):
    records = [rec(5, "A"), rec(2, "B"), rec(9, "C")]
    vectors = np.arange(12, dtype=np.float32).reshape(3, 4)
    put_entities(tmp_path / "x", records, vectors)
    put_entities(tmp_path / "y", records[::-1], vectors[::-1])
    for name in SEGMENT_FILES:
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_bytes_on_disk_matches_filesystem(deps10k):
    kb = deps10k.kb
    on_disk = sum(os.path.getsize(kb.path / f) for f in SEGMENT_FILES)
    assert kb.stats().bytes_on_disk == on_disk
    assert kb.stats().entity_count == 10_000


def test_250_embeddings_read_under_one_percent(deps100k):
    kb = deps100k.kb
    kb.io.reset()
    ids = kb.entity_ids[:: len(kb) // 250][:250]
    got = kb.get_embeddings(ids)
    vector_bytes, reads, _ = kb.io.snapshot()
    assert got.shape == (250, 256)
    assert reads == 250
    assert vector_bytes == 250 * 256 * 4
    assert vector_bytes < 0.01 * kb.vectors_file_bytes


def test_handle_is_thread_safe(three):
    from concurrent.futures import ThreadPoolExecutor

    path, records, vectors = three
    with open_kb(path) as kb:

        def work(i):
            r = records[i % 3]
            return kb.get_entity(r.entity_id) == r and np.array_equal(kb.get_embedding(r.entity_id), vectors[i % 3])

        with ThreadPoolExecutor(8) as pool:
            assert all(pool.map(work, range(300)))
