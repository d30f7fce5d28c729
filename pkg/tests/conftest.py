from __future__ import annotations

import sys

import numpy as np
import pytest

from elink.analysis import tokenize
from elink.dense import StubEncoder
from elink.ingest import entity_id_for_url
from elink.kb import EntityRecord, open_kb, put_entities
from elink.lexical import build_index, save_index
from elink.pipeline import LinkerDeps
from elink.synth import generate_benchmark, homonym_fixture

ACME_DIM = 16
ACME_UTTERANCE = "our acme subscription renews"

# (title, description, qid, instance_of, words the planted embedding is built from)
ACME_ROWS = [
    ("Acme Corporation", "subscription software company", "Q1001", ("organization",),
     "acme subscription renews software"),
    ("Acme Rockets", "rocket and anvil maker", "Q1002", ("product",), "acme rockets anvil launch"),
    ("Dialpad", "business phone system", "Q1003", ("product",), "dialpad phone calls"),
    ("Globex", "industrial conglomerate", "Q1004", ("organization",), "globex industry"),
]


def acme_records(dim: int = ACME_DIM) -> tuple[list[EntityRecord], np.ndarray]:
    enc = StubEncoder(dim)
    records, vectors = [], []
    for title, desc, qid, types, words in ACME_ROWS:
        url = "https://en.wikipedia.org/wiki/" + title.replace(" ", "_")
        records.append(EntityRecord(entity_id_for_url(url), title, desc, url, qid, types, dim))
        vectors.append(enc.embed_tokens(tokenize(words)))
    return records, np.stack(vectors)


@pytest.fixture
def acme_paths(tmp_path):
    records, vectors = acme_records()
    kb_dir = tmp_path / "kb"
    put_entities(kb_dir, records, vectors)
    with open_kb(kb_dir) as kb:
        save_index(build_index(kb), tmp_path / "index.elix")
    aliases = tmp_path / "aliases.tsv"
    aliases.write_text("acme\torganization\ndialpad\tproduct\n", encoding="utf-8")
    return {"kb": kb_dir, "index": tmp_path / "index.elix", "aliases": aliases}


@pytest.fixture
def acme_deps(acme_paths):
    deps = LinkerDeps.load(acme_paths["kb"], acme_paths["index"], "stub", acme_paths["aliases"])
    yield deps
    deps.kb.close()


def _written(tmp_path_factory, name, bench):
    paths = bench.write(tmp_path_factory.mktemp(name))
    return bench, paths


@pytest.fixture(scope="session")
def bench10k(tmp_path_factory):
    return _written(tmp_path_factory, "bench10k", generate_benchmark(10_000, 200, dim=64, seed=0))


@pytest.fixture(scope="session")
def homonym(tmp_path_factory):
    return _written(tmp_path_factory, "homonym", homonym_fixture())


@pytest.fixture(scope="session")
def bench100k(tmp_path_factory):
    return _written(tmp_path_factory, "bench100k", generate_benchmark(100_000, 200, dim=256, seed=0))


@pytest.fixture(scope="session")
def deps10k(bench10k):
    _, paths = bench10k
    deps = LinkerDeps.load(paths["kb"], paths["index"], "stub", paths["aliases"])
    yield deps
    deps.kb.close()


@pytest.fixture(scope="session")
def deps100k(bench100k):
    _, paths = bench100k
    deps = LinkerDeps.load(paths["kb"], paths["index"], "stub", paths["aliases"])
    yield deps
    deps.kb.close()


@pytest.fixture(scope="session")
def homonym_deps(homonym):
    _, paths = homonym
    deps = LinkerDeps.load(paths["kb"], paths["index"], "stub", paths["aliases"])
    yield deps
    deps.kb.close()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in results:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
    passed = sum(ok for _, ok, _ in results)
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
