"""Seeded synthetic KBs and gold sets for tests and benchmarks.

Entities are product/organization-like names built from pseudo-words. Three
kinds of gold mentions exercise different parts of the pipeline:

* ``exact``    - the mention is the full title; lexical rank-1 is usually right.
* ``homonym``  - the mention is a name shared by 2-4 entities; only the
  context keywords (planted in the gold entity's embedding) disambiguate.
* ``crowded``  - the mention is a cluster token shared by hundreds of titles
  with equal lexical scores, so the gold entity's lexical rank is spread
  uniformly and recall grows with K.

Entity embeddings live in the :class:`~elink.dense.StubEncoder` feature
space: unit vectors for title tokens plus heavier unit vectors for the
entity's two topic keywords, plus Gaussian noise, L2-normalized.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import tokenize
from .dense import StubEncoder
from .ingest import entity_id_for_url
from .kb import EntityRecord, open_kb, put_entities
from .lexical import build_index, save_index

TOPIC_WORDS = (
    "billing telephony payroll analytics storage routing invoicing hosting firmware "
    "encryption scheduling logistics insurance lending streaming messaging recruiting "
    "compliance forecasting translation mapping ticketing procurement auditing backup "
    "monitoring printing shipping catering roofing plumbing dentistry fitness gaming "
    "podcasting tutoring leasing brewing farming mining welding robotics drones "
    "genomics vaccines semiconductors batteries solar wind textiles furniture cosmetics "
    "jewelry footwear eyewear toys pharmacy radiology veterinary accounting consulting "
    "marketing advertising branding surveys crm erp wiki search email voip fax "
    "chatbots transcription captioning dubbing karaoke"
).split()

SUFFIXES = (
    "Corporation Labs Systems Cloud Software Networks Group Payments Health Robotics "
    "Energy Foods Media Logistics Security Devices Holdings Studios Partners Works"
).split()

FILLER = (
    "the a our their with for about on new old team account plan call meeting renewal "
    "support pricing contract upgrade issue update question"
).split()

KINDS = ("company", "vendor", "platform", "provider", "startup", "manufacturer", "app", "service")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def pseudo_words(rng: np.random.Generator, n: int, syllables: int = 3) -> list[str]:
    """``n`` distinct capitalized CV-syllable words."""
    reserved = {w.lower() for w in TOPIC_WORDS + SUFFIXES + FILLER + list(KINDS)}
    seen: set[str] = set()
    out = []
    while len(out) < n:
        batch = max(64, 2 * (n - len(out)))
        cons = rng.integers(0, len(_CONSONANTS), size=(batch, syllables))
        vows = rng.integers(0, len(_VOWELS), size=(batch, syllables))
        for cr, vr in zip(cons, vows):
            w = "".join(_CONSONANTS[c] + _VOWELS[v] for c, v in zip(cr, vr))
            if w in seen or w in reserved:
                continue
            seen.add(w)
            out.append(w.capitalize())
            if len(out) == n:
                break
    return out


@dataclass
class SynthEntity:
    title: str
    description: str
    wikipedia_url: str
    qid: str
    instance_of: tuple[str, ...]
    keywords: tuple[str, str]
    title_tokens: tuple[str, ...]

    @property
    def entity_id(self) -> int:
        return entity_id_for_url(self.wikipedia_url)


@dataclass
class GoldItem:
    text: str
    start: int
    end: int
    qid: str
    kind: str = ""

    def to_dict(self) -> dict:
        return {"text": self.text, "start": self.start, "end": self.end, "qid": self.qid, "kind": self.kind}


@dataclass
class Benchmark:
    entities: list[SynthEntity]
    vectors: np.ndarray
    gold: list[GoldItem]
    aliases: list[tuple[str, str]] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def records(self) -> list[EntityRecord]:
        return [
            EntityRecord(
                entity_id=e.entity_id,
                title=e.title,
                description=e.description,
                wikipedia_url=e.wikipedia_url,
                wikidata_qid=e.qid,
                instance_of=e.instance_of,
                embedding_dim=self.dim,
            )
            for e in self.entities
        ]

    def write(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        """Write KB, lexical index, gold JSONL and alias TSV under ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "kb": out / "kb",
            "index": out / "index.elix",
            "gold": out / "gold.jsonl",
            "aliases": out / "aliases.tsv",
        }
        put_entities(paths["kb"], self.records(), self.vectors)
        with open_kb(paths["kb"]) as kb:
            save_index(build_index(kb), paths["index"])
        write_gold(paths["gold"], self.gold)
        with open(paths["aliases"], "w", encoding="utf-8") as fh:
            for phrase, label in self.aliases:
                fh.write(f"{phrase}\t{label}\n")
        return paths


def write_gold(path: str | os.PathLike, gold: list[GoldItem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in gold:
            fh.write(json.dumps(g.to_dict()) + "\n")


def plant_embedding(
    encoder: StubEncoder,
    title_tokens: list[str],
    keywords: list[str],
    rng: np.random.Generator,
    keyword_weight: float = 1.5,
    noise: float = 0.05,
) -> np.ndarray:
    vec = np.zeros(encoder.dim, dtype=np.float64)
    for feat in encoder.features(title_tokens):
        vec += encoder.embed_tokens([feat])
    for kw in keywords:
        vec += keyword_weight * encoder.embed_tokens([kw])
    vec += rng.normal(0.0, noise, size=encoder.dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


def _make_entity(title_tokens: list[str], keywords: tuple[str, str], description: str, label: str) -> SynthEntity:
    title = " ".join(title_tokens)
    return SynthEntity(
        title=title,
        description=description,
        wikipedia_url="https://en.wikipedia.org/wiki/" + title.replace(" ", "_"),
        qid="",
        instance_of=(label,),
        keywords=keywords,
        title_tokens=tuple(tokenize(title)),
    )


def _offering(name: str, kind: str, keywords: tuple[str, str]) -> str:
    return f"{name} is a {kind} offering {keywords[0]} and {keywords[1]} for business customers"


def _utterance(rng: np.random.Generator, mention: str, words: list[str]) -> tuple[str, int, int]:
    lead = str(rng.choice(["we discussed", "calling about", "question on", "renewing", "about"]))
    tail = str(rng.choice(FILLER))
    text = f"{lead} {mention} "
    start = len(lead) + 1
    end = start + len(mention)
    text += " ".join(words) + f" {tail}"
    return text, start, end


def generate_benchmark(
    n_entities: int = 10_000,
    n_gold: int = 200,
    dim: int = 64,
    seed: int = 0,
    cluster_size: int = 600,
    n_clusters: int | None = None,
    crowded_fraction: float = 0.3,
    exact_fraction: float = 0.2,
    resolve_rate: float = 0.9,
    partner_rate: float = 0.2,
    noise: float = 0.05,
    encoder_seed: int = 0,
) -> Benchmark:
    rng = np.random.default_rng(seed)
    encoder = StubEncoder(dim, seed=encoder_seed)
    if n_clusters is None:
        n_clusters = max(1, int(n_entities * 0.24) // cluster_size) if n_entities >= 2 * cluster_size else 0
    n_clustered = n_clusters * cluster_size
    if n_clustered > n_entities:
        raise ValueError("clusters do not fit in n_entities")

    # rough upper bound on how many pseudo-words the grouping needs
    words = pseudo_words(rng, n_entities + n_clusters + 16)
    wi = iter(words)
    kw_pairs = [(a, b) for i, a in enumerate(TOPIC_WORDS) for b in TOPIC_WORDS[i + 1 :]]

    entities: list[SynthEntity] = []
    clusters: list[tuple[str, list[int]]] = []
    groups: list[tuple[str, list[int]]] = []
    names: list[str] = []

    def pick_pairs(k: int) -> list[tuple[str, str]]:
        idx = rng.choice(len(kw_pairs), size=k, replace=False)
        return [kw_pairs[int(i)] for i in idx]

    for _ in range(n_clusters):
        token = next(wi)
        members = []
        for pair in pick_pairs(cluster_size):
            name = next(wi)
            label = "organization" if rng.random() < 0.5 else "product"
            ent = _make_entity([token, name], pair, _offering(name, str(rng.choice(KINDS)), pair), label)
            members.append(len(entities))
            entities.append(ent)
        clusters.append((token, members))

    while len(entities) < n_entities:
        size = int(min(rng.integers(1, 5), n_entities - len(entities)))
        name = next(wi)
        names.append(name)
        suffixes = rng.choice(SUFFIXES, size=size, replace=False)
        members = []
        for suffix, pair in zip(suffixes, pick_pairs(size)):
            label = "organization" if rng.random() < 0.6 else "product"
            partner = names[int(rng.integers(len(names)))] if rng.random() < partner_rate and len(names) > 1 else None
            desc = _offering(name, str(rng.choice(KINDS)), pair)
            if partner and partner != name:
                desc += f", partnered with {partner}"
            ent = _make_entity([name, str(suffix)], pair, desc, label)
            members.append(len(entities))
            entities.append(ent)
        groups.append((name, members))

    for i, ent in enumerate(entities):
        ent.qid = f"Q{1000 + i}"
    vec_rng = np.random.default_rng([seed, 1])
    vectors = np.stack(
        [plant_embedding(encoder, list(e.title_tokens), list(e.keywords), vec_rng, noise=noise) for e in entities]
    )

    aliases = [(token, "unknown") for token, _ in clusters] + [
        (name, entities[m[0]].instance_of[0]) for name, m in groups
    ]

    multi = [g for g in groups if len(g[1]) >= 2]
    rng = np.random.default_rng([seed, 2])
    gold = []
    for _ in range(n_gold):
        r = rng.random()
        if r < crowded_fraction and clusters:
            token, members = clusters[int(rng.integers(len(clusters)))]
            ent = entities[members[int(rng.integers(len(members)))]]
            mention, kind = token, "crowded"
        elif r < crowded_fraction + exact_fraction or not multi:
            ent = entities[int(rng.integers(len(entities)))]
            mention, kind = ent.title, "exact"
        else:
            name, members = multi[int(rng.integers(len(multi)))]
            ent = entities[members[int(rng.integers(len(members)))]]
            mention, kind = name, "homonym"
        if rng.random() < resolve_rate:
            ctx_words = list(ent.keywords)
        else:
            ctx_words = [w for w in rng.choice(TOPIC_WORDS, size=4, replace=False) if w not in ent.keywords][:2]
        text, start, end = _utterance(rng, mention, ctx_words)
        gold.append(GoldItem(text, start, end, ent.qid, kind))
    return Benchmark(entities, vectors, gold, aliases)


def homonym_fixture(
    n_pairs: int = 100, n_distractors: int = 500, dim: int = 64, seed: int = 1, noise: float = 0.05
) -> Benchmark:
    """Pairs sharing a name where the shorter title always wins lexically.

    Each pair ``{Name Suffix, Name Suffix Suffix2}`` gets one gold utterance per
    member, so lexical rank-1 is wrong for exactly half of the gold set while
    the context keywords point at the gold entity.
    """
    rng = np.random.default_rng(seed)
    encoder = StubEncoder(dim)
    words = pseudo_words(rng, n_pairs + n_distractors)
    kw_pairs = [(a, b) for i, a in enumerate(TOPIC_WORDS) for b in TOPIC_WORDS[i + 1 :]]
    entities: list[SynthEntity] = []
    pairs = []
    for name in words[:n_pairs]:
        s1, s2 = rng.choice(SUFFIXES, size=2, replace=False)
        i1, i2 = rng.choice(len(kw_pairs), size=2, replace=False)
        k1, k2 = kw_pairs[int(i1)], kw_pairs[int(i2)]
        short = _make_entity([name, str(s1)], k1, f"a {rng.choice(KINDS)} offering {k1[0]} and {k1[1]}", "organization")
        long_ = _make_entity(
            [name, str(s1), str(s2)], k2, f"a {rng.choice(KINDS)} offering {k2[0]} and {k2[1]}", "product"
        )
        pairs.append((name, len(entities), len(entities) + 1))
        entities += [short, long_]
    for name in words[n_pairs:]:
        i = int(rng.choice(len(kw_pairs)))
        kw = kw_pairs[i]
        ent = _make_entity(
            [name, str(rng.choice(SUFFIXES))], kw, f"a {rng.choice(KINDS)} offering {kw[0]} and {kw[1]}", "organization"
        )
        entities.append(ent)
    for i, ent in enumerate(entities):
        ent.qid = f"Q{5000 + i}"
    vec_rng = np.random.default_rng([seed, 1])
    vectors = np.stack(
        [plant_embedding(encoder, list(e.title_tokens), list(e.keywords), vec_rng, noise=noise) for e in entities]
    )
    rng = np.random.default_rng([seed, 2])
    gold = []
    for name, a, b in pairs:
        for member, kind in ((a, "lexical_right"), (b, "lexical_wrong")):
            text, start, end = _utterance(rng, name, list(entities[member].keywords))
            gold.append(GoldItem(text, start, end, entities[member].qid, kind))
    aliases = [(name, "organization") for name, _, _ in pairs]
    return Benchmark(entities, vectors, gold, aliases)


def synthetic_dump(
    path: str | os.PathLike,
    mapping_path: str | os.PathLike,
    n: int = 1000,
    banned_fraction: float = 0.5,
    banned_tags: tuple[str, ...] = ("person",),
    dim: int = 8,
    seed: int = 0,
    unmapped_fraction: float = 0.0,
) -> dict:
    """Write an entity dump + mapping with an exact banned/kept split.

    The first ``round(n * banned_fraction)`` entities (in generation order)
    carry a banned tag. Returns counts for assertions.
    """
    rng = np.random.default_rng(seed)
    names = pseudo_words(rng, n)
    n_banned = round(n * banned_fraction)
    n_unmapped = round(n * unmapped_fraction)
    with open(path, "w", encoding="utf-8") as dump, open(mapping_path, "w", encoding="utf-8") as mapping:
        for i, name in enumerate(names):
            title = f"{name} {SUFFIXES[i % len(SUFFIXES)]}"
            emb = rng.normal(size=dim).round(6).tolist()
            dump.write(
                json.dumps(
                    {
                        "title": title,
                        "description": f"{name} entity number {i}",
                        "wikipedia_url": "https://en.wikipedia.org/wiki/" + title.replace(" ", "_"),
                        "embedding": emb,
                    }
                )
                + "\n"
            )
            if i >= n - n_unmapped:
                continue
            tag = banned_tags[i % len(banned_tags)] if i < n_banned else ("organization" if i % 2 else "product")
            mapping.write(f"{title.replace(' ', '_')}\tQ{100000 + i}\t{tag}\n")
    return {"total": n, "banned": n_banned, "unmapped": n_unmapped}
