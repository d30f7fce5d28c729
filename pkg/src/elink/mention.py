"""Mention detection: gazetteer longest-match tagging and external span injection."""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable
from dataclasses import dataclass, field

from .analysis import normalize_phrase, tokenize_with_offsets
from .errors import ValidationError
from .kb import KbHandle

logger = logging.getLogger(__name__)

LABELS = ("product", "organization", "unknown")

# instance-of tags that map onto an NER label
_TAG_LABELS = {
    "product": "product",
    "software": "product",
    "service": "product",
    "brand": "product",
    "organization": "organization",
    "organisation": "organization",
    "company": "organization",
    "business": "organization",
    "enterprise": "organization",
}


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    surface: str
    label: str = "unknown"

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "surface": self.surface, "label": self.label}


def label_for_types(instance_of: Iterable[str]) -> str:
    for tag in instance_of:
        label = _TAG_LABELS.get(tag.strip().lower())
        if label is not None:
            return label
    return "unknown"


@dataclass
class Gazetteer:
    phrases: dict[str, str] = field(default_factory=dict)
    max_tokens: int = 0
    row_errors: list[str] = field(default_factory=list)

    def add(self, phrase: str, label: str = "unknown") -> None:
        key = normalize_phrase(phrase)
        if not key:
            raise ValueError(f"phrase {phrase!r} is empty after normalization")
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        # a specific label beats "unknown"; otherwise first one wins
        if self.phrases.get(key, "unknown") == "unknown":
            self.phrases[key] = label
        self.max_tokens = max(self.max_tokens, key.count(" ") + 1)

    def lookup(self, phrase: str) -> str | None:
        return self.phrases.get(normalize_phrase(phrase))

    def __contains__(self, phrase: str) -> bool:
        return normalize_phrase(phrase) in self.phrases

    def __len__(self) -> int:
        return len(self.phrases)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Gazetteer):
            return NotImplemented
        return self.phrases == other.phrases and self.max_tokens == other.max_tokens


def load_aliases(gaz: Gazetteer, path: str | os.PathLike) -> None:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                gaz.row_errors.append(f"line {lineno}: expected 2 columns, got {len(cols)}")
                continue
            phrase, label = cols[0], cols[1].strip().lower() or "unknown"
            try:
                gaz.add(phrase, label)
            except ValueError as exc:
                gaz.row_errors.append(f"line {lineno}: {exc}")
    if gaz.row_errors:
        logger.warning("%s: %d malformed alias rows", path, len(gaz.row_errors))


def build_gazetteer(kb: KbHandle, alias_path: str | os.PathLike | None = None) -> Gazetteer:
    gaz = Gazetteer()
    for rec in kb.iter_records():
        try:
            gaz.add(rec.title, label_for_types(rec.instance_of))
        except ValueError:
            logger.debug("title %r has no tokens; not added to gazetteer", rec.title)
    if alias_path is not None:
        load_aliases(gaz, alias_path)
    return gaz


def detect(text: str, gazetteer: Gazetteer) -> list[Mention]:
    """Greedy left-to-right longest match over analyzer tokens."""
    tokens = tokenize_with_offsets(text)
    out = []
    i = 0
    n = len(tokens)
    while i < n:
        for length in range(min(gazetteer.max_tokens, n - i), 0, -1):
            key = " ".join(t.text for t in tokens[i : i + length])
            label = gazetteer.phrases.get(key)
            if label is not None:
                start, end = tokens[i].start, tokens[i + length - 1].end
                out.append(Mention(start, end, text[start:end], label))
                i += length
                break
        else:
            i += 1
    return out


def from_external_spans(text: str, spans: Iterable[tuple]) -> list[Mention]:
    """Validate ``(start, end[, label])`` spans and turn them into sorted mentions."""
    mentions = []
    problems = []
    for span in spans:
        if len(span) not in (2, 3):
            problems.append(f"span {span!r}: expected (start, end[, label])")
            continue
        start, end = span[0], span[1]
        label = (span[2] if len(span) == 3 else None) or "unknown"
        if not isinstance(start, int) or not isinstance(end, int) or isinstance(start, bool) or isinstance(end, bool):
            problems.append(f"span {span!r}: offsets must be integers")
        elif not 0 <= start < end <= len(text):
            problems.append(f"span ({start}, {end}) out of bounds for text of length {len(text)}")
        elif label not in LABELS:
            problems.append(f"span ({start}, {end}): unknown label {label!r}")
        else:
            mentions.append(Mention(start, end, text[start:end], label))
    mentions.sort(key=lambda m: (m.start, m.end))
    reach = None  # mention with the furthest end so far
    for m in mentions:
        if reach is not None and m.start < reach.end:
            problems.append(f"spans ({reach.start}, {reach.end}) and ({m.start}, {m.end}) overlap")
        if reach is None or m.end > reach.end:
            reach = m
    if problems:
        raise ValidationError("invalid spans: " + "; ".join(problems))
    return mentions
