"""Text analyzer shared by the lexical index and the gazetteer.

Tokens are maximal runs of Unicode letters/digits, lowercased. No stemming,
no stopwords. Anything else (punctuation, hyphens, underscores, whitespace)
is a boundary.
"""

from __future__ import annotations

import re
from typing import NamedTuple

ANALYZER_VERSION = "alnum-lower-v1"

_TOKEN_RE = re.compile(r"[^\W_]+")


class Token(NamedTuple):
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[str]:
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def tokenize_with_offsets(text: str) -> list[Token]:
    """Tokens with codepoint offsets into the original (un-lowercased) text."""
    return [Token(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def normalize_phrase(text: str) -> str:
    return " ".join(tokenize(text))
