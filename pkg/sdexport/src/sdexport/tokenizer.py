"""Prompt tokenization for attention capture.

The tokenizer lowercases the prompt, takes ASCII alphanumeric runs as
words, and splits words longer than MAX_WHOLE_LEN characters into
near-equal sub-word pieces. Pieces carry no continuation markers and
concatenate back to the source word exactly, so consumers that match
token groups by concatenated text can resolve split words.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ExportError

MAX_WHOLE_LEN = 5

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class WordSpan:
    """A prompt word with the half-open piece index range covering it."""

    word: str
    start: int
    stop: int


def split_word(word: str) -> list[str]:
    """Split a word into near-equal pieces of at most MAX_WHOLE_LEN chars.

    Words of MAX_WHOLE_LEN characters or fewer stay whole. Longer words
    split into the fewest pieces that fit, front-loading the remainder so
    piece lengths differ by at most one. Joining the pieces reproduces
    the word exactly.
    """
    if not word:
        raise ExportError("cannot split an empty word")
    if len(word) <= MAX_WHOLE_LEN:
        return [word]
    count = -(-len(word) // MAX_WHOLE_LEN)
    base, extra = divmod(len(word), count)
    pieces = []
    pos = 0
    for i in range(count):
        size = base + (1 if i < extra else 0)
        pieces.append(word[pos:pos + size])
        pos += size
    return pieces


def tokenize(prompt: str) -> tuple[list[str], list[WordSpan]]:
    """Break a prompt into sub-word pieces plus per-word span bookkeeping.

    Returns (pieces, spans) where pieces is the flat token text list and
    spans records which piece range each source word occupies.
    """
    words = _WORD_RE.findall(prompt.lower())
    if not words:
        raise ExportError(f"prompt {prompt!r} has no tokenizable words")
    pieces: list[str] = []
    spans: list[WordSpan] = []
    for word in words:
        parts = split_word(word)
        spans.append(WordSpan(word, len(pieces), len(pieces) + len(parts)))
        pieces.extend(parts)
    return pieces, spans


def token_lookup(prompt: str, class_name: str) -> list[int]:
    """Return the piece indices spanning the first occurrence of class_name.

    The class name must be a single word that appears in the prompt; a
    short word yields one index, a long word the consecutive indices of
    its pieces. Raises ExportError when the word is absent.
    """
    target = class_name.strip().lower()
    if not _WORD_RE.fullmatch(target):
        raise ExportError(f"class name {class_name!r} must be a single alphanumeric word")
    _, spans = tokenize(prompt)
    for span in spans:
        if span.word == target:
            return list(range(span.start, span.stop))
    raise ExportError(f"class name {class_name!r} does not occur in prompt {prompt!r}")
