"""Word tokenization and token-level Levenshtein alignment.

Edit scripts tag every token of both sequences so that weighting can be
computed from tags alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

PUNCTUATION = frozenset(".,!?;:\"'()")

TokenSeq = list[str]


class TokenTag(str, enum.Enum):
    UNCHANGED = "U"
    ADDED = "A"
    DELETED = "D"
    SUBSTITUTED = "S"


def _split_chunk(chunk: str) -> list[str]:
    start, end = 0, len(chunk)
    while start < end and chunk[start] in PUNCTUATION:
        start += 1
    while end > start and chunk[end - 1] in PUNCTUATION:
        end -= 1
    out = list(chunk[:start])
    if start < end:
        out.append(chunk[start:end])
    out.extend(chunk[end:])
    return out


def tokenize(text: str) -> TokenSeq:
    """Split on whitespace, then peel leading/trailing punctuation marks.

    Each peeled mark becomes its own one-character token; punctuation inside
    a word ("don't", "3.5") is left alone.

    >>> tokenize("Hello,  world")
    ['Hello', ',', 'world']
    """
    tokens: TokenSeq = []
    for chunk in text.split():
        tokens.extend(_split_chunk(chunk))
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Unit-cost Levenshtein distance in O(min(|a|, |b|)) memory."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class EditScript:
    distance: int
    initial_tags: tuple[TokenTag, ...]
    revised_tags: tuple[TokenTag, ...]

    def count(self, tag: TokenTag, side: str = "revised") -> int:
        tags = self.revised_tags if side == "revised" else self.initial_tags
        return sum(1 for t in tags if t is tag)


def _full_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        row, above = table[i], table[i - 1]
        for j in range(1, m + 1):
            row[j] = min(above[j] + 1, row[j - 1] + 1, above[j - 1] + (a[i - 1] != b[j - 1]))
    return table


def edit_script(initial: Sequence[str], revised: Sequence[str]) -> EditScript:
    """Backtrace one minimal edit path from the end of both sequences.

    Ties are broken Match > Substitute > Delete > Insert, so the result is
    deterministic.
    """
    table = _full_table(initial, revised)
    i, j = len(initial), len(revised)
    init_tags: list[TokenTag] = [TokenTag.UNCHANGED] * i
    rev_tags: list[TokenTag] = [TokenTag.UNCHANGED] * j
    while i > 0 or j > 0:
        here = table[i][j]
        if i > 0 and j > 0 and initial[i - 1] == revised[j - 1] and table[i - 1][j - 1] == here:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and table[i - 1][j - 1] + 1 == here:
            i, j = i - 1, j - 1
            init_tags[i] = rev_tags[j] = TokenTag.SUBSTITUTED
        elif i > 0 and table[i - 1][j] + 1 == here:
            i -= 1
            init_tags[i] = TokenTag.DELETED
        else:
            j -= 1
            rev_tags[j] = TokenTag.ADDED
    return EditScript(table[-1][-1], tuple(init_tags), tuple(rev_tags))


def replay(initial: Sequence[str], script: EditScript, revised: Sequence[str]) -> TokenSeq:
    """Apply ``script`` to ``initial``, drawing new tokens from ``revised``.

    Only tokens tagged Added or Substituted are read from ``revised``;
    Unchanged tokens are copied from ``initial``, so a wrong script yields a
    sequence that differs from ``revised``.
    """
    if len(initial) != len(script.initial_tags) or len(revised) != len(script.revised_tags):
        raise ValueError("script lengths do not match the sequences")
    kept = [tok for tok, tag in zip(initial, script.initial_tags) if tag is not TokenTag.DELETED]
    kept_iter = iter(zip(kept, (t for t in script.initial_tags if t is not TokenTag.DELETED)))
    out: TokenSeq = []
    for tok, tag in zip(revised, script.revised_tags):
        if tag is TokenTag.ADDED:
            out.append(tok)
            continue
        src, src_tag = next(kept_iter)
        if src_tag is not tag:
            raise ValueError(f"script misaligned: {src_tag} paired with {tag}")
        out.append(src if tag is TokenTag.UNCHANGED else tok)
    if next(kept_iter, None) is not None:
        raise ValueError("script leaves initial tokens unconsumed")
    return out
