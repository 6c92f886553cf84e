"""Prompt tokenization and concept extraction.

Visual concepts are attribute-noun phrases ("blue apple") pulled out of the
prompt by a small templated grammar:

    PROMPT := NP ( "and" NP )*
    NP     := ("a" | "an" | "the")? ADJ* NOUN

where ADJ is any word in the attribute lexicon and NOUN is the next
non-attribute word. Commas vanish during tokenization, so they separate
noun phrases for free. Prompts that defeat the grammar raise rather than
returning wrong concepts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

ARTICLES = frozenset({"a", "an", "the"})
SEPARATORS = frozenset({"and"})

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class PromptError(ValueError):
    """Raised for prompts that cannot be tokenized or parsed into concepts."""


@dataclass(frozen=True)
class TokenizedPrompt:
    """Word tokens at positions 1..p, with implicit SOT at 0 and EOT at p+1."""

    raw: str
    tokens: tuple[str, ...]

    @property
    def p(self) -> int:
        return len(self.tokens)

    @property
    def normalized(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class Concept:
    """An attribute-noun phrase with its 1-based token span [a, b]."""

    text: str
    attributes: tuple[str, ...]
    noun: str
    span: tuple[int, int]


def tokenize(text: str) -> TokenizedPrompt:
    """Lowercase and split on whitespace/punctuation."""
    tokens = tuple(_TOKEN_RE.findall(text.lower()))
    if not tokens:
        raise PromptError("empty prompt")
    return TokenizedPrompt(raw=text, tokens=tokens)


def load_attribute_lexicon(path: str | Path | None = None) -> frozenset[str]:
    """Read the attribute word list: one lowercase word per line, '#' comments."""
    if path is None:
        text = resources.files("pico.data").joinpath("attributes.txt").read_text()
    else:
        text = Path(path).read_text()
    words = set()
    for line in text.splitlines():
        word = line.split("#", 1)[0].strip().lower()
        if word:
            words.add(word)
    return frozenset(words)


_DEFAULT_LEXICON: frozenset[str] | None = None


def default_lexicon() -> frozenset[str]:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = load_attribute_lexicon()
    return _DEFAULT_LEXICON


def extract_concepts(
    tp: TokenizedPrompt, lexicon: frozenset[str] | None = None
) -> list[Concept]:
    """Parse the prompt grammar and return concepts in left-to-right order.

    Spans cover ADJ* NOUN; articles are excluded. Raises ``PromptError``
    ("no concepts") when no noun phrase is found, and a positioned error
    when the grammar is defeated mid-prompt.
    """
    lexicon = lexicon if lexicon is not None else default_lexicon()
    tokens = tp.tokens
    p = tp.p
    concepts: list[Concept] = []
    i = 1  # 1-based token cursor
    while i <= p:
        while i <= p and tokens[i - 1] in ARTICLES:
            i += 1
        start = i
        while i <= p and tokens[i - 1] in lexicon:
            i += 1
        if i > p:
            raise PromptError(
                "no concepts" if not concepts else f"dangling attribute at position {start}"
            )
        noun = tokens[i - 1]
        if noun in SEPARATORS or noun in ARTICLES:
            raise PromptError(f"cannot parse token {noun!r} at position {i}")
        span = (start, i)
        attributes = tokens[start - 1 : i - 1]
        concepts.append(
            Concept(
                text=" ".join(tokens[start - 1 : i]),
                attributes=tuple(attributes),
                noun=noun,
                span=span,
            )
        )
        i += 1
        if i > p:
            break
        if tokens[i - 1] not in SEPARATORS:
            raise PromptError(f"cannot parse token {tokens[i - 1]!r} at position {i}")
        i += 1
        if i > p:
            raise PromptError(f"trailing separator at position {i - 1}")
    if not concepts:
        raise PromptError("no concepts")
    return concepts
