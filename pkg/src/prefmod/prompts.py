"""Closed prompt vocabulary: ``[shape, count, position]`` plus the reserved EMPTY prompt."""

from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np

NULL = "<null>"
SHAPES = ("circle", "square", "triangle", "cross")
COUNTS = ("one", "two", "three")
POSITIONS = ("left", "center", "right")
VOCAB = (NULL,) + SHAPES + COUNTS + POSITIONS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
PROMPT_LENGTH = 3


class Prompt(NamedTuple):
    shape: str
    count: str
    position: str

    @property
    def tokens(self) -> tuple[str, str, str]:
        return (self.shape, self.count, self.position)

    @property
    def is_empty(self) -> bool:
        return self.tokens == (NULL, NULL, NULL)

    @property
    def n(self) -> int:
        """Number of subjects; zero for the empty prompt."""
        return 0 if self.count == NULL else COUNTS.index(self.count) + 1

    def ids(self) -> np.ndarray:
        return prompt_ids(self)

    def __str__(self) -> str:
        return "<empty>" if self.is_empty else " ".join(self.tokens)


EMPTY = Prompt(NULL, NULL, NULL)


def validate(prompt: Prompt) -> None:
    if prompt.is_empty:
        return
    if prompt.shape not in SHAPES or prompt.count not in COUNTS or prompt.position not in POSITIONS:
        raise KeyError(f"invalid prompt {tuple(prompt)!r}")


def prompt_ids(prompt: Prompt) -> np.ndarray:
    try:
        ids = [TOKEN_ID[t] for t in prompt.tokens]
    except KeyError as e:
        raise KeyError(f"unknown token {e.args[0]!r}") from None
    validate(prompt)
    return np.array(ids, dtype=np.int64)


def parse(text: str) -> Prompt:
    text = text.strip()
    if text in ("", "<empty>"):
        return EMPTY
    parts = text.split()
    if len(parts) != PROMPT_LENGTH:
        raise ValueError(f"prompt must have {PROMPT_LENGTH} tokens: {text!r}")
    p = Prompt(*parts)
    validate(p)
    return p


def all_prompts() -> list[Prompt]:
    return [Prompt(s, c, p) for s, c, p in itertools.product(SHAPES, COUNTS, POSITIONS)]
