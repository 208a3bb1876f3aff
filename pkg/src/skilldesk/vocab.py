"""Closed-vocabulary whitespace tokenizer shared by all language-side models."""

from __future__ import annotations

import re

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SRC_MARKER = "⟨SRC⟩"  # rendered into prompt text for non-text sources
SEP = "<sep>"
PLAN = "<plan>"

_PUNCT = re.compile(r"[.,!?;:]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip sentence punctuation, split on whitespace.

    Parentheses and commas used by the executable-triple serialization are
    emitted as standalone tokens by the serializer itself, so plain
    whitespace splitting is sufficient here.
    """
    return _PUNCT.sub(" ", text).lower().split()


class Vocab:
    def __init__(self, tokens: list[str]):
        specials = [PAD, BOS, EOS, UNK]
        rest = sorted(set(tokens) - set(specials))
        self.tokens = specials + rest
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, toks: list[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in toks]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]
