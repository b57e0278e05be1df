"""Toy recognition units: ten digit words plus end-of-sequence and unknown."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError, TokenError

WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
EOS = "<eos>"
UNK = "<unk>"
VOCAB = WORDS + (EOS, UNK)
EOS_ID = VOCAB.index(EOS)
UNK_ID = VOCAB.index(UNK)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids whose last element is always ``<eos>``."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if not self.ids or self.ids[-1] != EOS_ID:
            raise ContractError("token sequence must end with <eos>")
        if EOS_ID in self.ids[:-1]:
            raise ContractError("<eos> may only appear as the last token")
        for i in self.ids:
            if not 0 <= i < len(VOCAB):
                raise TokenError(f"token id {i} outside vocabulary of {len(VOCAB)}")

    @classmethod
    def from_content(cls, content) -> "TokenSequence":
        return cls(tuple(int(i) for i in content) + (EOS_ID,))

    @classmethod
    def from_text(cls, text: str) -> "TokenSequence":
        ids = []
        for w in text.split():
            if w not in VOCAB:
                raise TokenError(f"unknown token {w!r}")
            ids.append(VOCAB.index(w))
        if ids and ids[-1] == EOS_ID:
            ids.pop()
        return cls.from_content(ids)

    @property
    def content(self) -> tuple[int, ...]:
        return self.ids[:-1]

    def text(self) -> str:
        return " ".join(VOCAB[i] for i in self.content)

    def __len__(self):
        return len(self.ids)


def write_vocab(path, vocab=VOCAB) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{t}\n" for t in vocab))
    return path


def read_vocab(path) -> tuple[str, ...]:
    return tuple(line for line in Path(path).read_text().splitlines() if line)
