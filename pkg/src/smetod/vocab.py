"""Closed whitespace vocabulary."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
SYS, USR, BS, DB = "[sys]", "[usr]", "[bs]", "[db]"
RESERVED = (PAD, EOS, UNK, SYS, USR, BS, DB, "=", ";")
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocab:
        seen = set(RESERVED)
        extra = set()
        for text in texts:
            for tok in text.split():
                if tok not in seen:
                    extra.add(tok)
        return cls(list(RESERVED) + sorted(extra))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else UNK)
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])
