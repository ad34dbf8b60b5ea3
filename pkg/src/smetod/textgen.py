"""String-in, string-out wrapper around a trained model."""

from __future__ import annotations

from typing import Sequence

from .transformer import Seq2SeqModel, greedy_decode_batch
from .vocab import Vocab


class TextGenerator:
    """Greedy generation over whitespace-tokenized text, in length-sorted batches."""

    def __init__(self, model: Seq2SeqModel, vocab: Vocab, max_len: int = 32, batch_size: int = 64):
        if len(vocab) != model.config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} tokens, model expects {model.config.vocab_size}")
        self.model = model
        self.vocab = vocab
        self.max_len = min(max_len, model.config.max_len)
        self.batch_size = batch_size

    def generate(self, inputs: Sequence[str]) -> list[str]:
        ids = [self.vocab.encode(x) for x in inputs]
        # Sorting keeps padding low; with masked routing the results do not depend on it.
        order = sorted(range(len(ids)), key=lambda i: len(ids[i]))
        out: list[str] = [""] * len(ids)
        for start in range(0, len(order), self.batch_size):
            chunk = order[start : start + self.batch_size]
            decoded = greedy_decode_batch(self.model, [ids[i] for i in chunk], self.max_len)
            for i, toks in zip(chunk, decoded):
                out[i] = self.vocab.decode(toks)
        return out
