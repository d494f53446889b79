"""Word-level tokenizer and a bag-of-embeddings text encoder."""

from __future__ import annotations

import re
import zlib
from typing import Iterable, Sequence

import torch
from torch import nn

from .errors import ValidationError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Known words get their own index; unknown words hash into ``n_oov`` buckets.

    Index 0 is reserved for padding.
    """

    def __init__(self, words: Iterable[str], n_oov: int = 32):
        self.words: list[str] = []
        for w in words:
            if w not in self.words:
                self.words.append(w)
        self.n_oov = n_oov
        self._index = {w: i + 1 for i, w in enumerate(self.words)}

    @classmethod
    def from_captions(cls, captions: Iterable[str], extra: Iterable[str] = (), n_oov: int = 32):
        words = list(extra)
        for c in captions:
            words.extend(tokenize(c))
        return cls(words, n_oov)

    def __len__(self) -> int:
        return 1 + len(self.words) + self.n_oov

    def index(self, word: str) -> int:
        idx = self._index.get(word)
        if idx is not None:
            return idx
        if self.n_oov == 0:
            raise ValidationError(f"unknown word {word!r}")
        return 1 + len(self.words) + zlib.crc32(word.encode("utf-8")) % self.n_oov

    def encode(self, text: str) -> list[int]:
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError(f"caption has no tokens: {text!r}")
        return [self.index(t) for t in tokens]

    def batch(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded index matrix and a float mask, both (B, L)."""
        encoded = [self.encode(t) for t in texts]
        width = max(len(e) for e in encoded)
        ids = torch.zeros(len(encoded), width, dtype=torch.long)
        mask = torch.zeros(len(encoded), width)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e)
            mask[i, : len(e)] = 1.0
        return ids, mask

    def to_state(self) -> dict:
        return {"words": list(self.words), "n_oov": self.n_oov}

    @classmethod
    def from_state(cls, state: dict) -> "Vocabulary":
        return cls(state["words"], state["n_oov"])


class BagOfWordsEncoder(nn.Module):
    """Mean of learned token embeddings, optionally followed by a linear map."""

    def __init__(self, vocab: Vocabulary, dim: int, out_dim: int | None = None):
        super().__init__()
        self.vocab = vocab
        self.embedding = nn.Embedding(len(vocab), dim, padding_idx=0)
        nn.init.normal_(self.embedding.weight, std=1.0)
        with torch.no_grad():
            self.embedding.weight[0].zero_()
        self.proj = nn.Linear(dim, out_dim) if out_dim is not None else None
        self.out_dim = out_dim or dim

    def forward(self, captions: Sequence[str]) -> torch.Tensor:
        for c in captions:
            if not c or not c.strip():
                raise ValidationError("empty caption")
        ids, mask = self.vocab.batch(captions)
        emb = self.embedding(ids) * mask.unsqueeze(-1)
        pooled = emb.sum(1) / mask.sum(1, keepdim=True)
        return self.proj(pooled) if self.proj is not None else pooled
