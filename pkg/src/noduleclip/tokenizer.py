"""Text tokenizers for the two encoder presets.

The toy tokenizer lowercases, splits on non-alphanumerics, and hashes words
into a fixed id range; it needs no vocabulary asset. The BPE tokenizer loads
an external vocabulary/merges file compatible with the pretrained text
encoder (converting an upstream vocabulary into this JSON layout is an
offline step).
"""

from __future__ import annotations

import hashlib
import json
import re

import numpy as np

PAD_ID = 0
START_ID = 1
END_ID = 2
_WORD_RE = re.compile(r"[a-z0-9]+(?:['\-][a-z0-9]+)*")


def _clinical_lexicon() -> tuple[str, ...]:
    """Words that must never collide: class vocabulary, feature names, and
    report/template scaffolding."""
    from . import semantics as sem

    words = set()
    for classes in sem.FEATURE_CLASSES.values():
        for value in classes:
            words.update(_WORD_RE.findall(value.lower()))
    for name in sem.ALL_FEATURES:
        words.update(_WORD_RE.findall(name.lower()))
    words.update(
        "this is a an the there no findings finding nodule margins mm x and with "
        "associated demonstrates identified level of suspicion for lung cancer "
        "impression".split()
    )
    return tuple(sorted(words))


class ToyTokenizer:
    """Whitespace/lowercase tokenizer with a reserved collision-free id block
    for the clinical lexicon; all other words hash into the remaining range."""

    def __init__(self, vocab_size: int = 512, context_length: int = 64):
        self.lexicon = {w: 3 + k for k, w in enumerate(_clinical_lexicon())}
        self._hash_base = 3 + len(self.lexicon)
        if vocab_size < self._hash_base + 16:
            raise ValueError(f"vocab_size must be at least {self._hash_base + 16}")
        self.vocab_size = vocab_size
        self.context_length = context_length

    def _word_id(self, word: str) -> int:
        fixed = self.lexicon.get(word)
        if fixed is not None:
            return fixed
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        span = self.vocab_size - self._hash_base
        return self._hash_base + int.from_bytes(digest, "little") % span

    def encode(self, text: str) -> list[int]:
        """Start token, hashed word ids, end token; truncated to the context
        length with the end token preserved."""
        words = _WORD_RE.findall(text.lower())
        ids = [START_ID] + [self._word_id(w) for w in words] + [END_ID]
        if len(ids) > self.context_length:
            ids = ids[: self.context_length - 1] + [END_ID]
        return ids

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        out = np.full((len(texts), self.context_length), PAD_ID, dtype=np.int64)
        for i, text in enumerate(texts):
            ids = self.encode(text)
            out[i, : len(ids)] = ids
        return out


class BPETokenizer:
    """Greedy merge-rank BPE over lowercased words with an end-of-word marker.

    The vocabulary file is JSON: {"vocab": {token: id}, "merges": ["a b", ...],
    "context_length": int, "start_token": str, "end_token": str}.
    """

    def __init__(self, vocab: dict[str, int], merges: list[str], context_length: int,
                 start_token: str = "<|startoftext|>", end_token: str = "<|endoftext|>"):
        self.vocab = vocab
        self.context_length = context_length
        self.start_id = vocab[start_token]
        self.end_id = vocab[end_token]
        self.pad_id = 0
        self.vocab_size = max(vocab.values()) + 1
        self.merge_ranks = {tuple(m.split()): i for i, m in enumerate(merges)}
        self._cache: dict[str, list[str]] = {}

    @classmethod
    def from_vocab_file(cls, path) -> "BPETokenizer":
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
        return cls(
            vocab=spec["vocab"],
            merges=spec.get("merges", []),
            context_length=int(spec.get("context_length", 77)),
            start_token=spec.get("start_token", "<|startoftext|>"),
            end_token=spec.get("end_token", "<|endoftext|>"),
        )

    def _bpe(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        parts = list(word[:-1]) + [word[-1] + "</w>"]
        while len(parts) > 1:
            pairs = [(parts[i], parts[i + 1]) for i in range(len(parts) - 1)]
            ranked = [(self.merge_ranks[p], i) for i, p in enumerate(pairs) if p in self.merge_ranks]
            if not ranked:
                break
            _, i = min(ranked)
            parts = parts[:i] + [parts[i] + parts[i + 1]] + parts[i + 2 :]
        self._cache[word] = parts
        return parts

    def encode(self, text: str) -> list[int]:
        ids = [self.start_id]
        for word in _WORD_RE.findall(text.lower()):
            for piece in self._bpe(word):
                if piece not in self.vocab:
                    raise ValueError(f"token piece {piece!r} not in vocabulary")
                ids.append(self.vocab[piece])
        ids.append(self.end_id)
        if len(ids) > self.context_length:
            ids = ids[: self.context_length - 1] + [self.end_id]
        return ids

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        out = np.full((len(texts), self.context_length), self.pad_id, dtype=np.int64)
        for i, text in enumerate(texts):
            ids = self.encode(text)
            out[i, : len(ids)] = ids
        return out
