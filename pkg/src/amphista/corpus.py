"""Byte-level tokenization and reproducible synthetic corpora.

The default corpus is an order-2 Markov chain over a small symbol set
embedded in the 256-value byte space: predictable enough that drafting heads
climb well above chance within a few epochs, random enough to be non-trivial.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256


class TokenizerError(ValueError):
    pass


def tokenize(text: str | bytes) -> list[int]:
    """Byte-level tokens; str input is UTF-8 encoded first."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize(tokens) -> bytes:
    out = bytearray()
    for t in tokens:
        t = int(t)
        if not 0 <= t < BYTE_VOCAB:
            raise TokenizerError(f"token {t} outside byte range [0, {BYTE_VOCAB})")
        out.append(t)
    return bytes(out)


@dataclass
class CorpusSpec:
    kind: str = "markov"  # markov | text
    order: int = 2
    vocab: int = 32
    alpha: float = 0.05  # Dirichlet concentration; lower = more predictable
    context_mix: float = 0.25  # weight of the full-order modulation vs the order-1 core
    n_sequences: int = 512
    seq_len: int = 48
    byte_offset: int = 64  # embed symbols at this byte value
    text_path: str = ""

    def __post_init__(self):
        if self.kind not in ("markov", "text"):
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if self.kind == "markov" and self.byte_offset + self.vocab > BYTE_VOCAB:
            raise ValueError("symbol embedding exceeds the byte space")


@dataclass
class Corpus:
    name: str
    sequences: list[list[int]]
    spec: CorpusSpec | None = None

    def __len__(self) -> int:
        return len(self.sequences)


class MarkovGenerator:
    """Seeded order-k transition table over `vocab` symbols.

    The table mixes a peaked order-1 backbone (conditioning on the latest
    symbol only) with a full-order modulation: genuinely order-k statistics,
    but with a core that a small model can learn from a few thousand tokens.
    """

    def __init__(self, spec: CorpusSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
        v = spec.vocab
        shape = (v,) * spec.order + (v,)
        backbone = rng.gamma(spec.alpha, size=(v, v))
        backbone /= backbone.sum(axis=-1, keepdims=True)
        modulation = rng.gamma(spec.alpha, size=shape)
        modulation /= modulation.sum(axis=-1, keepdims=True)
        mix = spec.context_mix
        self.transition = (1.0 - mix) * backbone + mix * modulation

    def sequence(self, rng: np.random.Generator, length: int) -> list[int]:
        order, vocab, off = self.spec.order, self.spec.vocab, self.spec.byte_offset
        context = list(rng.integers(0, vocab, size=order))
        symbols = list(context)
        while len(symbols) < length:
            probs = self.transition[tuple(symbols[-order:])]
            cdf = np.cumsum(probs)
            u = rng.random() * cdf[-1]
            symbols.append(int(min(np.searchsorted(cdf, u, side="right"), vocab - 1)))
        return [s + off for s in symbols[:length]]


def make_corpus(spec: CorpusSpec, seed: int, name: str = "train") -> Corpus:
    """Materialize a corpus; (spec, seed) fully determine the result."""
    if spec.kind == "text":
        return load_text_corpus(spec.text_path, spec.seq_len, name=name)
    gen = MarkovGenerator(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    sequences = [gen.sequence(rng, spec.seq_len) for _ in range(spec.n_sequences)]
    return Corpus(name=name, sequences=sequences, spec=spec)


def make_prompts(spec: CorpusSpec, seed: int, n_prompts: int, prompt_len: int) -> list[list[int]]:
    """Fresh evaluation prompts from the same generator family as the corpus."""
    if spec.kind == "text":
        corpus = load_text_corpus(spec.text_path, prompt_len, name="prompts")
        if len(corpus.sequences) < n_prompts:
            raise ValueError("text corpus too small for the requested prompt count")
        return corpus.sequences[:n_prompts]
    gen = MarkovGenerator(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return [gen.sequence(rng, prompt_len) for _ in range(n_prompts)]


def load_text_corpus(path: str | Path, seq_len: int, name: str = "text") -> Corpus:
    data = Path(path).read_bytes()
    if len(data) < seq_len:
        raise ValueError(f"text file shorter than one sequence of {seq_len} bytes")
    sequences = [
        list(data[i : i + seq_len])
        for i in range(0, len(data) - seq_len + 1, seq_len)
    ]
    return Corpus(name=name, sequences=sequences, spec=None)
