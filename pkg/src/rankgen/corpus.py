"""Corpus ingestion: vocabulary with UNK thresholding, fixed-length encoding.

File formats
------------
Corpus file: UTF-8 text, one sentence per line, tokens separated by
whitespace. Vocab file: a one-line ``min_count=K`` header, then one token
per line where the zero-based data line number equals ``id - 4`` (ids 0..3
are the reserved PAD/BOS/EOS/UNK slots and are never listed).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_FORMS = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = 4


class CorpusError(ValueError):
    """Raised for ingestion problems: empty streams, malformed files, bad splits."""


class Vocab:
    """Token/id bijection over reserved slots plus frequency-filtered tokens.

    Ids 0..3 are PAD, BOS, EOS, UNK. Retained tokens get ids 4.. in first
    occurrence order. The reserved surface forms themselves encode back to
    their reserved ids, so decoding a sequence whose content happens to
    include a reserved id round-trips exactly.
    """

    def __init__(self, tokens, min_count: int = 1):
        if min_count < 1:
            raise CorpusError(f"min_count must be >= 1, got {min_count}")
        self.min_count = int(min_count)
        self.id_to_token = list(RESERVED_FORMS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate token in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self):
        return self.size

    @classmethod
    def build(cls, lines, min_count: int = 1) -> "Vocab":
        """Count whitespace tokens and keep those occurring >= min_count times."""
        counts = Counter()
        order = {}
        any_line = False
        for line in lines:
            any_line = True
            for tok in line.split():
                counts[tok] += 1
                if tok not in order:
                    order[tok] = len(order)
        if not any_line:
            raise CorpusError("cannot build a vocabulary from an empty stream")
        kept = sorted((t for t, c in counts.items()
                       if c >= min_count and t not in RESERVED_FORMS),
                      key=order.__getitem__)
        return cls(kept, min_count=min_count)

    @classmethod
    def integers(cls, n_tokens: int) -> "Vocab":
        """Synthetic-data vocabulary: decimal surface forms "0".."n-1" at ids 4..n+3."""
        if n_tokens < 1:
            raise CorpusError("integer vocab needs at least one token")
        return cls([str(i) for i in range(n_tokens)], min_count=1)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, line: str, fixed_len: int) -> "TokenSeq":
        """Encode one sentence to exactly fixed_len ids.

        Over-length lines are truncated (length = fixed_len, no terminator);
        shorter lines get EOS then PAD. Out-of-vocabulary tokens map to UNK.
        """
        if fixed_len < 1:
            raise CorpusError(f"fixed_len must be >= 1, got {fixed_len}")
        ids = [self.lookup(t) for t in line.split()]
        if len(ids) >= fixed_len:
            return TokenSeq(tuple(ids[:fixed_len]), fixed_len)
        length = len(ids)
        ids.append(EOS)
        ids.extend([PAD] * (fixed_len - length - 1))
        return TokenSeq(tuple(ids), length)

    def decode(self, seq: "TokenSeq") -> str:
        """Surface form of the content region (padding and terminator dropped)."""
        return " ".join(self.id_to_token[i] for i in seq.ids[:seq.length])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"min_count={self.min_count}\n")
            for tok in self.id_to_token[N_RESERVED:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("min_count="):
                raise CorpusError(f"{path}: missing min_count header")
            try:
                min_count = int(header[len("min_count="):].strip())
            except ValueError:
                raise CorpusError(f"{path}: unreadable min_count header") from None
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens, min_count=min_count)


@dataclass(frozen=True)
class TokenSeq:
    """A fixed-length id sequence with an explicit content length.

    When length < len(ids), position `length` holds the EOS terminator and
    everything after it is PAD. A sequence whose content fills the whole
    window has no terminator; EOS ids inside the content region are content.
    """

    ids: tuple
    length: int

    def __post_init__(self):
        if not (0 <= self.length <= len(self.ids)):
            raise CorpusError(f"length {self.length} outside sequence of {len(self.ids)}")
        if self.length < len(self.ids):
            if self.ids[self.length] != EOS:
                raise CorpusError("missing EOS terminator after content")
            if any(i != PAD for i in self.ids[self.length + 1:]):
                raise CorpusError("non-PAD token after terminator")

    @property
    def fixed_len(self) -> int:
        return len(self.ids)

    def content(self) -> tuple:
        return self.ids[:self.length]

    def validate_ids(self, vocab_size: int):
        if any(not (0 <= i < vocab_size) for i in self.ids):
            raise CorpusError(f"token id outside vocabulary of size {vocab_size}")


class Corpus:
    """An immutable list of equal-length TokenSeq tied to its vocabulary."""

    def __init__(self, sequences, vocab: Vocab, fixed_len: int):
        sequences = list(sequences)
        for s in sequences:
            if s.fixed_len != fixed_len:
                raise CorpusError(
                    f"sequence of length {s.fixed_len} in corpus declared {fixed_len}")
            s.validate_ids(vocab.size)
        self.sequences = sequences
        self.vocab = vocab
        self.fixed_len = fixed_len

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def id_matrix(self) -> np.ndarray:
        """(N, fixed_len) int64 matrix of the raw ids."""
        return np.array([s.ids for s in self.sequences], dtype=np.int64)

    def lengths(self) -> np.ndarray:
        return np.array([s.length for s in self.sequences], dtype=np.int64)


def encode_lines(lines, vocab: Vocab, fixed_len: int) -> Corpus:
    seqs = [vocab.encode(line, fixed_len) for line in lines if line.strip() != ""]
    if not seqs:
        raise CorpusError("no sentences to encode")
    return Corpus(seqs, vocab, fixed_len)


def load_corpus(path, vocab: Vocab, fixed_len: int) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return encode_lines(fh, vocab, fixed_len)


def save_corpus(corpus: Corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for seq in corpus:
            fh.write(corpus.vocab.decode(seq) + "\n")


def split(corpus: Corpus, seed: int, train_fraction: float):
    """Deterministic disjoint train/validation split covering the corpus."""
    if not (0.0 < train_fraction < 1.0):
        raise CorpusError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(corpus)
    if n < 2:
        raise CorpusError("cannot split a corpus of fewer than 2 sequences")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    train = [corpus.sequences[i] for i in perm[:n_train]]
    valid = [corpus.sequences[i] for i in perm[n_train:]]
    return (Corpus(train, corpus.vocab, corpus.fixed_len),
            Corpus(valid, corpus.vocab, corpus.fixed_len))
