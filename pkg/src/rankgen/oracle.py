"""Synthetic-oracle evaluation.

A frozen, randomly initialized LSTM plays the role of the true data
distribution: it emits the training corpus, and the quality of any trained
generator is the negative log-likelihood the oracle assigns to that
generator's samples. Lower is better, and the oracle itself is the
yardstick's fixed zero point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import N_RESERVED, Corpus, TokenSeq, Vocab
from .generator import GeneratorModel


class OracleError(ValueError):
    pass


def make_oracle(vocab_size: int, d_e: int = 32, d_h: int = 32, seed: int = 0,
                init_std: float = 1.0) -> GeneratorModel:
    """Build the frozen reference LSTM with normal(0, init_std) weights.

    init_std must be large enough to make the oracle meaningfully
    non-uniform; at 1.0 the per-token distributions are visibly peaked.
    """
    if init_std <= 0:
        raise OracleError(f"init_std must be positive, got {init_std}")
    return GeneratorModel(vocab_size, d_e=d_e, d_h=d_h, seed=seed,
                          init="normal", init_scale=init_std)


def generate_synthetic(oracle: GeneratorModel, count: int, fixed_len: int,
                       seed: int = 0) -> Corpus:
    """Sample a corpus of full-window sequences from the oracle."""
    if count < 1:
        raise OracleError(f"need at least one sequence, got {count}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    ids = oracle.sample_batch(count, fixed_len, rng)
    seqs = [TokenSeq(tuple(int(t) for t in row), fixed_len) for row in ids]
    vocab = Vocab.integers(oracle.vocab_size - N_RESERVED)
    return Corpus(seqs, vocab, fixed_len)


@dataclass(frozen=True)
class NllEstimate:
    """Monte-Carlo oracle NLL of a generator's samples.

    per_sequence is the primary number: mean total NLL of one sampled
    sequence. per_token divides by scored positions instead. std_err is
    the standard error of per_sequence.
    """

    per_sequence: float
    per_token: float
    std_err: float
    n_samples: int


def oracle_nll(oracle: GeneratorModel, generator: GeneratorModel,
               n_samples: int = 2000, fixed_len: int = 20,
               seed: int = 0) -> NllEstimate:
    """Score n_samples fresh generator samples under the oracle."""
    if oracle.vocab_size != generator.vocab_size:
        raise OracleError(
            f"oracle vocabulary {oracle.vocab_size} does not match "
            f"generator vocabulary {generator.vocab_size}")
    if n_samples < 1:
        raise OracleError(f"need at least one sample, got {n_samples}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    ids = generator.sample_batch(n_samples, fixed_len, rng)
    lengths = np.full(n_samples, fixed_len, dtype=np.int64)
    total, scored = oracle.nll_batch(ids, lengths)
    per_sequence = float(total.mean())
    per_token = float(total.sum() / scored.sum())
    std_err = float(total.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return NllEstimate(per_sequence, per_token, std_err, n_samples)
