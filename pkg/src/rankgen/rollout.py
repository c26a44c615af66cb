"""Monte-Carlo completion of partial sequences and their expected rewards.

A partial sequence is completed n times by the generator policy; the mean
reward of the completions estimates the value of the partial state. Lanes
(prefix copies) are processed in fixed-size chunks so results are bitwise
identical for any worker-thread count: threads only change which worker
computes a chunk, never a shape, a draw, or the reduction order. All
uniforms are pre-derived from (seed, tags, prefix_length) coordinates.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import BOS
from .generator import GeneratorModel
from .ranker import BatchRankScorer, RankerModel

# Lanes per work unit. A constant, never derived from the thread count:
# chunk boundaries shape the matmuls, and those must not vary across runs.
CHUNK = 64


class RolloutError(ValueError):
    """Bad prefixes or configuration for rollout estimation."""


@dataclass(frozen=True)
class RolloutConfig:
    """How many completion paths to average and the seed they derive from."""

    n_paths: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1:
            raise RolloutError(f"n_paths must be >= 1, got {self.n_paths}")


def derive_uniforms(seed: int, tags, shape) -> np.ndarray:
    """Uniform draws at deterministic stream coordinates."""
    ss = np.random.SeedSequence([int(seed)] + [int(t) for t in tags])
    return np.random.default_rng(ss).random(shape)


def _complete_and_score(gen: GeneratorModel, prefix_rep, last_tokens,
                        h_rep, c_rep, n_steps: int, uniforms, score_fn,
                        threads: int = 1, executor=None) -> np.ndarray:
    """Finish every lane and score the full sequences, chunk by chunk."""
    lanes = prefix_rep.shape[0]

    def work(lo, hi):
        if n_steps == 0:
            full = prefix_rep[lo:hi]
        else:
            cont, _, _ = gen.continue_batch(last_tokens[lo:hi], h_rep[lo:hi],
                                            c_rep[lo:hi], n_steps,
                                            uniforms[lo:hi])
            full = np.concatenate([prefix_rep[lo:hi], cont], axis=1)
        return score_fn(full)

    bounds = [(lo, min(lo + CHUNK, lanes)) for lo in range(0, lanes, CHUNK)]
    if executor is not None and len(bounds) > 1:
        parts = list(executor.map(lambda b: work(*b), bounds))
    elif threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: work(*b), bounds))
    else:
        parts = [work(lo, hi) for lo, hi in bounds]
    return np.concatenate(parts)


def sequence_values(gen: GeneratorModel, ids: np.ndarray, score_fn,
                    n_paths: int, seed: int, tags=(), threads: int = 1,
                    executor=None) -> np.ndarray:
    """Per-timestep values for a batch of complete sequences.

    Entry [b, t] is the value of prefix ids[b, :t+1]: the mean reward of
    n_paths completions for t+1 < T, and the actual reward of the complete
    sequence at the final step. `score_fn` maps an (L, T) id matrix to (L,)
    rewards and must be thread-safe and read-only.
    """
    ids = np.asarray(ids, dtype=np.int64)
    batch, t_len = ids.shape
    h_stack, c_stack = gen.run_states(ids)
    values = np.empty((batch, t_len))
    values[:, t_len - 1] = score_fn(ids)
    for p in range(1, t_len):
        n_steps = t_len - p
        uniforms = derive_uniforms(seed, (*tags, p), (batch * n_paths, n_steps))
        prefix_rep = np.repeat(ids[:, :p], n_paths, axis=0)
        last = np.repeat(ids[:, p - 1], n_paths)
        h_rep = np.repeat(h_stack[p], n_paths, axis=0)
        c_rep = np.repeat(c_stack[p], n_paths, axis=0)
        vals = _complete_and_score(gen, prefix_rep, last, h_rep, c_rep,
                                   n_steps, uniforms, score_fn,
                                   threads=threads, executor=executor)
        values[:, p - 1] = vals.reshape(batch, n_paths).mean(axis=1)
    return values


def rollout_value(gen: GeneratorModel, ranker: RankerModel, prefix,
                  references, c_plus, cfg: RolloutConfig, tags=(),
                  threads: int = 1, executor=None) -> float:
    """Mean expected rank of n completions of one partial sequence.

    `prefix` is a raw id sequence (its length must be below the ranker's
    fixed length; a padded TokenSeq cannot represent a partial sentence).
    `references` and `c_plus` are TokenSeq lists: the human-written
    reference set and the human-written comparison set.
    """
    prefix = np.asarray([int(i) for i in prefix], dtype=np.int64)
    t = prefix.shape[0]
    t_len = ranker.fixed_len
    if t >= t_len:
        raise RolloutError(
            f"prefix of length {t} is already complete at {t_len}; "
            "score complete sequences directly")
    scorer = BatchRankScorer(ranker,
                             np.array([u.ids for u in references], dtype=np.int64),
                             np.array([c.ids for c in c_plus], dtype=np.int64))
    uniforms = derive_uniforms(cfg.seed, (*tags, t), (cfg.n_paths, t_len - t))
    if t == 0:
        h = np.zeros((1, gen.d_h))
        c = np.zeros((1, gen.d_h))
        last = np.array([BOS], dtype=np.int64)
    else:
        h_stack, c_stack = gen.run_states(prefix[None, :])
        h, c = h_stack[t], c_stack[t]
        last = prefix[-1:]
    prefix_rep = np.repeat(prefix[None, :], cfg.n_paths, axis=0)
    vals = _complete_and_score(gen, prefix_rep,
                               np.repeat(last, cfg.n_paths),
                               np.repeat(h, cfg.n_paths, axis=0),
                               np.repeat(c, cfg.n_paths, axis=0),
                               t_len - t, uniforms, scorer.score,
                               threads=threads, executor=executor)
    return float(vals.mean())
