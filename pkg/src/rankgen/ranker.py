"""Convolutional sentence encoder and ranking scores.

A sentence is embedded, run through banks of width-grouped 1-D filters
with max-over-time pooling, and compared to reference sentences by cosine.
Scaled relevances over the candidate-plus-comparison set pass through a
softmax; the candidate's share is its rank score, and the mean over the
reference set is the expected rank used as the reward signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import TokenSeq


class RankerError(ValueError):
    """Configuration or usage errors in the encoder/scoring machinery."""


class DegenerateFeatureError(RankerError):
    """A zero-norm feature vector reached a cosine computation."""


class ConvEncoder:
    """Embedding plus width-grouped filter banks with max-over-time pooling."""

    def __init__(self, vocab_size: int, fixed_len: int, d_e: int = 32,
                 widths=(2, 3, 4), filters_per_width: int = 16,
                 nonlinearity: str = "tanh", seed: int = 0,
                 init_scale: float = 0.1):
        widths = tuple(int(w) for w in widths)
        if not widths or len(set(widths)) != len(widths):
            raise RankerError(f"widths must be distinct and nonempty, got {widths}")
        if any(w < 1 or w > fixed_len for w in widths):
            raise RankerError(f"filter widths {widths} must fit sequence length {fixed_len}")
        if filters_per_width < 1:
            raise RankerError("need at least one filter per width")
        self.vocab_size = int(vocab_size)
        self.fixed_len = int(fixed_len)
        self.d_e = int(d_e)
        self.widths = widths
        self.filters_per_width = int(filters_per_width)
        self.nonlinearity = nonlinearity
        if nonlinearity not in T._NONLINEAR:
            raise RankerError(f"unknown nonlinearity {nonlinearity!r}")
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        draw = lambda *s: rng.uniform(-init_scale, init_scale, s)
        self.embedding = T.Tensor(draw(vocab_size, d_e), requires_grad=True)
        self.banks = [T.Tensor(draw(filters_per_width, w, d_e), requires_grad=True)
                      for w in widths]

    @property
    def feature_dim(self) -> int:
        return self.filters_per_width * len(self.widths)

    def parameters(self) -> dict:
        out = {"embedding": self.embedding}
        for w, bank in zip(self.widths, self.banks):
            out[f"filters_{w}"] = bank
        return out

    def param_list(self):
        return [self.embedding] + list(self.banks)

    def encode_tensor(self, ids) -> T.Tensor:
        """Taped-capable feature vector for one fixed-length id sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (self.fixed_len,):
            raise RankerError(f"expected a length-{self.fixed_len} sequence, got {ids.shape}")
        emb = T.gather_rows(self.embedding, ids)
        return T.conv1d_maxpool(emb, self.banks, nonlinearity=self.nonlinearity)

    def encode_batch(self, ids: np.ndarray) -> np.ndarray:
        """(N, feature_dim) features; vectorized, gradient-free."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.fixed_len:
            raise RankerError(f"expected (N, {self.fixed_len}) ids, got {ids.shape}")
        fn = T._NONLINEAR[self.nonlinearity][0]
        n = ids.shape[0]
        emb = self.embedding.data[ids]  # (N, T, d)
        parts = []
        for bank in self.banks:
            count, w, d = bank.shape
            win = np.lib.stride_tricks.sliding_window_view(emb, (w, d), axis=(1, 2))
            win = win.reshape(n, self.fixed_len - w + 1, w * d)
            resp = fn(win @ bank.data.reshape(count, w * d).T)
            parts.append(resp.max(axis=1))
        return np.concatenate(parts, axis=1)


@dataclass
class FeatureVec:
    """Encoded sentence feature with a lazily exposed norm."""

    y: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.y, self.y)))

    @property
    def degenerate(self) -> bool:
        return self.norm == 0.0


def cosine(a: FeatureVec, b: FeatureVec) -> float:
    na, nb = a.norm, b.norm
    if na == 0.0 or nb == 0.0:
        raise DegenerateFeatureError("zero-norm feature vector in cosine")
    return float(np.dot(a.y, b.y) / (na * nb))


def rank_scores_from_relevances(alphas, gamma: float) -> np.ndarray:
    """Softmax of gamma-scaled relevances: the rank-score distribution over C'."""
    if gamma <= 0:
        raise RankerError(f"gamma must be positive, got {gamma}")
    z = gamma * np.asarray(alphas, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


class RankerModel:
    """Encoder plus temperature; produces relevances, rank scores, rewards.

    `version` increments on every parameter update (the trainer calls
    `bump_version`); cached reference features check it before reuse.
    """

    def __init__(self, vocab_size: int, fixed_len: int, d_e: int = 32,
                 widths=(2, 3, 4), filters_per_width: int = 16,
                 nonlinearity: str = "tanh", gamma: float = 4.0,
                 seed: int = 0, init_scale: float = 0.1):
        if gamma <= 0:
            raise RankerError(f"gamma must be positive, got {gamma}")
        self.encoder = ConvEncoder(vocab_size, fixed_len, d_e=d_e, widths=widths,
                                   filters_per_width=filters_per_width,
                                   nonlinearity=nonlinearity, seed=seed,
                                   init_scale=init_scale)
        self.gamma = float(gamma)
        self.version = 0

    @property
    def fixed_len(self):
        return self.encoder.fixed_len

    def parameters(self) -> dict:
        return self.encoder.parameters()

    def param_list(self):
        return self.encoder.param_list()

    def is_finite(self) -> bool:
        return all(p.is_finite() for p in self.param_list())

    def bump_version(self):
        self.version += 1

    def encode(self, seq: TokenSeq) -> FeatureVec:
        if seq.fixed_len != self.encoder.fixed_len:
            raise RankerError(
                f"sequence length {seq.fixed_len} != configured {self.encoder.fixed_len}")
        return FeatureVec(self.encoder.encode_tensor(np.array(seq.ids)).data)

    def relevance(self, y_s: FeatureVec, y_u: FeatureVec) -> float:
        return cosine(y_s, y_u)

    def rank_score(self, s: TokenSeq, u: TokenSeq, comparison) -> float:
        """Candidate's softmax share among itself plus the comparison set."""
        y_s = self.encode(s)
        y_u = self.encode(u)
        alphas = [self.relevance(y_s, y_u)]
        for other in comparison:
            alphas.append(self.relevance(self.encode(other), y_u))
        return float(rank_scores_from_relevances(alphas, self.gamma)[0])

    def expected_rank(self, s: TokenSeq, references, comparison) -> float:
        """Mean rank score over the reference set: the reward R(s | U, C)."""
        refs = list(references)
        if not refs:
            raise RankerError("empty reference set")
        return sum(self.rank_score(s, u, comparison) for u in refs) / len(refs)


class BatchRankScorer:
    """Reward scorer with pre-encoded reference and comparison features.

    Built once per training batch from the current ranker; `score` maps an
    (N, T) id matrix to expected ranks. Refuses to run after the ranker
    has been updated (version mismatch) so stale features cannot leak.
    """

    def __init__(self, ranker: RankerModel, ref_ids: np.ndarray,
                 comp_ids: np.ndarray):
        self.ranker = ranker
        self.version = ranker.version
        self.gamma = ranker.gamma
        ref_ids = np.asarray(ref_ids, dtype=np.int64)
        if ref_ids.ndim != 2 or ref_ids.shape[0] < 1:
            raise RankerError("reference set must be a nonempty (m, T) id matrix")
        y_u = ranker.encoder.encode_batch(ref_ids)
        norms = np.sqrt((y_u * y_u).sum(axis=1))
        if np.any(norms == 0.0):
            raise DegenerateFeatureError("zero-norm reference feature")
        self.u_hat = y_u / norms[:, None]
        comp_ids = np.asarray(comp_ids, dtype=np.int64)
        if comp_ids.size == 0:
            self.comp_logsum = None
        else:
            y_c = ranker.encoder.encode_batch(comp_ids)
            cn = np.sqrt((y_c * y_c).sum(axis=1))
            if np.any(cn == 0.0):
                raise DegenerateFeatureError("zero-norm comparison feature")
            d = (y_c / cn[:, None]) @ self.u_hat.T          # (mc, mu)
            z = self.gamma * d
            big = z.max(axis=0)
            self.comp_logsum = big + np.log(np.exp(z - big).sum(axis=0))

    def score(self, ids: np.ndarray) -> np.ndarray:
        """Expected rank of each row of `ids` against the cached sets."""
        if self.ranker.version != self.version:
            raise RankerError("scorer is stale: ranker was updated after caching")
        y_s = self.ranker.encoder.encode_batch(ids)
        norms = np.sqrt((y_s * y_s).sum(axis=1))
        if np.any(norms == 0.0):
            raise DegenerateFeatureError("zero-norm candidate feature")
        cos = (y_s / norms[:, None]) @ self.u_hat.T          # (N, mu)
        if self.comp_logsum is None:
            return np.ones(ids.shape[0])
        # softmax share of the candidate: sigmoid(gamma*cos - logsumexp(comps))
        x = self.gamma * cos - self.comp_logsum[None, :]
        v = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return v.mean(axis=1)


# -- taped scoring pieces (ranker training) ---------------------------------


def taped_cosine(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Cosine of two 1-D feature tensors on the active tape."""
    na = T.sqrt(T.tsum(T.mul(a, a)))
    nb = T.sqrt(T.tsum(T.mul(b, b)))
    return T.div(T.dot(a, b), T.mul(na, nb))


def taped_log_expected_rank(y_s: T.Tensor, y_refs, y_comps, gamma: float) -> T.Tensor:
    """log of the mean-over-references rank score, differentiable throughout.

    `y_refs` and `y_comps` are lists of encoded feature tensors (shared
    encodings may appear in several calls on the same tape).
    """
    if not y_refs:
        raise RankerError("empty reference set")
    g = T.Tensor(float(gamma))
    scores = []
    for y_u in y_refs:
        logits = [T.mul(g, taped_cosine(y_s, y_u))]
        for y_c in y_comps:
            logits.append(T.mul(g, taped_cosine(y_c, y_u)))
        if len(logits) == 1:
            scores.append(T.Tensor(1.0))
        else:
            scores.append(T.pick(T.softmax(T.stack_scalars(logits)), 0))
    if len(scores) == 1:
        return T.log(scores[0])
    return T.log(T.tmean(T.stack_scalars(scores)))
