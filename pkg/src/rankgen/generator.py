"""Autoregressive LSTM sequence model: stepping, sampling, NLL, MLE updates.

One single-layer LSTM with fused gate blocks in [input, forget, output,
cell] order. The same tensor-op sequence serves both the taped training
path and the untaped fast path, so log-probabilities agree bitwise between
them. Sampling runs a fixed number of steps: the end token is an ordinary
vocabulary item and generation never stops early.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import BOS, EOS, TokenSeq


class GeneratorError(ValueError):
    """Misuse of the model API: bad ids, shapes, or non-finite training state."""


@dataclass
class LstmState:
    """Recurrent carry for one sequence: hidden and cell vectors."""

    h: np.ndarray
    c: np.ndarray

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.h)) and np.all(np.isfinite(self.c)))


PARAM_NAMES = ("embedding", "w_x", "w_h", "b", "w_out", "b_out")


class GeneratorModel:
    """LSTM language model over a fixed vocabulary.

    Parameters are flat float64 tensors; `init="uniform"` draws each entry
    from uniform(-init_scale, init_scale), `init="normal"` from
    N(0, init_scale^2). Creation order of the parameter blocks is fixed so
    a seed fully determines every entry.
    """

    def __init__(self, vocab_size: int, d_e: int = 32, d_h: int = 64,
                 seed: int = 0, init: str = "uniform", init_scale: float = 0.1):
        # Text vocabularies always carry the 4 reserved ids, but tiny toy
        # models only need BOS (id 1) to exist.
        if vocab_size < 2:
            raise GeneratorError(f"vocab_size must be >= 2, got {vocab_size}")
        if d_e < 1 or d_h < 1:
            raise GeneratorError(f"bad dims d_e={d_e}, d_h={d_h}")
        self.vocab_size = int(vocab_size)
        self.d_e = int(d_e)
        self.d_h = int(d_h)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        if init == "uniform":
            draw = lambda *s: rng.uniform(-init_scale, init_scale, s)
        elif init == "normal":
            draw = lambda *s: rng.normal(0.0, init_scale, s)
        else:
            raise GeneratorError(f"unknown init {init!r}")
        self.embedding = T.Tensor(draw(vocab_size, d_e), requires_grad=True)
        self.w_x = T.Tensor(draw(d_e, 4 * d_h), requires_grad=True)
        self.w_h = T.Tensor(draw(d_h, 4 * d_h), requires_grad=True)
        self.b = T.Tensor(draw(4 * d_h), requires_grad=True)
        self.w_out = T.Tensor(draw(d_h, vocab_size), requires_grad=True)
        self.b_out = T.Tensor(draw(vocab_size), requires_grad=True)

    def parameters(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def param_list(self):
        return [getattr(self, name) for name in PARAM_NAMES]

    def is_finite(self) -> bool:
        return all(p.is_finite() for p in self.param_list())

    def initial_state(self) -> LstmState:
        return LstmState(np.zeros(self.d_h), np.zeros(self.d_h))

    # -- core recurrence (works taped and untaped; batch-first shapes) ------

    def step_tensors(self, token_ids, h: T.Tensor, c: T.Tensor):
        """One batched step: (B,) ids, (B,d_h) carries -> (logp (B,V), h', c')."""
        d_h = self.d_h
        x = T.gather_rows(self.embedding, token_ids)
        gates = T.add_bias(T.add(T.matmul(x, self.w_x), T.matmul(h, self.w_h)), self.b)
        i = T.sigmoid(T.narrow(gates, 1, 0, d_h))
        f = T.sigmoid(T.narrow(gates, 1, d_h, d_h))
        o = T.sigmoid(T.narrow(gates, 1, 2 * d_h, d_h))
        g = T.tanh(T.narrow(gates, 1, 3 * d_h, d_h))
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        logits = T.add_bias(T.matmul(h_new, self.w_out), self.b_out)
        return T.log_softmax(logits, axis=1), h_new, c_new

    # -- public single-sequence interface ------------------------------------

    def step(self, token_id: int, state: LstmState):
        """Next-token distribution and successor state for one sequence."""
        token_id = int(token_id)
        if not (0 <= token_id < self.vocab_size):
            raise GeneratorError(f"token id {token_id} outside vocabulary of {self.vocab_size}")
        logp, h, c = self.step_tensors(
            np.array([token_id]), T.Tensor(state.h[None, :]), T.Tensor(state.c[None, :]))
        probs = np.exp(logp.data[0])
        return probs, LstmState(h.data[0], c.data[0])

    def sample(self, length: int, rng) -> TokenSeq:
        """One fixed-length sequence; each token drawn from step's distribution."""
        ids = self.sample_batch(1, length, rng)[0]
        return TokenSeq(tuple(int(i) for i in ids), length)

    def sample_batch(self, count: int, length: int, rng) -> np.ndarray:
        """(count, length) id matrix; uniforms are pre-drawn so the draw
        sequence depends only on the rng state, not on sampled content."""
        if length < 1:
            raise GeneratorError(f"length must be >= 1, got {length}")
        if count < 1:
            raise GeneratorError(f"count must be >= 1, got {count}")
        u = rng.random((count, length))
        out = np.empty((count, length), dtype=np.int64)
        tokens = np.full(count, BOS, dtype=np.int64)
        h = T.Tensor(np.zeros((count, self.d_h)))
        c = T.Tensor(np.zeros((count, self.d_h)))
        for t in range(length):
            logp, h, c = self.step_tensors(tokens, h, c)
            tokens = draw_categorical(np.exp(logp.data), u[:, t])
            out[:, t] = tokens
        return out

    def continue_batch(self, tokens, h, c, n_steps: int, u: np.ndarray):
        """Extend lanes mid-sequence: used by rollout completion.

        `tokens` (B,) last emitted ids (BOS for empty prefixes), `h`/`c`
        (B,d_h) carries, `u` (B, n_steps) pre-drawn uniforms. Returns the
        (B, n_steps) continuation ids and final carries.
        """
        out = np.empty((tokens.shape[0], n_steps), dtype=np.int64)
        h, c = T.Tensor(h), T.Tensor(c)
        tokens = np.asarray(tokens, dtype=np.int64)
        for t in range(n_steps):
            logp, h, c = self.step_tensors(tokens, h, c)
            tokens = draw_categorical(np.exp(logp.data), u[:, t])
            out[:, t] = tokens
        return out, h.data, c.data

    def run_states(self, ids: np.ndarray):
        """Carries after consuming each prefix of `ids` (B,T).

        Returns (h_stack, c_stack) of shape (T+1, B, d_h): index t holds the
        state after consuming ids[:, :t] (index 0 is the BOS-fed start).
        """
        count, length = ids.shape
        h = np.zeros((count, self.d_h))
        c = np.zeros((count, self.d_h))
        h_stack = np.empty((length + 1, count, self.d_h))
        c_stack = np.empty((length + 1, count, self.d_h))
        h_stack[0], c_stack[0] = h, c
        tokens = np.full(count, BOS, dtype=np.int64)
        for t in range(length):
            _, ht, ct = self.step_tensors(tokens, T.Tensor(h), T.Tensor(c))
            h, c = ht.data, ct.data
            h_stack[t + 1], c_stack[t + 1] = h, c
            tokens = ids[:, t]
        return h_stack, c_stack

    # -- likelihood ----------------------------------------------------------

    def _scored_counts(self, lengths: np.ndarray, fixed_len: int) -> np.ndarray:
        # Content positions, plus the EOS terminator when one exists.
        return lengths + (lengths < fixed_len)

    def nll_batch(self, ids: np.ndarray, lengths: np.ndarray):
        """Per-sequence NLL in nats and scored-token counts for (N,T) ids."""
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        count, fixed_len = ids.shape
        scored = self._scored_counts(lengths, fixed_len)
        total = np.zeros(count)
        tokens = np.full(count, BOS, dtype=np.int64)
        h = T.Tensor(np.zeros((count, self.d_h)))
        c = T.Tensor(np.zeros((count, self.d_h)))
        for t in range(fixed_len):
            logp, h, c = self.step_tensors(tokens, h, c)
            mask = t < scored
            total -= np.where(mask, logp.data[np.arange(count), ids[:, t]], 0.0)
            tokens = ids[:, t]
        return total, scored

    def nll(self, seq: TokenSeq) -> float:
        """-sum_t log p(w_t | prefix) over content tokens plus terminator."""
        seq.validate_ids(self.vocab_size)
        total, _ = self.nll_batch(np.array([seq.ids]), np.array([seq.length]))
        return float(total[0])

    # -- training ------------------------------------------------------------

    def taped_nll_loss(self, ids: np.ndarray, lengths: np.ndarray) -> T.Tensor:
        """Mean per-token NLL over a batch, built on the active tape."""
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        count, fixed_len = ids.shape
        scored = self._scored_counts(lengths, fixed_len)
        n_tokens = int(scored.sum())
        tokens = np.full(count, BOS, dtype=np.int64)
        h = T.Tensor(np.zeros((count, self.d_h)))
        c = T.Tensor(np.zeros((count, self.d_h)))
        total = T.Tensor(0.0)
        for t in range(fixed_len):
            logp, h, c = self.step_tensors(tokens, h, c)
            lp = T.take_along_rows(logp, ids[:, t])
            mask = (t < scored).astype(np.float64)
            total = T.add(total, T.tsum(T.mul(lp, T.Tensor(mask))))
            tokens = ids[:, t]
        return T.div(T.neg(total), T.Tensor(float(n_tokens)))

    def taped_weighted_logprob(self, ids: np.ndarray, weights: np.ndarray) -> T.Tensor:
        """(1/B) sum_b sum_t w[b,t] * log pi(ids[b,t] | prefix), on the tape.

        The score-function surrogate: ascending this with w = reward values
        is the sampled policy-gradient step.
        """
        ids = np.asarray(ids, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != ids.shape:
            raise GeneratorError(f"weights {weights.shape} do not match ids {ids.shape}")
        count, fixed_len = ids.shape
        tokens = np.full(count, BOS, dtype=np.int64)
        h = T.Tensor(np.zeros((count, self.d_h)))
        c = T.Tensor(np.zeros((count, self.d_h)))
        total = T.Tensor(0.0)
        for t in range(fixed_len):
            logp, h, c = self.step_tensors(tokens, h, c)
            lp = T.take_along_rows(logp, ids[:, t])
            total = T.add(total, T.tsum(T.mul(lp, T.Tensor(weights[:, t]))))
            tokens = ids[:, t]
        return T.div(total, T.Tensor(float(count)))

    def mle_step(self, batch, learning_rate: float, clip: float = 5.0) -> float:
        """One SGD step on mean per-token NLL; returns the pre-step loss."""
        seqs = list(batch)
        if not seqs:
            raise GeneratorError("mle_step on an empty batch")
        ids = np.array([s.ids for s in seqs], dtype=np.int64)
        lengths = np.array([s.length for s in seqs], dtype=np.int64)
        return self.mle_step_ids(ids, lengths, learning_rate, clip=clip)

    def mle_step_ids(self, ids, lengths, learning_rate: float, clip: float = 5.0) -> float:
        with T.Tape() as tape:
            loss = self.taped_nll_loss(ids, lengths)
        value = loss.item()
        if not np.isfinite(value):
            raise GeneratorError(f"non-finite training loss {value}")
        grads = tape.backward(loss, wrt=self.param_list())
        grads = T.clip_by_global_norm(grads, clip)
        T.sgd_step(grads, learning_rate)
        return value


def draw_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row: first index whose cumulative mass exceeds u."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)
