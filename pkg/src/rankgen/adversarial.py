"""Adversarial training orchestration.

One Trainer drives all four objectives: maximum likelihood only, ranking
reward (generator vs conv ranker), binary classifier reward, and sentence
BLEU reward. Generator updates use the sampled score-function estimator:
sample a batch, value every prefix by Monte-Carlo rollouts, ascend
mean(sum_t value * log-prob). Ranker updates ascend the margin between
log expected rank of human sentences (compared against generated ones)
and of generated sentences (compared against human ones). An optional
block of adversary-only warmup steps can precede round 1 so the first
policy updates already see a trained scorer.

Every random draw comes from a stream keyed by (master seed, purpose tag,
step index), so a run is a pure function of (seed, config, corpus) and can
resume from any round checkpoint bitwise.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ck
from . import tensor as T
from .config import TrainingConfig
from .corpus import Corpus, TokenSeq, split
from .generator import GeneratorModel
from .metrics import BleuSpec, bleu
from .oracle import oracle_nll
from .ranker import BatchRankScorer, ConvEncoder, RankerModel, taped_log_expected_rank
from .rollout import sequence_values


class TrainError(RuntimeError):
    pass


# purpose tags for seed derivation; values are arbitrary but frozen, since
# changing any of them changes every sampled stream
_TAG_GEN_INIT = 11
_TAG_MODEL_INIT = 12
_TAG_PRETRAIN = 21
_TAG_GSAMPLE = 31
_TAG_GSETS = 32
_TAG_GROLL = 33
_TAG_RHUMAN = 41
_TAG_RSYNTH = 42
_TAG_RSETS = 43
_TAG_RCGEN = 44
_TAG_EVAL = 51
_TAG_SPLIT = 61

# step-index offset for adversary warmup draws, far above any reachable
# round step so the streams never collide
_WARMUP_BASE = 10**9


def derive_seed(master: int, *tags: int) -> int:
    """Collision-resistant child seed for a (purpose, index) coordinate."""
    ss = np.random.SeedSequence([int(master)] + [int(t) for t in tags])
    return int(ss.generate_state(1)[0])


def _stream(master: int, *tags: int):
    return np.random.default_rng(
        np.random.SeedSequence([int(master)] + [int(t) for t in tags]))


# -- run log -----------------------------------------------------------------

_COLUMNS = ("phase", "index", "g_loss", "r_loss", "nll_per_seq", "nll_per_token")


@dataclass(frozen=True)
class RunRecord:
    phase: str
    index: int
    g_loss: Optional[float] = None
    r_loss: Optional[float] = None
    nll_per_seq: Optional[float] = None
    nll_per_token: Optional[float] = None


class RunLog:
    """Per-epoch / per-round training records, serialized as CSV.

    Floats are written with repr so the file round-trips bitwise; indices
    must be strictly increasing within each phase.
    """

    def __init__(self, records=()):
        self.records = []
        for r in records:
            self.add(r)

    def add(self, record: RunRecord):
        last = max((r.index for r in self.records if r.phase == record.phase),
                   default=-1)
        if record.index <= last:
            raise TrainError(
                f"run log index {record.index} not increasing in phase "
                f"{record.phase!r} (last was {last})")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, RunLog) and self.records == other.records

    def rows(self, phase: str):
        return [r for r in self.records if r.phase == phase]

    def final_nll(self) -> float:
        for r in reversed(self.records):
            if r.nll_per_seq is not None:
                return r.nll_per_seq
        raise TrainError("run log holds no evaluation rows")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.phase, r.index,
                    *("" if v is None else repr(v)
                      for v in (r.g_loss, r.r_loss, r.nll_per_seq,
                                r.nll_per_token)),
                ])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        log = cls()
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != _COLUMNS:
                raise TrainError(f"unrecognized run log header in {path}")
            for row in reader:
                phase, index, *vals = row
                g, r, ns, nt = (None if v == "" else float(v) for v in vals)
                log.add(RunRecord(phase, int(index), g, r, ns, nt))
        return log


# -- binary-classifier baseline ------------------------------------------------


class Discriminator:
    """Conv encoder with a 2-way softmax head; p(real) is the reward signal.

    The head starts at zero so an untrained classifier rewards every
    sequence with exactly 0.5.
    """

    def __init__(self, vocab_size: int, fixed_len: int, d_e: int = 32,
                 widths=(2, 3, 4), filters_per_width: int = 16,
                 nonlinearity: str = "tanh", seed: int = 0,
                 init_scale: float = 0.1):
        self.encoder = ConvEncoder(vocab_size, fixed_len, d_e=d_e,
                                   widths=widths,
                                   filters_per_width=filters_per_width,
                                   nonlinearity=nonlinearity, seed=seed,
                                   init_scale=init_scale)
        f = self.encoder.feature_dim
        self.w_fake = T.Tensor(np.zeros(f), requires_grad=True)
        self.w_real = T.Tensor(np.zeros(f), requires_grad=True)
        self.b = T.Tensor(np.zeros(2), requires_grad=True)

    @property
    def fixed_len(self):
        return self.encoder.fixed_len

    def parameters(self) -> dict:
        out = self.encoder.parameters()
        out.update({"head_w_fake": self.w_fake, "head_w_real": self.w_real,
                    "head_b": self.b})
        return out

    def param_list(self):
        return self.encoder.param_list() + [self.w_fake, self.w_real, self.b]

    def prob_real_batch(self, ids: np.ndarray) -> np.ndarray:
        """(N,) probability-of-real; vectorized, gradient-free."""
        feats = self.encoder.encode_batch(ids)
        logits = np.stack([feats @ self.w_fake.data,
                           feats @ self.w_real.data], axis=1) + self.b.data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e[:, 1] / e.sum(axis=1)

    def _taped_logp(self, ids_row: np.ndarray, real: bool) -> T.Tensor:
        y = self.encoder.encode_tensor(ids_row)
        logits = T.stack_scalars([T.dot(y, self.w_fake), T.dot(y, self.w_real)])
        logp = T.log_softmax(T.add(logits, self.b), axis=0)
        return T.pick(logp, 1 if real else 0)

    def taped_cross_entropy(self, real_ids: np.ndarray,
                            fake_ids: np.ndarray) -> T.Tensor:
        terms = [self._taped_logp(row, True) for row in real_ids]
        terms += [self._taped_logp(row, False) for row in fake_ids]
        return T.neg(T.tmean(T.stack_scalars(terms)))


# -- trainer --------------------------------------------------------------------


class Trainer:
    """Stateful driver for one (seed, config, corpus) training run."""

    def __init__(self, cfg: TrainingConfig, corpus: Corpus,
                 oracle: Optional[GeneratorModel] = None, out_dir=None,
                 threads: int = 1, progress=None):
        cfg.validate()
        self.progress = progress if progress is not None else (lambda msg: None)
        if len(corpus) == 0:
            raise TrainError("training corpus is empty")
        if corpus.fixed_len != cfg.fixed_len:
            raise TrainError(
                f"corpus window {corpus.fixed_len} does not match configured "
                f"fixed_len {cfg.fixed_len}")
        self.cfg = cfg
        self.oracle = oracle
        if oracle is not None and oracle.vocab_size != corpus.vocab.size:
            raise TrainError(
                f"oracle vocabulary {oracle.vocab_size} does not match corpus "
                f"vocabulary {corpus.vocab.size}")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.threads = max(1, int(threads))

        if cfg.train_fraction < 1.0:
            train, _held_out = split(corpus, derive_seed(cfg.seed, _TAG_SPLIT),
                                     cfg.train_fraction)
        else:
            train = corpus
        self.corpus = train
        self.train_ids = train.id_matrix()
        self.train_lengths = train.lengths()

        vocab_size = corpus.vocab.size
        self.gen = GeneratorModel(vocab_size, d_e=cfg.d_e, d_h=cfg.d_h,
                                  seed=derive_seed(cfg.seed, _TAG_GEN_INIT))
        self.ranker = None
        self.disc = None
        if cfg.mode == "rankgan":
            self.ranker = RankerModel(
                vocab_size, cfg.fixed_len, d_e=cfg.ranker_d_e,
                widths=cfg.ranker_widths,
                filters_per_width=cfg.ranker_filters,
                nonlinearity=cfg.ranker_nonlinearity, gamma=cfg.gamma,
                seed=derive_seed(cfg.seed, _TAG_MODEL_INIT))
        elif cfg.mode == "binary":
            self.disc = Discriminator(
                vocab_size, cfg.fixed_len, d_e=cfg.ranker_d_e,
                widths=cfg.ranker_widths,
                filters_per_width=cfg.ranker_filters,
                nonlinearity=cfg.ranker_nonlinearity,
                seed=derive_seed(cfg.seed, _TAG_MODEL_INIT))
        self.baseline = 0.0
        self.runlog = RunLog()

    # -- drawing helpers ------------------------------------------------

    def _human_rows(self, rng, count: int) -> np.ndarray:
        idx = rng.integers(0, len(self.train_ids), size=count)
        return self.train_ids[idx]

    def _reward_fn(self, step: int):
        """Complete-sequence reward for the current mode, plus its draws."""
        cfg = self.cfg
        rng = _stream(cfg.seed, _TAG_GSETS, step)
        if cfg.mode == "rankgan":
            u_ids = self._human_rows(rng, cfg.u_size)
            c_plus = self._human_rows(rng, cfg.c_size)
            scorer = BatchRankScorer(self.ranker, u_ids, c_plus)
            return scorer.score
        if cfg.mode == "binary":
            return self.disc.prob_real_batch
        if cfg.mode == "pg_bleu":
            refs = [TokenSeq(tuple(int(t) for t in row), cfg.fixed_len)
                    for row in self._human_rows(rng, cfg.u_size)]
            spec = BleuSpec(max_n=cfg.bleu_max_n)
            fixed_len = cfg.fixed_len

            def bleu_reward(ids: np.ndarray) -> np.ndarray:
                return np.array([
                    bleu(TokenSeq(tuple(int(t) for t in row), fixed_len),
                         refs, spec)
                    for row in ids])

            return bleu_reward
        raise TrainError(f"mode {cfg.mode!r} takes no generator reward steps")

    # -- update steps -----------------------------------------------------

    def pretrain_epoch(self, epoch: int) -> float:
        cfg = self.cfg
        order = _stream(cfg.seed, _TAG_PRETRAIN, epoch).permutation(
            len(self.train_ids))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            losses.append(self.gen.mle_step_ids(
                self.train_ids[idx], self.train_lengths[idx],
                cfg.lr_mle, clip=cfg.clip))
        return float(np.mean(losses))

    def generator_step(self, step: int) -> float:
        """One sampled policy-gradient ascent step; returns mean reward."""
        cfg = self.cfg
        ids = self.gen.sample_batch(cfg.batch_size, cfg.fixed_len,
                                    _stream(cfg.seed, _TAG_GSAMPLE, step))
        reward_fn = self._reward_fn(step)
        values = sequence_values(self.gen, ids, reward_fn,
                                 n_paths=cfg.n_rollout,
                                 seed=derive_seed(cfg.seed, _TAG_GROLL, step),
                                 threads=self.threads)
        mean_reward = float(values[:, -1].mean())
        weights = values
        if cfg.reward_baseline:
            weights = values - self.baseline
            self.baseline = (cfg.baseline_decay * self.baseline
                             + (1.0 - cfg.baseline_decay) * float(values.mean()))
        with T.Tape() as tape:
            loss = T.neg(self.gen.taped_weighted_logprob(ids, weights))
        grads = tape.backward(loss, wrt=self.gen.param_list())
        self._step_params(grads, cfg.lr_policy, "generator reward step")
        return mean_reward

    def ranker_step(self, step: int) -> float:
        """One ascent step on the ranking margin; returns the objective."""
        cfg = self.cfg
        human = self._human_rows(_stream(cfg.seed, _TAG_RHUMAN, step),
                                 cfg.batch_size)
        synth = self.gen.sample_batch(cfg.batch_size, cfg.fixed_len,
                                      _stream(cfg.seed, _TAG_RSYNTH, step))
        u_ids = self._human_rows(_stream(cfg.seed, _TAG_RSETS, step),
                                 cfg.u_size)
        c_plus = self._human_rows(_stream(cfg.seed, _TAG_RSETS, step, 2),
                                  cfg.c_size)
        c_minus = self.gen.sample_batch(cfg.c_size, cfg.fixed_len,
                                        _stream(cfg.seed, _TAG_RCGEN, step))
        enc = self.ranker.encoder
        with T.Tape() as tape:
            y_refs = [enc.encode_tensor(row) for row in u_ids]
            y_cplus = [enc.encode_tensor(row) for row in c_plus]
            y_cminus = [enc.encode_tensor(row) for row in c_minus]
            human_terms = [
                taped_log_expected_rank(enc.encode_tensor(row), y_refs,
                                        y_cminus, self.ranker.gamma)
                for row in human]
            synth_terms = [
                taped_log_expected_rank(enc.encode_tensor(row), y_refs,
                                        y_cplus, self.ranker.gamma)
                for row in synth]
            objective = T.sub(T.tmean(T.stack_scalars(human_terms)),
                              T.tmean(T.stack_scalars(synth_terms)))
            loss = T.neg(objective)
        grads = tape.backward(loss, wrt=self.ranker.param_list())
        self._step_params(grads, cfg.lr_ranker, "ranker step")
        self.ranker.bump_version()
        return float(objective.item())

    def discriminator_step(self, step: int) -> float:
        """One descent step on real/fake cross-entropy; returns the loss."""
        cfg = self.cfg
        human = self._human_rows(_stream(cfg.seed, _TAG_RHUMAN, step),
                                 cfg.batch_size)
        synth = self.gen.sample_batch(cfg.batch_size, cfg.fixed_len,
                                      _stream(cfg.seed, _TAG_RSYNTH, step))
        with T.Tape() as tape:
            loss = self.disc.taped_cross_entropy(human, synth)
        grads = tape.backward(loss, wrt=self.disc.param_list())
        self._step_params(grads, cfg.lr_ranker, "classifier step")
        return float(loss.item())

    def _step_params(self, grads: dict, lr: float, what: str):
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise TrainError(f"non-finite gradient in {what}")
        T.sgd_step(T.clip_by_global_norm(grads, self.cfg.clip), lr)

    # -- evaluation and artifacts ----------------------------------------

    def evaluate(self):
        if self.oracle is None:
            return None
        est = oracle_nll(self.oracle, self.gen,
                         n_samples=self.cfg.eval_samples,
                         fixed_len=self.cfg.fixed_len,
                         seed=derive_seed(self.cfg.seed, _TAG_EVAL))
        return est

    def _log(self, phase, index, g_loss=None, r_loss=None, est=None):
        self.runlog.add(RunRecord(
            phase, index, g_loss, r_loss,
            None if est is None else est.per_sequence,
            None if est is None else est.per_token))
        if est is not None:
            self.progress(f"{phase} {index}: nll/seq {est.per_sequence:.4f} "
                          f"(/tok {est.per_token:.4f})")

    def _adversary(self):
        return self.ranker if self.ranker is not None else self.disc

    def _save_round(self, rounds_done: int):
        if self.out_dir is None:
            return
        tag = f"round_{rounds_done:04d}"
        ck.save_generator(self.out_dir / f"gen_{tag}.ckpt", self.gen)
        adversary = self._adversary()
        if adversary is not None:
            ck.save_params(self.out_dir / f"adv_{tag}.ckpt", adversary,
                           vocab_size=self.gen.vocab_size, seed=self.cfg.seed)
        ck.save_blocks(self.out_dir / f"state_{tag}.ckpt",
                       {"baseline": np.float64(self.baseline)},
                       vocab_size=self.gen.vocab_size, d_e=0, d_h=0,
                       seed=self.cfg.seed)
        self.runlog.write_csv(self.out_dir / "runlog.csv")

    def _latest_round_on_disk(self) -> Optional[int]:
        if self.out_dir is None:
            return None
        rounds = []
        for p in self.out_dir.glob("gen_round_*.ckpt"):
            m = re.fullmatch(r"gen_round_(\d+)\.ckpt", p.name)
            if m:
                rounds.append(int(m.group(1)))
        return max(rounds) if rounds else None

    def _resume_round(self, rounds_done: int):
        tag = f"round_{rounds_done:04d}"
        ck.load_into(self.out_dir / f"gen_{tag}.ckpt", self.gen)
        adversary = self._adversary()
        if adversary is not None:
            ck.load_into(self.out_dir / f"adv_{tag}.ckpt", adversary)
            if self.ranker is not None:
                self.ranker.bump_version()
        _, state = ck.load_blocks(self.out_dir / f"state_{tag}.ckpt")
        self.baseline = float(state["baseline"])
        full = RunLog.read_csv(self.out_dir / "runlog.csv")
        self.runlog = RunLog(r for r in full.records
                             if r.phase == "pretrain" or r.index <= rounds_done)

    def _pretrain_path(self):
        return None if self.out_dir is None else self.out_dir / "gen_pretrain.ckpt"

    # -- phases ------------------------------------------------------------

    def run_pretrain(self):
        cfg = self.cfg
        self._log("pretrain", 0, est=self.evaluate())
        for epoch in range(1, cfg.pretrain_epochs + 1):
            mean_loss = self.pretrain_epoch(epoch)
            est = None
            if epoch % cfg.eval_every == 0 or epoch == cfg.pretrain_epochs:
                est = self.evaluate()
            self._log("pretrain", epoch, g_loss=mean_loss, est=est)
        path = self._pretrain_path()
        if path is not None:
            ck.save_generator(path, self.gen)
            self.runlog.write_csv(self.out_dir / "runlog.csv")

    def warmup_adversary(self):
        """Adversary-only updates against the freshly pretrained generator.

        Runs before round 1 so the first policy-gradient steps already see
        an informative reward instead of an untrained scorer. Touches no
        generator parameters and writes no log rows; round checkpoints carry
        the warmed adversary, so resuming from a round never repeats this.
        """
        cfg = self.cfg
        for i in range(cfg.adv_warmup_steps):
            if cfg.mode == "rankgan":
                self.ranker_step(_WARMUP_BASE + i)
            elif cfg.mode == "binary":
                self.discriminator_step(_WARMUP_BASE + i)

    def run_rounds(self, start_round: int = 0):
        cfg = self.cfg
        n_rounds = 0 if cfg.mode == "mle_only" else cfg.adversarial_rounds
        if start_round == 0 and n_rounds > 0:
            self.warmup_adversary()
        for rnd in range(start_round + 1, n_rounds + 1):
            g_losses = [self.generator_step((rnd - 1) * cfg.g_steps + i)
                        for i in range(cfg.g_steps)]
            r_losses = []
            for i in range(cfg.r_steps):
                step = (rnd - 1) * cfg.r_steps + i
                if cfg.mode == "rankgan":
                    r_losses.append(self.ranker_step(step))
                elif cfg.mode == "binary":
                    r_losses.append(self.discriminator_step(step))
            est = None
            if rnd % cfg.eval_every == 0 or rnd == n_rounds:
                est = self.evaluate()
            self._log("adversarial", rnd,
                      g_loss=float(np.mean(g_losses)) if g_losses else None,
                      r_loss=float(np.mean(r_losses)) if r_losses else None,
                      est=est)
            if rnd % cfg.checkpoint_every == 0 or rnd == n_rounds:
                self._save_round(rnd)

    def run(self, resume: bool = False) -> RunLog:
        start_round = None
        if resume and self.out_dir is not None:
            start_round = self._latest_round_on_disk()
            pre = self._pretrain_path()
            if start_round is not None:
                self._resume_round(start_round)
            elif pre is not None and pre.exists():
                ck.load_into(pre, self.gen)
                full = RunLog.read_csv(self.out_dir / "runlog.csv")
                self.runlog = RunLog(r for r in full.records
                                     if r.phase == "pretrain")
                start_round = 0
        if start_round is None:
            self.run_pretrain()
            start_round = 0
        self.run_rounds(start_round)
        if self.out_dir is not None:
            ck.save_generator(self.out_dir / "gen_final.ckpt", self.gen)
            adversary = self._adversary()
            if adversary is not None:
                ck.save_params(self.out_dir / "adv_final.ckpt", adversary,
                               vocab_size=self.gen.vocab_size,
                               seed=self.cfg.seed)
            self.runlog.write_csv(self.out_dir / "runlog.csv")
        return self.runlog


def train(cfg: TrainingConfig, corpus: Corpus,
          oracle: Optional[GeneratorModel] = None, out_dir=None,
          threads: int = 1, resume: bool = False, progress=None) -> RunLog:
    """Train per config and return the run log; see Trainer for artifacts."""
    return Trainer(cfg, corpus, oracle=oracle, out_dir=out_dir,
                   threads=threads, progress=progress).run(resume=resume)
