"""Vocabulary thresholds, fixed-length encoding, splits, file round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankgen import corpus as C


LINES = ["the cat sat", "the cat ran", "the dog sat quietly"]


class TestVocabBuild:
    def test_min_count_one_retains_everything(self):
        v = C.Vocab.build(LINES, min_count=1)
        for tok in "the cat sat ran dog quietly".split():
            assert v.lookup(tok) != C.UNK

    def test_below_threshold_encodes_to_unk(self):
        lines = ["w w w w"]  # four occurrences
        v = C.Vocab.build(lines, min_count=5)
        assert v.lookup("w") == C.UNK

    def test_threshold_two_keeps_doubly_occurring_token(self):
        v = C.Vocab.build(["a b", "a c"], min_count=2)
        assert v.lookup("a") != C.UNK
        assert v.lookup("b") == C.UNK

    def test_empty_stream_rejected(self):
        with pytest.raises(C.CorpusError):
            C.Vocab.build([], min_count=1)

    def test_reserved_ids(self):
        v = C.Vocab.build(LINES, min_count=1)
        assert (C.PAD, C.BOS, C.EOS, C.UNK) == (0, 1, 2, 3)
        assert v.id_to_token[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]

    def test_first_occurrence_order(self):
        v = C.Vocab.build(["b a", "a b c"], min_count=1)
        assert v.id_to_token[4:] == ["b", "a", "c"]

    def test_no_retained_token_below_min_count(self):
        rng = np.random.default_rng(0)
        words = [f"w{i}" for i in range(30)]
        lines = [" ".join(rng.choice(words, size=8)) for _ in range(40)]
        from collections import Counter
        counts = Counter(tok for line in lines for tok in line.split())
        v = C.Vocab.build(lines, min_count=3)
        for tok in v.id_to_token[4:]:
            assert counts[tok] >= 3


class TestEncode:
    def setup_method(self):
        self.v = C.Vocab.build(LINES, min_count=1)

    def test_empty_line(self):
        seq = self.v.encode("", 5)
        assert seq.ids == (C.EOS, C.PAD, C.PAD, C.PAD, C.PAD)
        assert seq.length == 0

    def test_round_trip_known_tokens(self):
        seq = self.v.encode("the cat sat", 8)
        assert self.v.decode(seq) == "the cat sat"
        assert seq.length == 3
        assert seq.ids[3] == C.EOS

    def test_unknown_token_position(self):
        seq = self.v.encode("the zebra sat", 8)
        assert seq.ids[1] == C.UNK
        assert sum(1 for i in seq.ids if i == C.UNK) == 1
        assert self.v.decode(seq) == "the <unk> sat"

    def test_truncation(self):
        seq = self.v.encode("the cat sat quietly", 2)
        assert seq.length == 2
        assert len(seq.ids) == 2
        assert C.EOS not in seq.ids

    def test_exact_length_line_has_no_terminator(self):
        seq = self.v.encode("the cat", 2)
        assert seq.length == 2
        assert seq.ids == (self.v.lookup("the"), self.v.lookup("cat"))

    def test_reserved_surface_forms_encode_to_reserved_ids(self):
        seq = self.v.encode("the <eos> cat", 8)
        assert seq.ids[1] == C.EOS
        assert seq.length == 3

    @given(st.lists(st.sampled_from("the cat sat ran dog quietly zzz".split()),
                    min_size=0, max_size=6))
    @settings(max_examples=80, deadline=None)
    def test_decode_of_encode_reproduces_in_vocab_tokens(self, toks):
        """In-vocab tokens survive; OOV tokens come back as the UNK form."""
        line = " ".join(toks)
        got = self.v.decode(self.v.encode(line, 10)).split()
        want = [t if self.v.lookup(t) != C.UNK else "<unk>" for t in toks]
        assert got == want


class TestTokenSeqStructure:
    def test_terminator_required(self):
        with pytest.raises(C.CorpusError):
            C.TokenSeq((5, 5, 5, C.PAD), 2)  # position 2 should be EOS

    def test_padding_required_after_terminator(self):
        with pytest.raises(C.CorpusError):
            C.TokenSeq((5, C.EOS, 7), 1)

    def test_full_content_window_is_unconstrained(self):
        seq = C.TokenSeq((5, C.EOS, 7), 3)  # EOS inside content is content
        assert seq.content() == (5, C.EOS, 7)

    def test_id_range_validation(self):
        seq = C.TokenSeq((99, C.EOS), 1)
        with pytest.raises(C.CorpusError):
            seq.validate_ids(50)


class TestSplit:
    def make(self, n=10):
        v = C.Vocab.integers(20)
        seqs = [v.encode(f"{i % 20} {(i * 7) % 20}", 4) for i in range(n)]
        return C.Corpus(seqs, v, 4)

    def test_eighty_twenty(self):
        train, valid = C.split(self.make(10), seed=1, train_fraction=0.8)
        assert (len(train), len(valid)) == (8, 2)

    def test_same_seed_same_split(self):
        c = self.make(25)
        a = C.split(c, seed=7, train_fraction=0.6)
        b = C.split(c, seed=7, train_fraction=0.6)
        assert [s.ids for s in a[0]] == [s.ids for s in b[0]]
        assert [s.ids for s in a[1]] == [s.ids for s in b[1]]

    def test_union_is_input_multiset(self):
        c = self.make(17)
        train, valid = C.split(c, seed=3, train_fraction=0.5)
        got = sorted(s.ids for s in list(train) + list(valid))
        want = sorted(s.ids for s in c)
        assert got == want

    def test_too_small(self):
        with pytest.raises(C.CorpusError):
            C.split(self.make(1), seed=0, train_fraction=0.5)

    def test_bad_fraction(self):
        with pytest.raises(C.CorpusError):
            C.split(self.make(5), seed=0, train_fraction=1.0)


class TestFiles:
    def test_vocab_round_trip(self, tmp_path):
        v = C.Vocab.build(LINES, min_count=2)
        p = tmp_path / "vocab.txt"
        v.save(p)
        w = C.Vocab.load(p)
        assert w.id_to_token == v.id_to_token
        assert w.min_count == 2

    def test_vocab_header_required(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("cat\ndog\n")
        with pytest.raises(C.CorpusError):
            C.Vocab.load(p)

    def test_corpus_round_trip(self, tmp_path):
        v = C.Vocab.build(LINES, min_count=1)
        c = C.encode_lines(LINES, v, 8)
        p = tmp_path / "corpus.txt"
        C.save_corpus(c, p)
        again = C.load_corpus(p, v, 8)
        assert [s.ids for s in again] == [s.ids for s in c]

    def test_synthetic_integer_round_trip(self, tmp_path):
        """Full-window integer sequences survive save/load exactly."""
        v = C.Vocab.integers(40)
        rng = np.random.default_rng(5)
        seqs = [C.TokenSeq(tuple(rng.integers(0, v.size, size=6)), 6)
                for _ in range(30)]
        c = C.Corpus(seqs, v, 6)
        p = tmp_path / "synthetic.txt"
        C.save_corpus(c, p)
        again = C.load_corpus(p, v, 6)
        assert [s.ids for s in again] == [s.ids for s in c]

    def test_integer_vocab_shape(self):
        v = C.Vocab.integers(3)
        assert v.size == 7
        assert v.lookup("0") == 4
        assert v.lookup("2") == 6


class TestCorpusConstruction:
    def test_mixed_lengths_rejected(self):
        v = C.Vocab.integers(5)
        with pytest.raises(C.CorpusError):
            C.Corpus([v.encode("1", 4), v.encode("1", 5)], v, 4)

    def test_id_matrix(self):
        v = C.Vocab.integers(5)
        c = C.encode_lines(["0 1", "2"], v, 4)
        m = c.id_matrix()
        assert m.shape == (2, 4)
        np.testing.assert_array_equal(m[0], [4, 5, C.EOS, C.PAD])
        np.testing.assert_array_equal(c.lengths(), [2, 1])
