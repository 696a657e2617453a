import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtspeech import analysis as A
from mtspeech import model as M


def one_hot_frames(ids, C=4):
    lp = np.full((len(ids), C), -10.0)
    lp[np.arange(len(ids)), ids] = 0.0
    return lp


class TestDecoding:
    def test_collapse(self):
        assert A.greedy_decode(one_hot_frames([1, 1, 0, 2, 2])) == [1, 2]
        assert A.greedy_decode(one_hot_frames([0, 0, 0])) == []
        assert A.greedy_decode(one_hot_frames([1, 0, 1])) == [1, 1]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=30))
    def test_reconstruction(self, frames):
        out = A.greedy_decode(one_hot_frames(frames))
        assert 0 not in out
        runs = [k for i, k in enumerate(frames) if k != 0 and (i == 0 or frames[i - 1] != k)]
        assert out == runs


class TestEditDistance:
    def test_examples(self):
        assert A.edit_distance("abc", "abc") == 0
        assert A.edit_distance("abc", "axc") == 1
        assert A.edit_distance("abc", "") == 3
        assert A.edit_distance("", "ab") == 2
        assert A.edit_distance("kitten", "sitting") == 3

    @settings(max_examples=100, deadline=None)
    @given(*[st.lists(st.integers(0, 3), max_size=8)] * 3)
    def test_metric_axioms(self, a, b, c):
        assert (A.edit_distance(a, b) == 0) == (a == b)
        assert A.edit_distance(a, b) == A.edit_distance(b, a)
        assert A.edit_distance(a, c) <= A.edit_distance(a, b) + A.edit_distance(b, c)

    def test_per(self):
        assert A.per_rate([[1, 2], [3]], [[1, 2], [3, 4]]) == 1 / 4
        assert A.per_rate([[1, 2, 3, 4]], [[5]]) == 4.0
        with pytest.raises(ValueError):
            A.per_rate([], [])
        with pytest.raises(ValueError):
            A.per_rate([[1]], [[1], [2]])


class TestCooccurrence:
    def test_one_hot_rows(self):
        cooc = A.Cooccurrence.from_pairs([5, 5, 9, 2, 2, 2], [1, 1, 2, 3, 3, 3], num_codewords=16)
        np.testing.assert_array_equal(cooc.codewords, [2, 5, 9])
        assert A.active_codewords(cooc) == 3
        assert A.alignment_entropy(cooc) == 0.0

    def test_uniform_rows(self):
        P = 5
        ids = np.repeat([0, 3], P)
        ph = np.tile(np.arange(P), 2)
        cooc = A.Cooccurrence.from_pairs(ids, ph, num_codewords=4, phonemes=P)
        assert abs(A.alignment_entropy(cooc) - np.log(P)) < 1e-12

    def test_usage_counts(self):
        cooc = A.Cooccurrence.from_pairs([0] * 5 + [2] * 3, [1] * 8, num_codewords=4)
        assert cooc.usage.tolist() == [5, 3] and A.active_codewords(cooc) == 2
        full = A.Cooccurrence.from_pairs(np.arange(9), np.zeros(9, int), num_codewords=9)
        assert A.active_codewords(full) == 9

    def test_entropy_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            P = int(rng.integers(2, 6))
            cooc = A.Cooccurrence.from_pairs(rng.integers(0, 20, 200), rng.integers(0, P, 200), 20, P)
            assert 0.0 <= A.alignment_entropy(cooc) <= np.log(P) + 1e-12
            assert A.active_codewords(cooc) <= 20

    def test_errors(self):
        with pytest.raises(ValueError, match="no active"):
            A.alignment_entropy(A.Cooccurrence.from_pairs([], [], 4, 3))
        with pytest.raises(ValueError):
            A.Cooccurrence.from_pairs([1, 2], [0], 4)
        with pytest.raises(ValueError):
            A.Cooccurrence.from_pairs([7], [0], 4)

    def test_merge(self):
        a = A.Cooccurrence.from_pairs([0, 1], [1, 2], 4, 3)
        b = A.Cooccurrence.from_pairs([1, 3], [2, 0], 4, 3)
        m = a.merge(b)
        assert m.codewords.tolist() == [0, 1, 3] and m.counts[1, 2] == 2

    def test_from_model(self):
        cfg = M.ModelConfig(M.EncoderConfig(conv_channels=(4,) * 7, blocks=1, dim=8, heads=2, ffn_dim=8,
                                            pos_conv_kernel=4, pos_conv_groups=2),
                            M.QuantizerConfig(groups=2, entries=3))
        params = M.init_params(cfg, 3, seed=0, dtype=np.float64)
        rng = np.random.default_rng(1)
        corpus = []
        for i in range(4):
            x = rng.normal(size=2400)
            T = cfg.encoder.num_frames(x.size)
            corpus.append(M.Utterance(x, frame_labels=rng.integers(1, 4, T), uid=str(i)))
        cooc = A.codebook_cooccurrence(params, cfg, corpus, phonemes=4)
        np.testing.assert_allclose(cooc.conditional.sum(axis=1), 1.0, atol=1e-12)
        assert cooc.usage.sum() == sum(len(u.frame_labels) for u in corpus)
        assert A.active_codewords(cooc) <= 9
        # noise-free selections: a second pass gives the same table
        again = A.codebook_cooccurrence(params, cfg, corpus, phonemes=4)
        np.testing.assert_array_equal(again.counts, cooc.counts)
        single = [M.Utterance(corpus[0].samples, frame_labels=np.full(len(corpus[0].frame_labels), 2))]
        one = A.codebook_cooccurrence(params, cfg, single, phonemes=4)
        assert (one.counts[:, [0, 1, 3]] == 0).all()
        bad = [M.Utterance(corpus[0].samples, frame_labels=np.ones(3, int))]
        with pytest.raises(ValueError, match="frame"):
            A.codebook_cooccurrence(params, cfg, bad)

    def test_exports(self, tmp_path):
        cooc = A.Cooccurrence.from_pairs([0, 0, 0, 3], [1, 1, 2, 0], 4, 3)
        A.write_cooccurrence_csv(tmp_path / "c.csv", cooc)
        rows = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert list(rows[0]) == ["codeword_id", "phoneme_id", "count", "conditional_prob"]
        assert {(r["codeword_id"], r["phoneme_id"], r["count"]) for r in rows} == {
            ("0", "1", "2"), ("0", "2", "1"), ("3", "0", "1")}
        A.write_summary(tmp_path / "s.json", A.summary(cooc, per=0.25))
        s = json.loads((tmp_path / "s.json").read_text())
        assert s["active_codewords"] == 2 and s["per"] == 0.25
        assert abs(s["alignment_entropy"] - (-(2 / 3 * np.log(2 / 3) + 1 / 3 * np.log(1 / 3)) / 2)) < 1e-12
