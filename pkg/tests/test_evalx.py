import math

import numpy as np
import pytest

from critmask.core import DataError, default_prompt
from critmask.evalx import (
    PassAtNReport,
    collect_pass_data,
    mean_output_entropy,
    pass_at_n,
    token_category,
    token_stats,
)
from critmask.generator import ToyBackend, TopAlt, Trajectory, greedy_decode
from critmask.tinylm import ModelConfig, ModelParams, ToyTokenizer, synth_corpus


@pytest.fixture(scope="module")
def tok():
    return ToyTokenizer()


@pytest.fixture(scope="module")
def backend(tok):
    cfg = ModelConfig(
        vocab_size=tok.vocab_size, context_len=160, embed_dim=16, n_heads=2,
        n_layers=2, ffn_dim=32, seed=5,
    )
    return ToyBackend(ModelParams.init(cfg), tok, tag="toy-eval", store_topk=6)


class TestTokenCategory:
    @pytest.mark.parametrize(
        "text,cat",
        [
            ("42", "number"),
            ("3.5", "number"),
            ("1,000", "number"),
            ("-7", "number"),
            ("+", "operator"),
            ("-", "operator"),
            ("*", "operator"),
            ("=", "operator"),
            ("%", "operator"),
            (".", "punctuation"),
            (",", "punctuation"),
            ("(", "punctuation"),
            ("$", "special"),
            ("#", "special"),
            ("####", "special"),
            ("@", "special"),
            ("apple", "word"),
            (" then", "word"),
            ("x2", "other"),
            ("", "other"),
            (" ", "other"),
        ],
    )
    def test_classification(self, text, cat):
        assert token_category(text) == cat

    def test_partition_every_token_has_one_category(self):
        from critmask.evalx import CATEGORIES

        probes = ["42", "+", ".", "$", "apple", "x2", "##", "a1b", "?!", "3/4"]
        for p in probes:
            assert token_category(p) in CATEGORIES


class TestPassAtN:
    def test_all_zero_row(self):
        report = pass_at_n({"q": [0, 0, 0]})
        assert report.pass_at[3] == 0.0

    def test_middle_hit(self):
        report = pass_at_n({"q": [0, 1, 0]})
        assert report.pass_at[1] == 0.0
        assert report.pass_at[2] == 1.0
        assert report.pass_at[3] == 1.0

    def test_matches_brute_force_and_monotone(self):
        rng = np.random.default_rng(0)
        matrix = {f"q{i}": rng.integers(0, 2, size=20).tolist() for i in range(10)}
        report = pass_at_n(matrix)
        for n in range(1, 21):
            brute = float(np.mean([int(any(bits[:n])) for bits in matrix.values()]))
            assert report.pass_at[n] == brute
        rates = [report.pass_at[n] for n in range(1, 21)]
        assert all(a <= b for a, b in zip(rates, rates[1:]))

    def test_pass_at_1_is_first_sample_mean(self):
        rng = np.random.default_rng(1)
        matrix = {f"q{i}": rng.integers(0, 2, size=5).tolist() for i in range(40)}
        report = pass_at_n(matrix)
        assert report.pass_at[1] == float(np.mean([bits[0] for bits in matrix.values()]))

    def test_ragged_matrix_rejected(self):
        with pytest.raises(DataError):
            pass_at_n({"a": [1, 0], "b": [1]})

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            pass_at_n({})


class TestCollectPassData:
    def test_matrix_shape_and_determinism(self, backend):
        samples, _ = synth_corpus(6, 4)
        a = collect_pass_data(samples, backend, 3, seed=17, max_new_tokens=30)
        b = collect_pass_data(samples, backend, 3, seed=17, max_new_tokens=30)
        assert a == b
        assert set(a) == {s.id for s in samples}
        assert all(len(bits) == 3 for bits in a.values())

    def test_near_zero_temperature_matches_greedy(self, backend):
        from critmask.verifier import verify

        samples, _ = synth_corpus(6, 5)
        matrix = collect_pass_data(
            samples, backend, 1, seed=3, temperature=1e-6, max_new_tokens=30
        )
        for s in samples:
            traj = greedy_decode(backend, default_prompt(s), 30, sample_id=s.id)
            assert matrix[s.id][0] == verify(traj.text, s)


class TestMeanOutputEntropy:
    def _traj(self, rows):
        alts = tuple(tuple(r) for r in rows)
        ids = tuple(r[0].token_id for r in rows)
        texts = tuple(r[0].text for r in rows)
        lps = tuple(r[0].logprob for r in rows)
        return Trajectory(
            sample_id="s", prompt="p", token_texts=texts, token_ids=ids,
            chosen_logprob=lps, topk=alts, decode_mode="sampled", finished=True,
        )

    def test_one_hot_trajectory_zero(self):
        rows = [(TopAlt("a", 0, 0.0),)] * 3
        assert mean_output_entropy([self._traj(rows)]) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_four_way(self):
        p = math.log(0.25)
        rows = [tuple(TopAlt(f"t{i}", i, p) for i in range(4))] * 2
        assert mean_output_entropy([self._traj(rows)]) == pytest.approx(math.log(4), rel=1e-12)

    def test_mixture_matches_hand_average(self):
        p25 = math.log(0.25)
        uniform_row = tuple(TopAlt(f"t{i}", i, p25) for i in range(4))
        onehot_row = (TopAlt("a", 0, 0.0),)
        t1 = self._traj([uniform_row, uniform_row])
        t2 = self._traj([onehot_row])
        expected = (2 * math.log(4) + 0.0) / 3
        assert mean_output_entropy([t1, t2]) == pytest.approx(expected, rel=1e-12)

    def test_empty_is_error(self):
        with pytest.raises(DataError):
            mean_output_entropy([])


class TestTokenStats:
    def _traj_and_mask(self):
        lp = math.log(0.5)
        rows = [
            (TopAlt("3", 4, lp), TopAlt("4", 5, lp)),
            (TopAlt("add", 30, lp), TopAlt("so", 33, lp)),
            (TopAlt("+", 12, lp), TopAlt("-", 13, lp)),
        ]
        alts = tuple(tuple(r) for r in rows)
        traj = Trajectory(
            sample_id="s", prompt="p",
            token_texts=("3", "add", "+"), token_ids=(4, 30, 12),
            chosen_logprob=(lp, lp, lp), topk=alts, decode_mode="sampled", finished=True,
        )
        return traj, [1.0, 0.0, 1.0]

    def test_confidence_and_perplexity_identities(self):
        traj, mask = self._traj_and_mask()
        report = token_stats([traj], [mask])
        assert report.critical.confidence == pytest.approx(0.5, rel=1e-12)
        assert report.critical.perplexity == pytest.approx(2.0, rel=1e-12)
        assert report.normal.confidence == pytest.approx(0.5, rel=1e-12)

    def test_category_histograms_partition(self):
        traj, mask = self._traj_and_mask()
        report = token_stats([traj], [mask])
        assert report.critical.category_histogram == {"number": 1, "operator": 1}
        assert report.normal.category_histogram == {"word": 1}
        assert sum(report.critical.category_histogram.values()) == report.critical.count
        assert sum(report.normal.category_histogram.values()) == report.normal.count

    def test_all_critical_leaves_normal_empty(self):
        traj, _ = self._traj_and_mask()
        report = token_stats([traj], [[1.0, 1.0, 1.0]])
        assert report.normal.count == 0
        assert report.normal.confidence is None
        assert sum(report.critical.category_histogram.values()) == 3

    def test_matches_straight_line_recomputation(self, backend):
        # brute-force oracle over three real trajectories
        samples, _ = synth_corpus(9, 3)
        trajs = [
            greedy_decode(backend, default_prompt(s), 25, sample_id=s.id) for s in samples
        ]
        rng = np.random.default_rng(2)
        masks = [rng.integers(0, 2, size=t.length).astype(float).tolist() for t in trajs]
        report = token_stats(trajs, masks, backend)

        from critmask.select import entropy_scores

        probs = {"critical": [], "normal": []}
        lps = {"critical": [], "normal": []}
        ents = {"critical": [], "normal": []}
        for traj, mask in zip(trajs, masks):
            es = entropy_scores(traj, backend).scores
            for t in range(traj.length):
                g = "critical" if mask[t] > 0 else "normal"
                probs[g].append(math.exp(traj.chosen_logprob[t]))
                lps[g].append(traj.chosen_logprob[t])
                ents[g].append(es[t])
        for group, stats in (("critical", report.critical), ("normal", report.normal)):
            if probs[group]:
                assert stats.confidence == pytest.approx(float(np.mean(probs[group])), rel=1e-12)
                assert stats.perplexity == pytest.approx(
                    float(np.exp(-np.mean(lps[group]))), rel=1e-12
                )
                assert stats.mean_entropy == pytest.approx(float(np.mean(ents[group])), rel=1e-12)

    def test_misaligned_mask_rejected(self):
        traj, _ = self._traj_and_mask()
        with pytest.raises(DataError):
            token_stats([traj], [[1.0]])

    def test_render_table_shape(self):
        traj, mask = self._traj_and_mask()
        table = token_stats([traj], [mask]).render_table()
        assert "Confidence" in table and "Perplexity" in table and "Entropy" in table
