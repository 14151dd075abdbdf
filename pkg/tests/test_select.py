import math

import numpy as np
import pytest

from critmask.core import CapabilityError, DataError, default_prompt
from critmask.generator import ToyBackend, TopAlt, Trajectory, greedy_decode
from critmask.select import (
    ScoreVector,
    attention_scores,
    dft_prob_weights,
    entropy_scores,
    mask_to_example,
    number_mask,
    top_fraction_mask,
    transfer_scores,
)
from critmask.tinylm import ModelConfig, ModelParams, ToyTokenizer, synth_corpus

from _mock import ScriptedBackend, mock_fixture


@pytest.fixture(scope="module")
def tok():
    return ToyTokenizer()


def make_backend(tok, seed, tag):
    cfg = ModelConfig(
        vocab_size=tok.vocab_size, context_len=160, embed_dim=16, n_heads=2,
        n_layers=2, ffn_dim=32, seed=seed,
    )
    return ToyBackend(ModelParams.init(cfg), tok, tag=tag, store_topk=6)


@pytest.fixture(scope="module")
def backend(tok):
    return make_backend(tok, 5, "toy-a")


@pytest.fixture(scope="module")
def trajectory(backend):
    samples, _ = synth_corpus(3, 1)
    return greedy_decode(backend, default_prompt(samples[0]), 20, sample_id=samples[0].id)


def fake_trajectory(topk_rows, chosen=None, texts=None):
    t = len(topk_rows)
    token_ids = tuple((chosen or [row[0][1] for row in topk_rows])[i] for i in range(t))
    token_texts = tuple((texts or [row[0][0] for row in topk_rows])[i] for i in range(t))
    lps = tuple(
        next(a.logprob for a in row if a.token_id == token_ids[i])
        for i, row in enumerate(topk_rows)
    )
    return Trajectory(
        sample_id="s", prompt="p", token_texts=token_texts, token_ids=token_ids,
        chosen_logprob=lps, topk=tuple(tuple(r) for r in topk_rows),
        decode_mode="sampled", finished=True,
    )


class TestEntropyScores:
    def test_full_distribution_uniform(self, tok):
        # zeroed output projection forces uniform distributions
        cfg = ModelConfig(
            vocab_size=tok.vocab_size, context_len=64, embed_dim=8, n_heads=2,
            n_layers=1, ffn_dim=16, seed=0,
        )
        m = ModelParams.init(cfg)
        m.params["w_out"][:] = 0.0
        be = ToyBackend(m, tok, tag="uniform")
        samples, _ = synth_corpus(3, 1)
        traj = greedy_decode(be, default_prompt(samples[0]), 5, sample_id="s")
        scores = entropy_scores(traj, be)
        assert not scores.approximate
        np.testing.assert_allclose(scores.scores, math.log(tok.vocab_size), rtol=1e-12)

    def test_truncated_three_bucket_oracle(self):
        # derived: -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        row = (
            TopAlt("a", 0, math.log(0.7)),
            TopAlt("b", 1, math.log(0.2)),
        )
        traj = fake_trajectory([row])
        scores = entropy_scores(traj, backend=None)
        assert scores.approximate
        assert scores.scores[0] == pytest.approx(0.8018185525433372, rel=1e-9)

    def test_one_hot_zero(self):
        row = (TopAlt("a", 0, 0.0), TopAlt("b", 1, -745.0))
        traj = fake_trajectory([row])
        scores = entropy_scores(traj, backend=None)
        assert scores.scores[0] == pytest.approx(0.0, abs=1e-12)

    def test_exact_when_topk_covers_mass(self):
        row = (TopAlt("a", 0, math.log(0.75)), TopAlt("b", 1, math.log(0.25)))
        traj = fake_trajectory([row])
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert entropy_scores(traj, None).scores[0] == pytest.approx(expected, rel=1e-12)


class TestTopFractionMask:
    def test_half(self):
        sv = ScoreVector("s", (0.1, 0.9, 0.5, 0.7), "entropy")
        assert top_fraction_mask(sv, 0.5) == (0, 1, 0, 1)

    def test_boundaries(self):
        sv = ScoreVector("s", (0.1, 0.9, 0.5), "entropy")
        assert top_fraction_mask(sv, 0.0) == (0, 0, 0)
        assert top_fraction_mask(sv, 1.0) == (1, 1, 1)

    def test_fifteen_percent_of_twenty_is_three(self):
        sv = ScoreVector("s", tuple(float(i) for i in range(20)), "entropy")
        assert sum(top_fraction_mask(sv, 0.15)) == 3

    def test_ties_break_toward_lower_index(self):
        sv = ScoreVector("s", (0.5, 0.5, 0.5, 0.5), "entropy")
        assert top_fraction_mask(sv, 0.5) == (1, 1, 0, 0)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        scores = tuple(rng.normal(size=11).tolist())
        sv1 = ScoreVector("s", scores, "entropy")
        sv2 = ScoreVector("s", tuple(s + 13.7 for s in scores), "entropy")
        for f in (0.0, 0.2, 0.5, 0.9, 1.0):
            assert top_fraction_mask(sv1, f) == top_fraction_mask(sv2, f)

    def test_count_matches_rounding_rule(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            t = int(rng.integers(1, 40))
            f = float(rng.random())
            sv = ScoreVector("s", tuple(rng.normal(size=t).tolist()), "entropy")
            assert sum(top_fraction_mask(sv, f)) == min(t, int(math.floor(f * t + 0.5)))

    def test_fraction_out_of_range(self):
        sv = ScoreVector("s", (1.0,), "entropy")
        with pytest.raises(DataError):
            top_fraction_mask(sv, 1.5)


class TestAttentionScores:
    def test_matches_backend_recomputation(self, backend, trajectory):
        scores = attention_scores(trajectory, backend)
        direct = backend.attention_received_scores(
            trajectory.prompt, list(trajectory.token_ids)
        )
        np.testing.assert_allclose(scores.scores, direct, rtol=1e-12)
        assert len(scores.scores) == trajectory.length

    def test_capability_error_without_attention(self, trajectory):
        mock = ScriptedBackend(seed=0)
        with pytest.raises(CapabilityError):
            attention_scores(trajectory, mock)


class TestDftProbWeights:
    def test_identity_values(self):
        row0 = (TopAlt("a", 0, 0.0),)
        row1 = (TopAlt("b", 1, math.log(0.5)),)
        traj = fake_trajectory([row0, row1])
        sv = dft_prob_weights(traj)
        assert sv.scores[0] == pytest.approx(1.0)
        assert sv.scores[1] == pytest.approx(0.5)

    def test_range(self, trajectory):
        sv = dft_prob_weights(trajectory)
        assert all(0 < s <= 1 for s in sv.scores)


class TestTransferScores:
    def test_probability_gap(self, tok):
        a = make_backend(tok, 5, "toy-a")
        b = make_backend(tok, 9, "toy-b")
        samples, sols = synth_corpus(3, 1)
        prompt = default_prompt(samples[0])
        sv = transfer_scores(prompt, sols[0], a, b, sample_id=samples[0].id)
        _, _, lpa, _ = a.force_score(prompt, sols[0])
        _, _, lpb, _ = b.force_score(prompt, sols[0])
        expected = [math.exp(x) - math.exp(y) for x, y in zip(lpa, lpb)]
        np.testing.assert_allclose(sv.scores, expected, rtol=1e-12)
        assert all(-1 <= s <= 1 for s in sv.scores)

    def test_identical_backends_zero(self, tok, backend):
        samples, sols = synth_corpus(3, 1)
        prompt = default_prompt(samples[0])
        sv = transfer_scores(prompt, sols[0], backend, backend)
        assert all(s == 0.0 for s in sv.scores)

    def test_antisymmetry(self, tok):
        a = make_backend(tok, 5, "toy-a")
        b = make_backend(tok, 9, "toy-b")
        samples, sols = synth_corpus(4, 1)
        prompt = default_prompt(samples[0])
        ab = transfer_scores(prompt, sols[0], a, b)
        ba = transfer_scores(prompt, sols[0], b, a)
        np.testing.assert_array_equal(np.asarray(ab.scores), -np.asarray(ba.scores))

    def test_tokenization_mismatch_error(self, tok, backend):
        other_vocab = tuple(t for t in tok.vocab)  # same vocab but different ids
        reordered = (other_vocab[0],) + tuple(reversed(other_vocab[1:]))
        tok2 = ToyTokenizer(reordered)
        cfg = ModelConfig(
            vocab_size=tok2.vocab_size, context_len=160, embed_dim=16, n_heads=2,
            n_layers=2, ffn_dim=32, seed=4,
        )
        b2 = ToyBackend(ModelParams.init(cfg), tok2, tag="toy-rev")
        samples, sols = synth_corpus(3, 1)
        with pytest.raises(DataError, match="tokeniz"):
            transfer_scores(default_prompt(samples[0]), sols[0], backend, b2)


class TestNumberMask:
    def test_words_vs_digits(self):
        rows = [
            (TopAlt("add", 30, math.log(0.9)),),
            (TopAlt("3", 4, math.log(0.8)),),
            (TopAlt("and", 31, math.log(0.7)),),
            (TopAlt("4", 5, math.log(0.6)),),
        ]
        traj = fake_trajectory(rows)
        assert number_mask(traj) == (0, 1, 0, 1)

    def test_decimal_token(self):
        rows = [(TopAlt("3.5", 4, math.log(0.8)),)]
        assert number_mask(fake_trajectory(rows)) == (1,)

    def test_no_numbers_all_zero(self):
        rows = [(TopAlt("add", 30, math.log(0.9)),), (TopAlt(";", 17, math.log(0.3)),)]
        assert number_mask(fake_trajectory(rows)) == (0, 0)


class TestMaskToExample:
    def test_all_zero_dropped(self, trajectory):
        sample, _, _ = mock_fixture(0)
        weights = tuple(0.0 for _ in range(trajectory.length))
        assert mask_to_example(sample, trajectory, weights, "number-only", "toy") is None

    def test_policy_string_recorded(self, trajectory):
        sample, _, _ = mock_fixture(0)
        weights = tuple(1.0 if t == 0 else 0.0 for t in range(trajectory.length))
        rec = mask_to_example(sample, trajectory, weights, "entropy@0.15", "toy")
        assert rec is not None
        assert rec.policy == "entropy@0.15"
        assert rec.backend_tag == "toy"
