import numpy as np
import pytest

from critmask.core import DataError
from critmask.tinylm import GradReport, ModelConfig, ModelParams, TrainBatch, grad_check


@pytest.fixture
def model():
    cfg = ModelConfig(
        vocab_size=11, context_len=16, embed_dim=8, n_heads=2, n_layers=2, ffn_dim=16, seed=3
    )
    m = ModelParams.init(cfg)
    assert m.num_params() <= 20_000
    return m


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    b, t = 2, 7
    ids = rng.integers(0, 11, size=(b, t))
    gold = rng.integers(0, 11, size=(b, t))
    mask = np.ones((b, t), dtype=bool)
    mask[1, 5:] = False
    weights = rng.random((b, t)) * mask
    return TrainBatch(token_ids=ids, gold=gold, weights=weights, padding_mask=mask)


class TestGradCheck:
    def test_sft_within_tolerance(self, model, batch):
        report = grad_check(model, batch, "sft")
        assert report.max_relative_error <= 1e-5
        assert report.num_checked == model.num_params()

    def test_cft_half_zero_weights(self, model, batch):
        weights = batch.weights.copy()
        weights[0, ::2] = 0.0
        halved = TrainBatch(
            token_ids=batch.token_ids, gold=batch.gold,
            weights=weights, padding_mask=batch.padding_mask,
        )
        report = grad_check(model, halved, "cft")
        assert report.max_relative_error <= 1e-5

    def test_dft_within_tolerance(self, model, batch):
        report = grad_check(model, batch, "dft")
        assert report.max_relative_error <= 1e-5

    def test_report_deterministic(self, model, batch):
        a = grad_check(model, batch, "sft")
        b = grad_check(model, batch, "sft")
        assert a == b

    def test_subsampling_on_large_models(self, batch):
        cfg = ModelConfig(
            vocab_size=11, context_len=192, embed_dim=32, n_heads=2, n_layers=3,
            ffn_dim=128, seed=1,
        )
        big = ModelParams.init(cfg)
        assert big.num_params() > 20_000
        report = grad_check(big, batch, "sft", seed=4)
        assert 500 <= report.num_checked < big.num_params()
        assert report.max_relative_error <= 1e-5

    def test_detects_a_planted_gradient_bug(self, model, batch):
        # corrupting the analytic gradient must blow the relative error up
        from critmask.tinylm import gradcheck as gc

        original = gc.compute_grads

        def corrupted(model_, batch_, objective):
            loss, grads = original(model_, batch_, objective)
            grads["w_out"] = grads["w_out"] * 1.02
            return loss, grads

        gc.compute_grads = corrupted
        try:
            report = grad_check(model, batch, "sft")
        finally:
            gc.compute_grads = original
        assert report.max_relative_error > 1e-3
        assert report.worst_parameter_name == "w_out"

    def test_report_invariant(self):
        with pytest.raises(DataError):
            GradReport(max_relative_error=-1.0, worst_parameter_name="x", num_checked=1)
