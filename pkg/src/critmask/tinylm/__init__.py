"""Tiny deterministic language model: architecture, objectives, training, checks."""

try:  # the model's matrices are tiny; multithreaded BLAS only adds contention
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover
    pass

from .gradcheck import GradReport, grad_check
from .losses import (
    cft_grad_wrt_logits,
    cft_loss,
    dft_grad_wrt_logits,
    dft_loss,
    log_softmax,
    per_token_ce,
    position_entropy,
    sft_grad_wrt_logits,
    sft_loss,
    softmax_row,
    token_ce_grad,
)
from .model import (
    DecodeSession,
    ModelConfig,
    ModelParams,
    attention_received,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .synth import chain_values, synth_corpus
from .tokenizer import EOS, ToyTokenizer, default_vocab
from .train import (
    AdamConfig,
    AdamState,
    SequenceExample,
    TrainBatch,
    build_batch,
    compute_grads,
    lr_at,
    train,
    train_step,
)

__all__ = [
    "AdamConfig",
    "AdamState",
    "DecodeSession",
    "EOS",
    "GradReport",
    "ModelConfig",
    "ModelParams",
    "SequenceExample",
    "ToyTokenizer",
    "TrainBatch",
    "attention_received",
    "backward",
    "build_batch",
    "cft_grad_wrt_logits",
    "cft_loss",
    "chain_values",
    "compute_grads",
    "default_vocab",
    "dft_grad_wrt_logits",
    "dft_loss",
    "forward",
    "grad_check",
    "load_checkpoint",
    "log_softmax",
    "lr_at",
    "per_token_ce",
    "position_entropy",
    "save_checkpoint",
    "sft_grad_wrt_logits",
    "sft_loss",
    "softmax_row",
    "synth_corpus",
    "token_ce_grad",
    "train",
    "train_step",
]
