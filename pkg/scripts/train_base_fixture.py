"""Train and commit the converged base/annotator model used by tests and demos.

The checkpoint lands in tests/fixtures/base_model.npz. Tests load it instead
of retraining (kept under version control; ~260 KB). Rerun this script to
regenerate it from scratch; it is deterministic.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from critmask.core import default_prompt
from critmask.generator import ToyBackend, greedy_decode
from critmask.tinylm import (
    AdamConfig,
    ModelConfig,
    ModelParams,
    SequenceExample,
    ToyTokenizer,
    save_checkpoint,
    synth_corpus,
    train,
)
from critmask.verifier import verify

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "base_model.npz"

BASE_CORPUS_SEED = 11
BASE_CORPUS_SIZE = 1600
BASE_MIN_STEPS = 2
BASE_MAX_STEPS = 6
ARCH = dict(embed_dim=32, n_heads=4, n_layers=2, ffn_dim=96)
CONTEXT_LEN = 256
TRAIN_STEPS = 6000
LR = 2e-3


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output", type=Path, default=DEFAULT_OUT)
    parser.add_argument("--steps", type=int, default=TRAIN_STEPS)
    args = parser.parse_args()

    tok = ToyTokenizer()
    corpus, sols = synth_corpus(
        BASE_CORPUS_SEED, BASE_CORPUS_SIZE, min_steps=BASE_MIN_STEPS, max_steps=BASE_MAX_STEPS
    )
    examples = [
        SequenceExample(
            tuple(tok.encode(default_prompt(s))),
            tuple(tok.encode(sol)),
            tuple(1.0 for _ in tok.encode(sol)),
        )
        for s, sol in zip(corpus, sols)
    ]
    cfg = ModelConfig(
        vocab_size=tok.vocab_size, context_len=CONTEXT_LEN, seed=1, **ARCH
    )
    model = ModelParams.init(cfg)
    t0 = time.perf_counter()
    curve = train(
        model, examples, "sft", steps=args.steps, batch_size=16,
        pad_id=tok.eos_id, eos_id=tok.eos_id, seed=0,
        adam=AdamConfig(lr=LR, total_steps=args.steps),
    )
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f}s, "
          f"loss tail {np.mean(curve[-100:]):.4f}")

    backend = ToyBackend(model, tok, tag="toy-base")
    fresh, _ = synth_corpus(77, 120, id_prefix="fresh")
    known = {s.question for s in corpus}
    fresh = [s for s in fresh if s.question not in known][:100]
    correct = sum(
        verify(greedy_decode(backend, default_prompt(s), 160, sample_id=s.id).text, s)
        for s in fresh
    )
    print(f"fresh-question greedy accuracy: {correct}/{len(fresh)}")

    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, tok.vocab, args.output)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
