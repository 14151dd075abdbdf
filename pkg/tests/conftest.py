import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the _mock helper module

FIXTURE_DIR = Path(__file__).parent / "fixtures"
BASE_MODEL = FIXTURE_DIR / "base_model.npz"


@pytest.fixture(scope="session")
def base_bundle():
    """The committed converged base/annotator model (trained offline).

    Returns (model, tokenizer, backend). Regenerate the checkpoint with
    scripts/train_base_fixture.py if it is missing.
    """
    from critmask.generator import ToyBackend
    from critmask.tinylm import ToyTokenizer, load_checkpoint

    if not BASE_MODEL.exists():
        pytest.fail(
            f"missing {BASE_MODEL}; run scripts/train_base_fixture.py to regenerate it"
        )
    model, vocab = load_checkpoint(BASE_MODEL)
    tok = ToyTokenizer(vocab)
    return model, tok, ToyBackend(model, tok, tag="toy-base", store_topk=6)
