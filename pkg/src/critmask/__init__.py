"""critmask: counterfactual critical-token annotation and selective fine-tuning, desk scale."""

__version__ = "0.1.0"

from .core import (
    BackendError,
    CapabilityError,
    Choice,
    DataError,
    MaskedExample,
    RunConfig,
    Sample,
    load_samples,
    read_masked_dataset,
    write_masked_dataset,
    write_samples,
)
from .verifier import Answer, extract_final_answer, numeric_equivalent, verify

__all__ = [
    "Answer",
    "BackendError",
    "CapabilityError",
    "Choice",
    "DataError",
    "MaskedExample",
    "RunConfig",
    "Sample",
    "extract_final_answer",
    "load_samples",
    "numeric_equivalent",
    "read_masked_dataset",
    "verify",
    "write_masked_dataset",
    "write_samples",
    "__version__",
]
