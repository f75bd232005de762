"""Omni-modal alignment recipe on a synthetic benchmark.

Library layout: numerics (linear-algebra kernel), calibration
(modality-aware temperatures), negatives (similarity matrix, curriculum
mask, debiased loss), geometry (whitening, covariance alignment,
diagnostics), synth (world, dataset, encoder), trainer (loop, Adam,
gradient checks), evalkit (retrieval metrics), config and cli (run
plumbing).
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    calibration,
    config,
    errors,
    evalkit,
    geometry,
    negatives,
    numerics,
    synth,
    trainer,
)
