#  Bayesian bootstrap of the mean symbol error rate over a test set.

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from cryptogram.cipher import cipher_rng


DEFAULT_BOOTSTRAP_SAMPLES = 50


@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    std: float
    samples: np.ndarray

    def __str__(self):
        return f"{self.mean:.4f} +- {self.std:.4f}"


def dirichlet_weights(n_samples: int, n: int, rng: np.random.Generator) -> np.ndarray:
    # normalized unit exponentials are Dirichlet(1, ..., 1) distributed
    weights = rng.standard_exponential((n_samples, n))
    return weights / weights.sum(axis=1, keepdims=True)


def bootstrap_ser(
    per_sequence_sers: Sequence[float],
    n_samples=DEFAULT_BOOTSTRAP_SAMPLES,
    rng: Optional[np.random.Generator] = None,
) -> BootstrapResult:
    """
    Bayesian bootstrap: each sample reweights the sequence-level SERs with
    Dirichlet(1) weights. Returns the mean and standard deviation of the
    weighted means across samples.
    """
    values = np.asarray(per_sequence_sers, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("bootstrap_ser: need a non-empty list of SERs")
    if n_samples < 1:
        raise ValueError(f"bootstrap_ser: n_samples must be positive, got {n_samples}")
    if rng is None:
        rng = cipher_rng(0)
    samples = dirichlet_weights(n_samples, values.size, rng) @ values
    return BootstrapResult(float(samples.mean()), float(samples.std()), samples)
