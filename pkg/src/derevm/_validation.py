"""Small input-validation helpers shared by the estimators and the bench."""
from __future__ import annotations

import numbers

import numpy as np


def as_generator(seed=None) -> np.random.Generator:
    """Return a ``numpy.random.Generator`` for ``seed``.

    Accepts ``None``, an int, a ``SeedSequence`` or an existing generator
    (returned unchanged).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (np.random.SeedSequence, numbers.Integral)) or seed is None:
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a random generator from {type(seed).__name__}")


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``.

    Used to give every (trial, purpose) pair its own stream, so results do
    not depend on evaluation order or worker count.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def check_complex_array(x, ndim: int | None = None, name: str = "array") -> np.ndarray:
    """Convert to a finite complex array, optionally checking its rank."""
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.number):
        raise TypeError(f"{name} must be numeric")
    a = a.astype(complex, copy=False)
    if ndim is not None and a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def check_positive(value, name: str, strict: bool = True) -> float:
    v = float(value)
    if not np.isfinite(v) or (v <= 0 if strict else v < 0):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value}")
    return v


def check_probability(value, name: str, open_interval: bool = True) -> float:
    v = float(value)
    ok = 0 < v < 1 if open_interval else 0 <= v <= 1
    if not ok:
        raise ValueError(f"{name} must lie in {'(0, 1)' if open_interval else '[0, 1]'}, got {value}")
    return v
