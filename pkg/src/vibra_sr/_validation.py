"""Input validation shared by the estimator wrappers."""

import numpy as np
from sklearn.utils.validation import check_array


def check_signal(x, name="signal"):
    """Return a finite 1-D float64 array."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_windows(X, multiple_of=1, name="X"):
    """Return a finite (n_windows, window_len) float64 array.

    1-D input is treated as a single window.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if X.shape[1] % multiple_of:
        raise ValueError(f"{name} windows have {X.shape[1]} samples, "
                         f"which is not a multiple of {multiple_of}")
    return X


def check_paired(X, Y, multiple_of=1):
    X = check_windows(X, multiple_of, "X")
    Y = check_windows(Y, multiple_of, "y")
    if X.shape != Y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {Y.shape}")
    return X, Y


def check_rate_ratio(high, low):
    if low <= 0 or high <= 0:
        raise ValueError("sample rates must be positive")
    if high % low:
        raise ValueError(f"{low} Hz does not divide {high} Hz")
    return high // low
