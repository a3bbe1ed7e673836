"""Input validation helpers shared by the estimators and stage functions."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

try:  # pragma: no cover - always available in the supported env
    from sklearn.exceptions import NotFittedError
except ImportError:  # pragma: no cover
    class NotFittedError(ValueError, AttributeError):
        pass


def check_array(X, *, ndim: int = 2, dtype=np.float64, name: str = "X",
                allow_empty: bool = False) -> np.ndarray:
    """Coerce to a contiguous float array and reject NaN/inf.

    Parameters
    ----------
    X : array-like
    ndim : expected number of dimensions (1 or 2)
    name : label used in error messages
    allow_empty : permit a zero-length first axis
    """
    arr = np.ascontiguousarray(X, dtype=dtype)
    if arr.ndim != ndim:
        if ndim == 2 and arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        else:
            raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or inf")
    return arr


def check_fitted(estimator, attributes: Sequence[str]) -> None:
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; "
            f"call 'fit' before using this method (missing {missing})."
        )


def check_random_state(seed) -> np.random.Generator:
    """Accept None, an int seed, or an existing Generator."""
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    iv = int(value)
    if iv != value or iv < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return iv


def check_fraction(value, name: str, *, closed: bool = True) -> float:
    fv = float(value)
    ok = (0.0 <= fv <= 1.0) if closed else (0.0 < fv < 1.0)
    if not ok:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return fv


def check_bbox(bbox, name: str = "bbox") -> tuple[float, float, float, float]:
    vals = tuple(float(v) for v in bbox)
    if len(vals) != 4:
        raise ValueError(f"{name} must have 4 entries (x, y, w, h)")
    if vals[2] < 0 or vals[3] < 0:
        raise ValueError(f"{name} has negative width/height: {vals}")
    if not all(np.isfinite(vals)):
        raise ValueError(f"{name} contains NaN or inf")
    return vals


def check_monotone_frames(frames: Sequence[int], name: str = "frames") -> None:
    arr = np.asarray(frames)
    if arr.size > 1 and np.any(np.diff(arr) < 0):
        raise ValueError(f"{name} are not in non-decreasing order")
