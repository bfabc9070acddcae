"""Input validation helpers shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import ShapeError


def check_frames(X, allow_empty=True) -> np.ndarray:
    """2-D finite float64 frame matrix (``FeatureSequence`` accepted)."""
    if hasattr(X, "frames"):
        X = X.frames
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D frame matrix, got shape {X.shape}")
    if X.shape[0] == 0:
        if allow_empty:
            return X
        raise ShapeError("frame matrix is empty")
    return check_array(X, dtype=np.float64, ensure_min_features=1)


def check_frame_list(X, n_features=None) -> list:
    """List of frame matrices with a common width."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    out = [check_frames(x, allow_empty=False) for x in X]
    if not out:
        raise ShapeError("no sequences given")
    widths = {x.shape[1] for x in out}
    if len(widths) != 1:
        raise ShapeError(f"sequences disagree on feature width: {sorted(widths)}")
    if n_features is not None and widths != {n_features}:
        raise ShapeError(f"expected {n_features} features per frame, got {widths.pop()}")
    return out


def check_label_list(y, lengths, n_classes=None) -> list:
    out = [np.asarray(l, dtype=np.int64).ravel() for l in y]
    if len(out) != len(lengths):
        raise ShapeError(f"{len(out)} label sequences for {len(lengths)} feature sequences")
    for i, (lab, n) in enumerate(zip(out, lengths)):
        if lab.shape[0] != n:
            raise ShapeError(f"sequence {i}: {lab.shape[0]} labels for {n} frames")
        if n_classes is not None and lab.size and (lab.min() < 0 or lab.max() >= n_classes):
            raise ShapeError(f"sequence {i}: labels outside [0, {n_classes})")
    return out
