"""Input checks shared by the estimator front end."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, image_shape=None, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float array of shape [n, C, H, W]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape [n, C, H, W], got {X.shape}")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise ValueError(f"{name} has image shape {tuple(X.shape[1:])}, expected {tuple(image_shape)}")
    return X


def check_features(X, n_features=None, name: str = "X") -> np.ndarray:
    X = check_array(X, dtype=np.float64, input_name=name)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_labels(y, n: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"{name} must be a 1-d array of length {n}, got shape {y.shape}")
    return y


def check_alpha(alpha: float) -> float:
    if not 0.0 < float(alpha) < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return float(alpha)
