"""Grid conventions shared by every module.

Images are ``(H, W, C)`` float64 arrays in ``[0, 1]``; label maps are ``(H, W)``
integer arrays; logit and probability maps are ``(H, W, K)``.  Most functions
also accept a leading batch axis.  Background is an ordinary class id
(``K - 1`` by convention), never an ignore index.
"""

from __future__ import annotations

import zlib

import numpy as np


class NumericInputError(ValueError):
    """Raised when an array holds NaN or infinite values."""


class ConfigError(ValueError):
    """Raised on shape mismatches and invalid configuration values."""


def background_class(num_classes: int) -> int:
    return num_classes - 1


def as_image(x, channels: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected an (H, W, C) image, got shape {x.shape}")
    if channels is not None and x.shape[-1] != channels:
        raise ConfigError(f"expected {channels} channels, got {x.shape[-1]}")
    return x


def as_labels(y, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ConfigError(f"label map must be integer, got {y.dtype}")
    y = y.astype(np.int64, copy=False)
    if num_classes is not None and y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"labels outside [0, {num_classes - 1}]")
    return y


def check_finite(a: np.ndarray, what: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericInputError(f"{what} contains non-finite values")
    return a


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted log-softmax over the last axis."""
    u = check_finite(np.asarray(logits, dtype=np.float64), "logits")
    shifted = u - u.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    u = check_finite(np.asarray(logits, dtype=np.float64), "logits")
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index."""
    # np.argmax already returns the first maximal index
    return np.argmax(np.asarray(logits), axis=-1).astype(np.int64)


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for a named purpose under a root seed.

    ``substream(s, "attack", 3)`` never collides with ``substream(s, "init")``,
    so components can be re-seeded without disturbing each other.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf8"))]
    entropy.extend(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    return int(substream(seed, name, *keys).integers(0, 2**31 - 1))
