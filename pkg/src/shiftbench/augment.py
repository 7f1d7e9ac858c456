"""Stochastic augmentations for consistency training and contrastive views.

Vector mode: Gaussian jitter scaled by per-dimension feature std plus random
coordinate dropout. Image mode: horizontal flips, small translations, pixel
noise. Weak views are identity (vector) or flip-only (image); strong views
stack the full set.
"""

import numpy as np

from .errors import ConfigError

JITTER_SCALE = 0.1
DROPOUT_P = 0.2


def _feature_std(x):
    flat = x.reshape(len(x), -1)
    std = flat.std(axis=0)
    return np.where(std > 0, std, 1.0)


def weak_vector(x, rng):
    return x


def strong_vector(x, rng):
    std = _feature_std(x)
    out = x + JITTER_SCALE * std * rng.standard_normal(x.shape)
    mask = rng.random(x.shape) >= DROPOUT_P
    return out * mask


def weak_image(x, rng):
    flip = rng.random(len(x)) < 0.5
    out = x.copy()
    out[flip] = out[flip][:, :, ::-1, :]
    return out


def strong_image(x, rng):
    out = weak_image(x, rng)
    shifts = rng.integers(-1, 2, size=(len(out), 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = np.roll(out[i], (int(dy), int(dx)), axis=(0, 1))
    return out + 0.1 * rng.standard_normal(out.shape)


_AUGMENTERS = {
    "vector": (weak_vector, strong_vector),
    "image": (weak_image, strong_image),
}


def get_augmenters(mode):
    """(weak, strong) pair for a data mode; each maps (batch, rng) -> batch."""
    pair = _AUGMENTERS.get(mode)
    if pair is None:
        raise ConfigError(f"no augmenters registered for data mode {mode!r}")
    return pair


def contrastive_view(x, rng, mode):
    """One stochastic view for contrastive pretraining (the strong family)."""
    _, strong = get_augmenters(mode)
    return strong(x, rng)
