"""Synthetic two-domain datasets, stratified splits, and subsampling protocols.

Source/target pairs are class-conditional Gaussian mixtures (vector mode) or
rendered 8x8 glyph blobs (image mode); the target domain is a deterministic
transform of the source distribution controlled by a ShiftSpec. All sampling
operations are pure functions of their (arguments, seed) and reproduce
bit-identical outputs.
"""

import sys
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyInputError,
    EmptySubsetError,
    InsufficientDataError,
    TooFewClassesError,
)

SHIFT_FAMILIES = (
    "rotation",
    "translation",
    "scaling",
    "class-conditional-mean-shift",
    "corruption-noise",
)
SAMPLING_STRATEGIES = ("stratified", "random", "split-class")

# Fractions used by the paper-style data-volume grids.
PAPER_FRACTIONS = (0.01, 0.05, 0.10, 0.25, 0.50, 1.00)

DEFAULT_RADIUS = 2.0
DEFAULT_CLASS_STD = 0.45
IMAGE_SIDE = 8


class LabelAudit:
    """Records every label read so tests can assert the unlabeled-target
    firewall: target labels may flow into sampling and evaluation but never
    into a loss computation."""

    def __init__(self):
        self.events = []

    def record(self, domain_id, frame):
        module = frame.f_globals.get("__name__", "?")
        self.events.append((domain_id, module, frame.f_code.co_name))

    def clear(self):
        self.events.clear()

    def readers(self, domain_id):
        return {(m, f) for d, m, f in self.events if d == domain_id}


label_audit = LabelAudit()


class LabeledSet:
    """Feature matrix plus integer labels for one domain.

    ``features`` is (n, d) in vector mode or (n, h, w, c) in image mode,
    always float64 and finite. ``labels`` is accessed through an audited
    property; use it deliberately.
    """

    def __init__(self, features, labels, domain_id):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim not in (2, 4):
            raise ValueError(f"features must be 2-d or 4-d, got {features.ndim}-d")
        if labels.ndim != 1 or len(labels) != len(features):
            raise ValueError("labels must be 1-d and aligned with features")
        if domain_id not in (0, 1):
            raise ValueError("domain_id must be 0 (source) or 1 (target)")
        if len(features) and not np.isfinite(features).all():
            raise ValueError("features contain NaN/Inf")
        if len(labels) and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.features = features
        self._labels = labels
        self.domain_id = domain_id

    @property
    def labels(self):
        label_audit.record(self.domain_id, sys._getframe(1))
        return self._labels

    def __len__(self):
        return len(self.features)

    @property
    def feature_dim(self):
        return int(np.prod(self.features.shape[1:]))

    @property
    def mode(self):
        return "image" if self.features.ndim == 4 else "vector"

    def take(self, indices):
        """Subset by row indices, preserving domain identity."""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.features[indices], self._labels[indices], self.domain_id)

    def class_counts(self):
        return {int(c): int(n) for c, n in zip(*np.unique(self._labels, return_counts=True))}

    def tobytes(self):
        return self.features.tobytes() + self._labels.tobytes()


@dataclass(frozen=True)
class ShiftSpec:
    """Covariate-shift family applied to the target domain.

    magnitude units: degrees for rotation, feature/pixel units for
    translation and mean shifts, a dimensionless factor for scaling, and a
    noise std for corruption. magnitude 0 leaves the domains identically
    distributed for every family.
    """

    family: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.family not in SHIFT_FAMILIES:
            raise ValueError(f"unknown shift family {self.family!r}; known: {SHIFT_FAMILIES}")
        if self.magnitude < 0:
            raise ValueError("shift magnitude must be non-negative")


@dataclass(frozen=True)
class SamplingPlan:
    """How to subsample a target (or source) training set.

    For the split-class strategy the kept overall fraction f maps onto the
    removal percentage x = 100*(1-f) applied to half the classes, so only
    f >= 0.5 is meaningful there.
    """

    strategy: str
    fraction: float
    seed: int | None = None

    def __post_init__(self):
        if self.strategy not in SAMPLING_STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if self.strategy == "split-class" and self.fraction < 0.5:
            raise ValueError("split-class keeps >= 50% overall; fraction must be >= 0.5")

    def apply(self, labeled_set):
        if self.fraction == 1.0:
            return labeled_set
        seed = 0 if self.seed is None else self.seed
        if self.strategy == "stratified":
            return stratified_subsample(labeled_set, self.fraction, seed)
        if self.strategy == "random":
            return random_subsample(labeled_set, self.fraction, seed)
        return split_class_subsample(labeled_set, 100.0 * (1.0 - self.fraction), seed)


class DatasetBundle:
    """Paired source/target domains with train/test splits.

    Both domains share the class vocabulary 0..C-1; target labels are stored
    but reach training code only through sampling and evaluation.
    """

    def __init__(self, source_train, source_test, target_train, target_test, name, num_classes):
        self.source_train = source_train
        self.source_test = source_test
        self.target_train = target_train
        self.target_test = target_test
        self.name = name
        self.num_classes = int(num_classes)
        self.meta = {}
        self._validate()

    def _validate(self):
        for split_name in ("source_train", "source_test", "target_train", "target_test"):
            split = getattr(self, split_name)
            labels = split._labels
            if len(labels) and labels.max() >= self.num_classes:
                raise ValueError(f"{split_name} has labels outside [0, {self.num_classes})")
        for domain in ("source", "target"):
            train = getattr(self, f"{domain}_train").features
            test = getattr(self, f"{domain}_test").features
            if len(train) and len(test):
                rows = {r.tobytes() for r in train.reshape(len(train), -1)}
                overlap = sum(r.tobytes() in rows for r in test.reshape(len(test), -1))
                if overlap:
                    raise ValueError(f"{domain} train/test splits share {overlap} rows")

    def splits(self):
        return {
            "source_train": self.source_train,
            "source_test": self.source_test,
            "target_train": self.target_train,
            "target_test": self.target_test,
        }


def _class_sizes(total, num_classes):
    base = total // num_classes
    rem = total % num_classes
    return [base + (1 if k < rem else 0) for k in range(num_classes)]


def _class_means(num_classes, feature_dim, radius):
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, feature_dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _rotation_matrix(degrees):
    theta = np.deg2rad(degrees)
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def _apply_vector_shift(features, labels, shift):
    out = features.copy()
    if shift.magnitude == 0:
        return out
    if shift.family == "rotation":
        rot = _rotation_matrix(shift.magnitude)
        out[:, :2] = out[:, :2] @ rot.T
    elif shift.family == "translation":
        d = out.shape[1]
        out += shift.magnitude * np.ones(d) / np.sqrt(d)
    elif shift.family == "scaling":
        out *= 1.0 + shift.magnitude
    elif shift.family == "class-conditional-mean-shift":
        for k in np.unique(labels):
            rng_k = np.random.default_rng(np.random.SeedSequence([shift.seed, int(k)]))
            direction = rng_k.standard_normal(out.shape[1])
            direction /= np.linalg.norm(direction)
            out[labels == k] += shift.magnitude * direction
    elif shift.family == "corruption-noise":
        rng = np.random.default_rng(np.random.SeedSequence([shift.seed, 95]))
        out += shift.magnitude * rng.standard_normal(out.shape)
    return out


def _class_stds(num_classes, class_std, std_spread):
    """Per-class spreads: a linear ramp of width std_spread around the base
    std gives every class a distinct dispersion fingerprint, which makes the
    correct class-to-class transport identifiable from marginals alone."""
    if num_classes == 1 or std_spread == 0:
        return np.full(num_classes, class_std)
    ramp = np.linspace(-0.5, 0.5, num_classes)
    return class_std * (1.0 + std_spread * ramp)


def _sample_vector_domain(rng, num_classes, total, feature_dim, radius, class_std, std_spread):
    means = _class_means(num_classes, feature_dim, radius)
    stds = _class_stds(num_classes, class_std, std_spread)
    sizes = _class_sizes(total, num_classes)
    feats, labels = [], []
    for k, size in enumerate(sizes):
        feats.append(means[k] + stds[k] * rng.standard_normal((size, feature_dim)))
        labels.append(np.full(size, k, dtype=np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def _render_blobs(centers, side=IMAGE_SIDE, sigma=1.1, amplitude=1.0):
    """Render one Gaussian bump per row of ``centers`` onto a side x side grid."""
    ys, xs = np.mgrid[0:side, 0:side]
    cy = centers[:, 0][:, None, None]
    cx = centers[:, 1][:, None, None]
    img = amplitude * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))
    return img[..., None]


def _sample_image_domain(rng, num_classes, total, radius_px, jitter, noise, shift=None):
    """Glyph blobs: class k sits on a circle of radius_px around the image
    center; a ShiftSpec moves the analytic blob centers before rendering, so
    the target is an exact transform of the source distribution."""
    center = (IMAGE_SIDE - 1) / 2.0
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    class_pos = np.stack(
        [center + radius_px * np.sin(angles), center + radius_px * np.cos(angles)], axis=1
    )
    sizes = _class_sizes(total, num_classes)
    labels = np.concatenate([np.full(s, k, dtype=np.int64) for k, s in enumerate(sizes)])
    centers = class_pos[labels] + jitter * rng.standard_normal((total, 2))
    extra_noise = 0.0
    if shift is not None and shift.magnitude > 0:
        rel = centers - center
        if shift.family == "rotation":
            rot = _rotation_matrix(shift.magnitude)
            centers = center + rel @ rot.T
        elif shift.family == "translation":
            centers = centers + shift.magnitude / np.sqrt(2.0)
        elif shift.family == "scaling":
            centers = center + rel * (1.0 + shift.magnitude)
        elif shift.family == "class-conditional-mean-shift":
            for k in range(num_classes):
                rng_k = np.random.default_rng(np.random.SeedSequence([shift.seed, int(k)]))
                direction = rng_k.standard_normal(2)
                direction /= np.linalg.norm(direction)
                centers[labels == k] += shift.magnitude * direction
        elif shift.family == "corruption-noise":
            extra_noise = shift.magnitude
    images = _render_blobs(centers)
    images += noise * rng.standard_normal(images.shape)
    if extra_noise:
        noise_rng = np.random.default_rng(np.random.SeedSequence([shift.seed, 95]))
        images += extra_noise * noise_rng.standard_normal(images.shape)
    return images, labels


def make_two_domain_synthetic(
    num_classes,
    samples_per_domain,
    feature_dim,
    shift,
    seed,
    *,
    mode="vector",
    class_std=DEFAULT_CLASS_STD,
    std_spread=0.0,
    radius=DEFAULT_RADIUS,
    train_ratio=0.9,
    name=None,
):
    """Generate a source/target DatasetBundle with controllable covariate shift.

    Both domains draw from the same class-conditional generator (independent
    seeded streams), then the target stream is transformed per ``shift``.
    Per-class counts are identical across domains and regeneration with the
    same arguments is bit-identical.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if samples_per_domain < num_classes:
        raise InsufficientDataError(
            f"samples_per_domain={samples_per_domain} < num_classes={num_classes}"
        )
    if mode == "vector" and feature_dim < 2:
        raise ValueError("vector mode needs feature_dim >= 2")
    ss = np.random.SeedSequence([int(seed), 7001])
    src_rng, tgt_rng, split_rng_s, split_rng_t = [np.random.default_rng(c) for c in ss.spawn(4)]

    if mode == "vector":
        xs, ys = _sample_vector_domain(
            src_rng, num_classes, samples_per_domain, feature_dim, radius, class_std, std_spread
        )
        xt, yt = _sample_vector_domain(
            tgt_rng, num_classes, samples_per_domain, feature_dim, radius, class_std, std_spread
        )
        xt = _apply_vector_shift(xt, yt, shift)
    elif mode == "image":
        radius_px, jitter, noise = 2.2, class_std, 0.05
        xs, ys = _sample_image_domain(src_rng, num_classes, samples_per_domain, radius_px, jitter, noise)
        xt, yt = _sample_image_domain(
            tgt_rng, num_classes, samples_per_domain, radius_px, jitter, noise, shift=shift
        )
    else:
        raise ValueError(f"unknown mode {mode!r}")

    source = LabeledSet(xs, ys, domain_id=0)
    target = LabeledSet(xt, yt, domain_id=1)
    src_train, src_test = make_train_test_split(source, train_ratio, int(split_rng_s.integers(2**31)))
    tgt_train, tgt_test = make_train_test_split(target, train_ratio, int(split_rng_t.integers(2**31)))
    bundle = DatasetBundle(
        src_train,
        src_test,
        tgt_train,
        tgt_test,
        name=name or f"synthetic-{shift.family}-{shift.magnitude:g}",
        num_classes=num_classes,
    )
    bundle.meta = {
        "num_classes": num_classes,
        "samples_per_domain": samples_per_domain,
        "feature_dim": feature_dim,
        "mode": mode,
        "shift_family": shift.family,
        "shift_magnitude": shift.magnitude,
        "shift_seed": shift.seed,
        "seed": seed,
        "class_std": class_std,
        "std_spread": std_spread,
        "radius": radius,
        "train_ratio": train_ratio,
    }
    return bundle


def make_train_test_split(labeled_set, train_ratio, seed):
    """Stratified split: each class sends floor(ratio*n_c) samples to train
    and the rest to test, except singleton classes go entirely to train."""
    if len(labeled_set) == 0:
        raise EmptyInputError("cannot split an empty set")
    if not 0 < train_ratio < 1:
        raise ValueError("train_ratio must be in (0, 1)")
    labels = labeled_set.labels
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    train_idx, test_idx = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        perm = rng.permutation(idx)
        # singleton classes must stay represented in train
        n_train = 1 if len(idx) == 1 else int(np.floor(train_ratio * len(idx)))
        train_idx.extend(perm[:n_train])
        test_idx.extend(perm[n_train:])
    train_idx = np.sort(np.asarray(train_idx, dtype=np.int64))
    test_idx = np.sort(np.asarray(test_idx, dtype=np.int64))
    return labeled_set.take(train_idx), labeled_set.take(test_idx)


def stratified_subsample(labeled_set, fraction, seed):
    """Keep max(1, floor(fraction*n_c)) samples per class, uniformly without
    replacement; preserves the label marginal up to rounding."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    labels = labeled_set.labels
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    kept = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        n_keep = max(1, int(np.floor(fraction * len(idx))))
        kept.extend(rng.choice(idx, size=n_keep, replace=False))
    return labeled_set.take(np.sort(np.asarray(kept, dtype=np.int64)))


def random_subsample(labeled_set, fraction, seed):
    """Keep floor(fraction*n) samples uniformly, ignoring classes."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(labeled_set)
    n_keep = int(np.floor(fraction * n))
    if n_keep == 0:
        raise EmptySubsetError(f"fraction {fraction} of {n} samples keeps nothing")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    kept = np.sort(rng.choice(n, size=n_keep, replace=False))
    return labeled_set.take(kept)


def split_class_subsample(labeled_set, x_percent, seed):
    """Pick floor(C/2) classes at random and remove 2*x% of their samples
    (keeping at least one each); the remaining classes are untouched."""
    if not 0 < x_percent <= 50:
        raise ValueError("x_percent must be in (0, 50]")
    labels = labeled_set.labels
    classes = np.unique(labels)
    if len(classes) < 2:
        raise TooFewClassesError("split-class sampling needs >= 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 19]))
    selected = set(rng.choice(classes, size=len(classes) // 2, replace=False).tolist())
    keep_frac = 1.0 - 2.0 * x_percent / 100.0
    kept = []
    for k in classes:
        idx = np.flatnonzero(labels == k)
        if int(k) in selected:
            n_keep = max(1, int(np.floor(keep_frac * len(idx))))
            kept.extend(rng.choice(idx, size=n_keep, replace=False))
        else:
            kept.extend(idx)
    return labeled_set.take(np.sort(np.asarray(kept, dtype=np.int64)))
