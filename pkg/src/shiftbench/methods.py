"""Adaptation losses behind a uniform step interface.

Each method consumes one labeled source batch and one unlabeled target batch
and returns a decomposed LossBundle with total = ce_source + w * adaptation.
At w = 0 every method short-circuits to the plain source cross-entropy path,
which is what makes the source-only baseline exactly reproducible from any
method configuration.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import get_augmenters
from .errors import ConfigError, EmptyInputError, UnknownMethodError
from .models import grad_reverse, to_tensor

EPS = 1e-6

METHOD_NAMES = ("source-only", "dann", "cdan", "mcc", "mdd", "adamatch")


@dataclass(frozen=True)
class MethodConfig:
    name: str
    adaptation_weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.adaptation_weight < 0:
            raise ConfigError("adaptation_weight must be >= 0")


@dataclass
class LossBundle:
    total: torch.Tensor
    ce_source: float
    adaptation: float
    diagnostics: dict = field(default_factory=dict)


def _check_batches(src, tgt):
    xs, ys = src
    if len(xs) == 0:
        raise EmptyInputError("empty source batch")
    if tgt is not None and len(tgt) == 0:
        raise EmptyInputError("empty target batch")
    return xs, ys


def _source_ce(assembly, xs, ys):
    logits = assembly.logits(to_tensor(xs))
    return F.cross_entropy(logits, torch.as_tensor(np.asarray(ys), dtype=torch.long)), logits


def _source_ce_from_features(assembly, z_s, ys):
    logits = assembly.classifier(z_s)
    return F.cross_entropy(logits, torch.as_tensor(np.asarray(ys), dtype=torch.long)), logits


def source_only_bundle(assembly, src):
    xs, ys = _check_batches(src, None)
    ce, _ = _source_ce(assembly, xs, ys)
    return LossBundle(total=ce, ce_source=float(ce.detach()), adaptation=0.0)


def _clamped_bce(logits, domains, weights=None):
    """Binary cross-entropy with probabilities clamped to [EPS, 1-EPS].
    Returns (loss, discriminator accuracy)."""
    probs = torch.sigmoid(logits.reshape(-1)).clamp(EPS, 1.0 - EPS)
    terms = -(domains * torch.log(probs) + (1.0 - domains) * torch.log(1.0 - probs))
    if weights is not None:
        terms = terms * weights
    acc = ((probs > 0.5).to(probs.dtype) == domains).double().mean()
    return terms.mean(), float(acc)


def cdan_multilinear(features, probs, cap_k=1024, projection_seed=0):
    """Multilinear conditioning map: explicit flattened outer product when
    d*C fits under cap_k, otherwise seeded random projections
    (R_f f) * (R_g p) / sqrt(k)."""
    features = torch.as_tensor(features, dtype=torch.float64) if not torch.is_tensor(features) else features
    probs = torch.as_tensor(probs, dtype=torch.float64) if not torch.is_tensor(probs) else probs
    d, c = features.shape[1], probs.shape[1]
    if d * c <= cap_k:
        return torch.einsum("ni,nj->nij", features, probs).reshape(len(features), d * c)
    rng = np.random.default_rng(np.random.SeedSequence([int(projection_seed), 31]))
    r_f = torch.from_numpy(rng.standard_normal((d, cap_k)))
    r_g = torch.from_numpy(rng.standard_normal((c, cap_k)))
    return (features @ r_f) * (probs @ r_g) / math.sqrt(cap_k)


def cdan_output_dim(feature_dim, num_classes, cap_k=1024):
    return min(feature_dim * num_classes, cap_k)


def dann_loss(src, tgt, assembly, grl_coeff, weight=1.0):
    """Adversarial domain classification on reversed features of the
    combined batch (source = 0, target = 1)."""
    xs, ys = _check_batches(src, tgt)
    z_s = assembly.features(to_tensor(xs))
    z_t = assembly.features(to_tensor(tgt))
    ce, _ = _source_ce_from_features(assembly, z_s, ys)
    z = torch.cat([z_s, z_t])
    domains = torch.cat([torch.zeros(len(z_s), dtype=torch.float64), torch.ones(len(z_t), dtype=torch.float64)])
    disc_logits = assembly.discriminator(grad_reverse(z, grl_coeff))
    adaptation, disc_acc = _clamped_bce(disc_logits, domains)
    total = ce + weight * adaptation
    return LossBundle(
        total=total,
        ce_source=float(ce.detach()),
        adaptation=float(adaptation.detach()),
        diagnostics={"discriminator_accuracy": disc_acc},
    )


def cdan_loss(src, tgt, assembly, grl_coeff, weight=1.0, cap_k=1024,
              entropy_conditioning=False, projection_seed=0):
    """DANN on the multilinear map of (features, predicted probabilities);
    optional entropy conditioning reweights per-sample BCE terms by
    1 + exp(-H(p)), normalized to mean 1."""
    xs, ys = _check_batches(src, tgt)
    z_s = assembly.features(to_tensor(xs))
    z_t = assembly.features(to_tensor(tgt))
    ce, logits_s = _source_ce_from_features(assembly, z_s, ys)
    logits_t = assembly.classifier(z_t)
    # conditioning probabilities are detached: gradients reach the feature
    # extractor through the feature factor only
    p_s = torch.softmax(logits_s, dim=1).detach()
    p_t = torch.softmax(logits_t, dim=1).detach()
    z = torch.cat([z_s, z_t])
    p = torch.cat([p_s, p_t])
    mapped = cdan_multilinear(grad_reverse(z, grl_coeff), p, cap_k, projection_seed)
    domains = torch.cat([torch.zeros(len(z_s), dtype=torch.float64), torch.ones(len(z_t), dtype=torch.float64)])
    weights = None
    if entropy_conditioning:
        entropy = -(p * torch.log(p.clamp(min=EPS))).sum(dim=1)
        weights = 1.0 + torch.exp(-entropy)
        weights = weights / weights.mean()
    disc_logits = assembly.discriminator(mapped)
    adaptation, disc_acc = _clamped_bce(disc_logits, domains, weights)
    total = ce + weight * adaptation
    return LossBundle(
        total=total,
        ce_source=float(ce.detach()),
        adaptation=float(adaptation.detach()),
        diagnostics={"discriminator_accuracy": disc_acc},
    )


def mcc_loss(target_logits, temperature):
    """Minimum class-confusion over target predictions: the normalized
    off-diagonal mass of the entropy-weighted class-correlation matrix.
    Bounded in [0, (C-1)/C]; zero iff the correlation matrix is diagonal."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    logits = target_logits if torch.is_tensor(target_logits) else torch.as_tensor(target_logits, dtype=torch.float64)
    if len(logits) < 1:
        raise EmptyInputError("mcc_loss needs at least one row")
    if not torch.isfinite(logits).all():
        raise ValueError("mcc_loss received non-finite logits")
    n, c = logits.shape
    probs = torch.softmax(logits / temperature, dim=1)
    entropy = -(probs * torch.log(probs.clamp(min=EPS))).sum(dim=1)
    w = 1.0 + torch.exp(-entropy)
    w = w * n / w.sum()
    corr = probs.t() @ (w.unsqueeze(1) * probs)
    corr = corr / corr.sum(dim=1, keepdim=True).clamp(min=EPS)
    return (corr.sum() - corr.diagonal().sum()) / c


def mdd_loss(src, tgt, assembly, margin, grl_coeff, weight=1.0):
    """Margin disparity: an auxiliary head is pushed (through gradient
    reversal) to agree with the main head on source pseudo-labels and to
    disagree on target ones."""
    if margin <= 0:
        raise ValueError("mdd margin must be > 0")
    if assembly.aux_head is None:
        raise ConfigError("mdd requires an assembly built with an auxiliary head")
    xs, ys = _check_batches(src, tgt)
    z_s = assembly.features(to_tensor(xs))
    z_t = assembly.features(to_tensor(tgt))
    ce, logits_s = _source_ce_from_features(assembly, z_s, ys)
    logits_t = assembly.classifier(z_t)
    h_s = logits_s.detach().argmax(dim=1)
    h_t = logits_t.detach().argmax(dim=1)
    aux_s = assembly.aux_head(grad_reverse(z_s, grl_coeff))
    aux_t = assembly.aux_head(grad_reverse(z_t, grl_coeff))
    source_term = F.cross_entropy(aux_s, h_s)
    p_t = torch.softmax(aux_t, dim=1)
    p_at_pseudo = p_t.gather(1, h_t.unsqueeze(1)).squeeze(1)
    target_term = -torch.log((1.0 - p_at_pseudo).clamp(min=EPS)).mean()
    adaptation = margin * source_term + target_term
    total = ce + weight * adaptation
    return LossBundle(
        total=total,
        ce_source=float(ce.detach()),
        adaptation=float(adaptation.detach()),
        diagnostics={"mdd_source_term": float(source_term.detach()), "mdd_target_term": float(target_term.detach())},
    )


def distribution_align(target_probs, source_marginal, target_marginal):
    """Rescale target probabilities by the ratio of source-label to
    target-prediction marginals, then renormalize rows."""
    ratio = source_marginal / np.clip(target_marginal, EPS, None)
    aligned = target_probs * ratio
    return aligned / np.clip(aligned.sum(axis=1, keepdims=True), EPS, None)


def adamatch_warmup(progress):
    """Target-loss warmup: ramps 0 -> 1 over the first half of training."""
    return 0.5 - 0.5 * math.cos(math.pi * min(1.0, 2.0 * progress))


@dataclass
class AdaMatchState:
    """Running marginals for distribution alignment (EMA, decay 0.9,
    initialized uniform)."""

    num_classes: int
    decay: float = 0.9
    ema_source: np.ndarray = None
    ema_target: np.ndarray = None

    def __post_init__(self):
        uniform = np.full(self.num_classes, 1.0 / self.num_classes)
        if self.ema_source is None:
            self.ema_source = uniform.copy()
        if self.ema_target is None:
            self.ema_target = uniform.copy()


def adamatch_loss(src, tgt, assembly, augmenters, confidence_ratio, warmup, state, rng):
    """Consistency training with a relative confidence threshold: pseudo-label
    weakly-augmented target predictions after distribution alignment, keep
    samples whose aligned confidence clears tau = c * (mean max source
    confidence), train the strong view on them."""
    if not 0 <= confidence_ratio <= 1:
        raise ValueError("confidence_ratio must be in [0, 1]")
    xs, ys = _check_batches(src, tgt)
    weak, strong = augmenters
    ys_arr = np.asarray(ys)
    xs_w, xs_s = weak(xs, rng), strong(xs, rng)
    xt_w, xt_s = weak(tgt, rng), strong(tgt, rng)

    logits_sw = assembly.logits(to_tensor(xs_w))
    logits_ss = assembly.logits(to_tensor(xs_s))
    ys_t = torch.as_tensor(ys_arr, dtype=torch.long)
    ce = 0.5 * (F.cross_entropy(logits_sw, ys_t) + F.cross_entropy(logits_ss, ys_t))

    with torch.no_grad():
        p_tw = torch.softmax(assembly.logits(to_tensor(xt_w)), dim=1).numpy()
        source_conf = torch.softmax(logits_sw, dim=1).max(dim=1).values.mean().item()

    label_marginal = np.bincount(ys_arr, minlength=state.num_classes) / len(ys_arr)
    state.ema_source = state.decay * state.ema_source + (1.0 - state.decay) * label_marginal
    state.ema_target = state.decay * state.ema_target + (1.0 - state.decay) * p_tw.mean(axis=0)

    aligned = distribution_align(p_tw, state.ema_source, state.ema_target)
    tau = confidence_ratio * source_conf
    mask = aligned.max(axis=1) >= tau
    pseudo = aligned.argmax(axis=1)

    if mask.any():
        logits_ts = assembly.logits(to_tensor(xt_s[mask]))
        target_ce = F.cross_entropy(logits_ts, torch.as_tensor(pseudo[mask], dtype=torch.long))
        adaptation = warmup * target_ce
    else:
        adaptation = torch.zeros((), dtype=torch.float64)
    return ce, adaptation, float(mask.mean()), tau


class AdaptationMethod:
    """Base class: per-run mutable state lives on the instance; one instance
    serves one run."""

    name = ""
    needs_aux_head = False
    param_spec = {}

    def __init__(self, config):
        unknown = set(config.params) - set(self.param_spec)
        if unknown:
            raise ConfigError(
                f"unknown method param(s) for {self.name}: {sorted(unknown)}"
            )
        self.weight = config.adaptation_weight
        self.params = {**self.param_spec, **config.params}
        self.rng = np.random.default_rng(0)
        self.mode = "vector"
        self.run_seed = 0

    def reset(self, run_seed, mode):
        self.run_seed = int(run_seed)
        self.mode = mode
        self.rng = np.random.default_rng(np.random.SeedSequence([self.run_seed, 37]))

    def discriminator_dim(self, feature_dim, num_classes):
        return None

    def step_loss(self, assembly, src, tgt, ctx):
        raise NotImplementedError


class SourceOnly(AdaptationMethod):
    name = "source-only"

    def step_loss(self, assembly, src, tgt, ctx):
        return source_only_bundle(assembly, src)


class Dann(AdaptationMethod):
    name = "dann"

    def discriminator_dim(self, feature_dim, num_classes):
        return feature_dim

    def step_loss(self, assembly, src, tgt, ctx):
        if self.weight == 0:
            return source_only_bundle(assembly, src)
        return dann_loss(src, tgt, assembly, ctx.grl_coeff, self.weight)


class Cdan(AdaptationMethod):
    name = "cdan"
    param_spec = {"multilinear_cap": 1024, "entropy_conditioning": False}

    def discriminator_dim(self, feature_dim, num_classes):
        return cdan_output_dim(feature_dim, num_classes, self.params["multilinear_cap"])

    def step_loss(self, assembly, src, tgt, ctx):
        if self.weight == 0:
            return source_only_bundle(assembly, src)
        return cdan_loss(
            src,
            tgt,
            assembly,
            ctx.grl_coeff,
            self.weight,
            cap_k=self.params["multilinear_cap"],
            entropy_conditioning=self.params["entropy_conditioning"],
            projection_seed=self.run_seed,
        )


class Mcc(AdaptationMethod):
    name = "mcc"
    param_spec = {"temperature": 2.5}

    def step_loss(self, assembly, src, tgt, ctx):
        if self.weight == 0:
            return source_only_bundle(assembly, src)
        xs, ys = _check_batches(src, tgt)
        ce, _ = _source_ce(assembly, xs, ys)
        adaptation = mcc_loss(assembly.logits(to_tensor(tgt)), self.params["temperature"])
        total = ce + self.weight * adaptation
        return LossBundle(total=total, ce_source=float(ce.detach()), adaptation=float(adaptation.detach()))


class Mdd(AdaptationMethod):
    name = "mdd"
    needs_aux_head = True
    param_spec = {"margin": 4.0}

    def step_loss(self, assembly, src, tgt, ctx):
        if self.weight == 0:
            return source_only_bundle(assembly, src)
        return mdd_loss(src, tgt, assembly, self.params["margin"], ctx.grl_coeff, self.weight)


class AdaMatch(AdaptationMethod):
    name = "adamatch"
    param_spec = {"confidence_ratio": 0.9}

    def reset(self, run_seed, mode):
        super().reset(run_seed, mode)
        self.state = None

    def step_loss(self, assembly, src, tgt, ctx):
        if self.weight == 0:
            return source_only_bundle(assembly, src)
        if self.state is None:
            self.state = AdaMatchState(num_classes=assembly.num_classes)
        augmenters = get_augmenters(self.mode)
        ce, adaptation, mask_rate, tau = adamatch_loss(
            src,
            tgt,
            assembly,
            augmenters,
            self.params["confidence_ratio"],
            adamatch_warmup(ctx.progress),
            self.state,
            self.rng,
        )
        total = ce + self.weight * adaptation
        return LossBundle(
            total=total,
            ce_source=float(ce.detach()),
            adaptation=float(adaptation.detach()),
            diagnostics={"mask_rate": mask_rate, "threshold": tau},
        )


_REGISTRY = {}


def register_method(cls):
    """Extension point: out-of-scope methods can plug in here."""
    _REGISTRY[cls.name] = cls
    return cls


for _cls in (SourceOnly, Dann, Cdan, Mcc, Mdd, AdaMatch):
    register_method(_cls)


def known_methods():
    return tuple(sorted(_REGISTRY))


def method_param_spec(name):
    if name not in _REGISTRY:
        raise UnknownMethodError(f"unknown method {name!r}; known: {known_methods()}")
    return dict(_REGISTRY[name].param_spec)


def make_method(config):
    cls = _REGISTRY.get(config.name)
    if cls is None:
        raise UnknownMethodError(
            f"unknown method {config.name!r}; known: {known_methods()}"
        )
    return cls(config)
