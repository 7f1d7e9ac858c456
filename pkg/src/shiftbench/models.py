"""Backbone families, shared heads, and the gradient-reversal primitive.

Four small families (mlp / conv / attention / mixer) mirror the benchmark's
architecture axis; the shipped default presets are sized to comparable
parameter counts. Everything runs in float64 on CPU and is initialized from
a numpy stream so two builds with the same seed are bit-identical.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import UnknownArchitectureError
from .io import load_checkpoint, save_checkpoint

ARCH_FAMILIES = ("mlp", "conv", "attention", "mixer")

DTYPE = torch.float64


@dataclass(frozen=True)
class ArchSpec:
    family: str
    depth: int
    width: int
    feature_dim: int = 16

    def __post_init__(self):
        if self.family not in ARCH_FAMILIES:
            raise UnknownArchitectureError(
                f"unknown architecture family {self.family!r}; known: {ARCH_FAMILIES}"
            )
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")


# Widths tuned per input mode so the four defaults land within a +/-25%
# parameter band of each other (vector band measured at d=2, image at 8x8x1).
DEFAULT_PRESETS = {
    "vector": {
        "mlp": ArchSpec("mlp", depth=2, width=96),
        "conv": ArchSpec("conv", depth=2, width=52),
        "attention": ArchSpec("attention", depth=2, width=24),
        "mixer": ArchSpec("mixer", depth=2, width=32),
    },
    "image": {
        "mlp": ArchSpec("mlp", depth=2, width=64),
        "conv": ArchSpec("conv", depth=2, width=30),
        "attention": ArchSpec("attention", depth=2, width=24),
        "mixer": ArchSpec("mixer", depth=2, width=32),
    },
}


def default_arch(family, mode="vector"):
    presets = DEFAULT_PRESETS.get(mode)
    if presets is None:
        raise ValueError(f"unknown input mode {mode!r}")
    if family not in presets:
        raise UnknownArchitectureError(
            f"unknown architecture family {family!r}; known: {ARCH_FAMILIES}"
        )
    return presets[family]


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coeff * grad_output, None


def grad_reverse(x, coeff=1.0):
    """Identity forward; backward multiplies incoming gradients by -coeff."""
    if coeff < 0:
        raise ValueError("grad_reverse coeff must be >= 0")
    return _GradReverse.apply(x, coeff)


class MlpBackbone(nn.Module):
    def __init__(self, in_dim, width, depth, feature_dim):
        super().__init__()
        layers, d = [], in_dim
        for _ in range(depth):
            layers += [nn.Linear(d, width, dtype=DTYPE), nn.ReLU()]
            d = width
        layers.append(nn.Linear(d, feature_dim, dtype=DTYPE))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.reshape(len(x), -1))


class ConvBackbone(nn.Module):
    """2-d convolutions in image mode; in vector mode the input is treated as
    a one-channel 1-d signal (documented fallback)."""

    def __init__(self, input_shape, width, depth, feature_dim):
        super().__init__()
        self.image_mode = len(input_shape) == 3
        blocks = []
        if self.image_mode:
            h, w, c = input_shape
            ch = c
            for _ in range(depth):
                blocks += [nn.Conv2d(ch, width, 3, padding=1, dtype=DTYPE), nn.ReLU(), nn.MaxPool2d(2)]
                ch = width
                h, w = h // 2, w // 2
            flat = width * h * w
        else:
            (d,) = input_shape
            ch = 1
            for _ in range(depth):
                blocks += [nn.Conv1d(ch, width, 3, padding=1, dtype=DTYPE), nn.ReLU()]
                ch = width
            flat = width * d
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(flat, feature_dim, dtype=DTYPE)

    def forward(self, x):
        if self.image_mode:
            x = x.permute(0, 3, 1, 2)
        else:
            x = x.unsqueeze(1)
        h = self.blocks(x)
        return self.head(h.reshape(len(h), -1))


class _Tokenizer(nn.Module):
    """Lift the input to a (tokens, embed) grid: 2x2 patches for images, a
    learned linear chunking for vectors."""

    def __init__(self, input_shape, embed_dim, num_tokens=4):
        super().__init__()
        self.image_mode = len(input_shape) == 3
        if self.image_mode:
            h, w, c = input_shape
            self.num_tokens = (h // 2) * (w // 2)
            self.proj = nn.Linear(4 * c, embed_dim, dtype=DTYPE)
        else:
            (d,) = input_shape
            self.num_tokens = num_tokens
            self.proj = nn.Linear(d, num_tokens * embed_dim, dtype=DTYPE)
        self.embed_dim = embed_dim
        self.pos = nn.Parameter(torch.zeros(self.num_tokens, embed_dim, dtype=DTYPE))

    def forward(self, x):
        if self.image_mode:
            n, h, w, c = x.shape
            patches = x.reshape(n, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
            tokens = self.proj(patches.reshape(n, self.num_tokens, 4 * c))
        else:
            tokens = self.proj(x).reshape(len(x), self.num_tokens, self.embed_dim)
        return tokens + self.pos


class _AttentionBlock(nn.Module):
    def __init__(self, dim, heads=2, mlp_ratio=2):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(mlp_ratio * dim, dim, dtype=DTYPE),
        )

    def forward(self, x):
        n, t, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.reshape(n, t, self.heads, dh).transpose(1, 2)
        k = k.reshape(n, t, self.heads, dh).transpose(1, 2)
        v = v.reshape(n, t, self.heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(n, t, d)
        x = x + self.proj(y)
        return x + self.mlp(self.ln2(x))


class _MixerBlock(nn.Module):
    def __init__(self, num_tokens, dim, token_hidden=16, channel_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.token_mix = nn.Sequential(
            nn.Linear(num_tokens, token_hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(token_hidden, num_tokens, dtype=DTYPE),
        )
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.channel_mix = nn.Sequential(
            nn.Linear(dim, channel_ratio * dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(channel_ratio * dim, dim, dtype=DTYPE),
        )

    def forward(self, x):
        x = x + self.token_mix(self.ln1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mix(self.ln2(x))


class TokenBackbone(nn.Module):
    def __init__(self, input_shape, kind, width, depth, feature_dim):
        super().__init__()
        self.tokenizer = _Tokenizer(input_shape, width)
        t = self.tokenizer.num_tokens
        if kind == "attention":
            blocks = [_AttentionBlock(width) for _ in range(depth)]
        else:
            blocks = [_MixerBlock(t, width) for _ in range(depth)]
        self.blocks = nn.Sequential(*blocks)
        self.norm = nn.LayerNorm(width, dtype=DTYPE)
        self.head = nn.Linear(width, feature_dim, dtype=DTYPE)

    def forward(self, x):
        tokens = self.blocks(self.tokenizer(x))
        return self.head(self.norm(tokens).mean(dim=1))


def make_classifier(feature_dim, num_classes, hidden=256):
    """2-layer MLP head: feature_dim -> hidden -> class logits."""
    return nn.Sequential(
        nn.Linear(feature_dim, hidden, dtype=DTYPE),
        nn.ReLU(),
        nn.Linear(hidden, num_classes, dtype=DTYPE),
    )


def make_discriminator(in_dim, hidden=256):
    """2-layer MLP emitting a single domain logit."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden, dtype=DTYPE),
        nn.ReLU(),
        nn.Linear(hidden, 1, dtype=DTYPE),
    )


def init_params(module, seed):
    """Fan-in-scaled uniform init for all weight matrices, drawn from a
    dedicated numpy stream; biases zero, norm scales one."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.dim() >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values))
            elif "weight" in name.rsplit(".", 1)[-1]:
                param.fill_(1.0)
            else:
                param.zero_()
    return module


def build_backbone(spec, seed, input_shape):
    """Construct and deterministically initialize one backbone module."""
    if spec.family == "mlp":
        in_dim = int(np.prod(input_shape))
        net = MlpBackbone(in_dim, spec.width, spec.depth, spec.feature_dim)
    elif spec.family == "conv":
        net = ConvBackbone(tuple(input_shape), spec.width, spec.depth, spec.feature_dim)
    elif spec.family in ("attention", "mixer"):
        net = TokenBackbone(tuple(input_shape), spec.family, spec.width, spec.depth, spec.feature_dim)
    else:
        raise UnknownArchitectureError(f"unknown architecture family {spec.family!r}")
    return init_params(net, seed)


def param_count(module):
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelAssembly:
    """One run's model: backbone plus classifier, with optional auxiliary
    head (margin-disparity methods) and domain discriminator."""

    backbone: nn.Module
    classifier: nn.Module
    spec: ArchSpec
    input_shape: tuple
    num_classes: int
    aux_head: nn.Module | None = None
    discriminator: nn.Module | None = None
    param_counts: dict | None = None

    def features(self, x):
        return self.backbone(x)

    def logits(self, x):
        return self.classifier(self.backbone(x))

    def parameters(self):
        for module in (self.backbone, self.classifier, self.aux_head, self.discriminator):
            if module is not None:
                yield from module.parameters()


def build_assembly(
    spec,
    input_shape,
    num_classes,
    seed,
    *,
    discriminator_dim=None,
    with_aux_head=False,
    classifier_hidden=256,
):
    """Assemble backbone + heads. Each component initializes from its own
    derived seed so adding a discriminator or aux head never perturbs the
    backbone or classifier initialization."""
    ss = np.random.SeedSequence([int(seed), 29])
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(4)]
    backbone = build_backbone(spec, seeds[0], input_shape)
    classifier = init_params(
        make_classifier(spec.feature_dim, num_classes, classifier_hidden), seeds[1]
    )
    aux = None
    if with_aux_head:
        aux = init_params(make_classifier(spec.feature_dim, num_classes, classifier_hidden), seeds[2])
    disc = None
    if discriminator_dim is not None:
        disc = init_params(make_discriminator(discriminator_dim), seeds[3])
    counts = {
        "backbone": param_count(backbone),
        "classifier": param_count(classifier),
        "aux_head": param_count(aux) if aux else 0,
        "discriminator": param_count(disc) if disc else 0,
    }
    counts["total"] = sum(counts.values())
    return ModelAssembly(
        backbone=backbone,
        classifier=classifier,
        spec=spec,
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        aux_head=aux,
        discriminator=disc,
        param_counts=counts,
    )


def to_tensor(features):
    array = np.ascontiguousarray(features, dtype=np.float64)
    return torch.from_numpy(array)


def predict(assembly, batch):
    """Class-probability rows for a feature batch; deterministic in eval."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != assembly.input_shape:
        raise ValueError(
            f"batch shape {batch.shape[1:]} does not match model input {assembly.input_shape}"
        )
    with torch.no_grad():
        logits = assembly.logits(to_tensor(batch))
        probs = torch.softmax(logits, dim=1)
    return probs.numpy()


def backbone_arrays(assembly):
    return [(name, p.detach().numpy().copy()) for name, p in assembly.backbone.named_parameters()]


def save_backbone_checkpoint(assembly, directory, seed, step, extra=None):
    manifest = {
        "family": assembly.spec.family,
        "depth": assembly.spec.depth,
        "width": assembly.spec.width,
        "feature_dim": assembly.spec.feature_dim,
        "input_shape": "x".join(str(s) for s in assembly.input_shape),
        "seed": seed,
        "step": step,
    }
    if extra:
        manifest.update(extra)
    return save_checkpoint(backbone_arrays(assembly), manifest, directory)


def load_backbone_module(directory):
    """Rebuild a standalone backbone from a checkpoint directory."""
    arrays, manifest = load_checkpoint(directory)
    spec = ArchSpec(
        manifest["family"],
        int(manifest["depth"]),
        int(manifest["width"]),
        int(manifest["feature_dim"]),
    )
    input_shape = tuple(int(s) for s in manifest["input_shape"].split("x"))
    backbone = build_backbone(spec, 0, input_shape)
    params = dict(backbone.named_parameters())
    with torch.no_grad():
        for name, array in arrays:
            params[name].copy_(torch.from_numpy(np.ascontiguousarray(array)))
    return backbone, manifest


def load_backbone_weights(assembly, directory):
    """Replace backbone parameters from a checkpoint; heads are untouched."""
    arrays, manifest = load_checkpoint(directory)
    spec = assembly.spec
    want = {
        "family": spec.family,
        "depth": str(spec.depth),
        "width": str(spec.width),
        "feature_dim": str(spec.feature_dim),
        "input_shape": "x".join(str(s) for s in assembly.input_shape),
    }
    for key, expected in want.items():
        if str(manifest.get(key)) != str(expected):
            raise ValueError(
                f"checkpoint {key}={manifest.get(key)!r} does not match run {key}={expected!r}"
            )
    params = dict(assembly.backbone.named_parameters())
    if set(params) != {name for name, _ in arrays}:
        raise ValueError("checkpoint parameter names do not match backbone")
    with torch.no_grad():
        for name, array in arrays:
            params[name].copy_(torch.from_numpy(np.ascontiguousarray(array)))
    return manifest
