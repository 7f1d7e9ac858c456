"""Fixed-budget pretext subsets and supervised/contrastive pretraining.

Pretext subsets exclude classes shared with the downstream task, then give
every retained class an equal quota so differently-sourced pretexts stay
size-matched. Supervised pretraining fits a temporary head with
cross-entropy; contrastive pretraining optimizes a symmetric
normalized-temperature loss over two stochastic views and never touches
labels.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import contrastive_view
from .errors import EmptyPretextError, TooSmallBatchError
from .io import save_checkpoint
from .models import build_assembly, to_tensor
from .trainer import DatasetSpec, cosine_lr, resolve_dataset

PRETEXT_MODES = ("supervised", "contrastive")


@dataclass(frozen=True)
class PretextSpec:
    dataset: DatasetSpec
    budget: int = 500
    exclude_classes: tuple = ()
    mode: str = "supervised"
    epochs: int = 5
    seed: int = 0
    batch_size: int = 32
    lr: float = 0.05
    temperature: float = 0.5

    def __post_init__(self):
        if self.mode not in PRETEXT_MODES:
            raise ValueError(f"unknown pretext mode {self.mode!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    def to_dict(self):
        return {
            "dataset": self.dataset.to_dict(),
            "budget": self.budget,
            "exclude_classes": list(self.exclude_classes),
            "mode": self.mode,
            "epochs": self.epochs,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "temperature": self.temperature,
        }


def build_pretext_subset(labeled_set, budget, exclude_classes, seed):
    """Drop excluded classes, then keep an equal per-class quota
    floor(budget / C_kept), capped by availability."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    labels = labeled_set.labels
    classes = [int(c) for c in np.unique(labels) if int(c) not in set(exclude_classes)]
    if not classes:
        raise EmptyPretextError("every pretext class was excluded")
    quota = budget // len(classes)
    if quota < 1:
        raise ValueError(f"budget {budget} below one sample per retained class ({len(classes)})")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 53]))
    kept = []
    for k in classes:
        idx = np.flatnonzero(labels == k)
        kept.extend(rng.choice(idx, size=min(quota, len(idx)), replace=False))
    return labeled_set.take(np.sort(np.asarray(kept, dtype=np.int64)))


@dataclass
class PretrainResult:
    arrays: list
    manifest: dict
    history: list = field(default_factory=list)

    def save(self, directory):
        return save_checkpoint(self.arrays, self.manifest, directory)


def _pretext_seeds(seed):
    ss = np.random.SeedSequence([int(seed), 59])
    names = ("assembly", "batches", "views")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, ss.spawn(len(names)))}


def _base_manifest(spec, arch, subset, input_shape):
    return {
        "family": arch.family,
        "depth": arch.depth,
        "width": arch.width,
        "feature_dim": arch.feature_dim,
        "input_shape": "x".join(str(s) for s in input_shape),
        "seed": spec.seed,
        "step": 0,
        "mode": spec.mode,
        "budget": spec.budget,
        "exclusions": ",".join(str(c) for c in spec.exclude_classes) or "none",
        "actual_size": len(subset),
        "epochs": spec.epochs,
    }


def _epoch_batches(n, batch_size, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), epoch, 61]))
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def resolve_pretext_subset(spec):
    bundle = resolve_dataset(spec.dataset)
    return build_pretext_subset(bundle.source_train, spec.budget, spec.exclude_classes, spec.seed)


def supervised_pretrain(spec, arch):
    """Cross-entropy pretraining of backbone + temporary head on the pretext
    subset; returns backbone-only weights. Zero epochs returns the
    initialization unchanged."""
    torch.set_num_threads(1)
    if spec.mode != "supervised":
        raise ValueError("spec.mode must be 'supervised'")
    subset = resolve_pretext_subset(spec)
    if len(subset) == 0:
        raise EmptyPretextError("pretext subset is empty")
    seeds = _pretext_seeds(spec.seed)
    labels = subset.labels
    classes = np.unique(labels)
    remap = {int(c): i for i, c in enumerate(classes)}
    dense = np.asarray([remap[int(c)] for c in labels], dtype=np.int64)
    input_shape = subset.features.shape[1:]
    assembly = build_assembly(arch, input_shape, len(classes), seed=seeds["assembly"])
    optimizer = torch.optim.SGD(assembly.parameters(), lr=spec.lr, momentum=0.9)
    batch = min(spec.batch_size, len(subset))
    total_steps = max(1, spec.epochs * max(1, len(subset) // batch))
    history, step = [], 0
    for epoch in range(spec.epochs):
        epoch_losses = []
        for idx in _epoch_batches(len(subset), batch, seeds["batches"], epoch):
            for group in optimizer.param_groups:
                group["lr"] = cosine_lr(spec.lr, step, total_steps)
            logits = assembly.logits(to_tensor(subset.features[idx]))
            loss = F.cross_entropy(logits, torch.as_tensor(dense[idx]))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))
            step += 1
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    manifest = _base_manifest(spec, arch, subset, input_shape)
    manifest["step"] = step
    arrays = [(n, p.detach().numpy().copy()) for n, p in assembly.backbone.named_parameters()]
    return PretrainResult(arrays=arrays, manifest=manifest, history=history)


def contrastive_loss(z_a, z_b, temperature):
    """Symmetric NT-Xent over 2n L2-normalized views; positives are the two
    views of the same sample, negatives all other views in the batch."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    n = len(z_a)
    z = torch.cat([z_a, z_b])
    z = z / z.norm(dim=1, keepdim=True).clamp(min=1e-12)
    sim = z @ z.t() / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def contrastive_pretrain(spec, arch, temperature=None):
    """Label-free pretraining: two augmented views per sample, symmetric
    contrastive objective over the batch; returns backbone-only weights."""
    torch.set_num_threads(1)
    if spec.mode != "contrastive":
        raise ValueError("spec.mode must be 'contrastive'")
    temperature = spec.temperature if temperature is None else temperature
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    subset = resolve_pretext_subset(spec)
    batch = min(spec.batch_size, len(subset))
    if batch < 4:
        raise TooSmallBatchError(
            f"contrastive batches need >= 4 samples, got {batch}"
        )
    seeds = _pretext_seeds(spec.seed)
    mode = subset.mode
    features = subset.features
    input_shape = features.shape[1:]
    assembly = build_assembly(arch, input_shape, 2, seed=seeds["assembly"])
    optimizer = torch.optim.SGD(assembly.parameters(), lr=spec.lr, momentum=0.9)
    view_rng = np.random.default_rng(np.random.SeedSequence([seeds["views"], 67]))
    total_steps = max(1, spec.epochs * max(1, len(subset) // batch))
    history, step = [], 0
    for epoch in range(spec.epochs):
        epoch_losses = []
        for idx in _epoch_batches(len(subset), batch, seeds["batches"], epoch):
            for group in optimizer.param_groups:
                group["lr"] = cosine_lr(spec.lr, step, total_steps)
            x = features[idx]
            view_a = contrastive_view(x, view_rng, mode)
            view_b = contrastive_view(x, view_rng, mode)
            z_a = assembly.features(to_tensor(view_a))
            z_b = assembly.features(to_tensor(view_b))
            loss = contrastive_loss(z_a, z_b, temperature)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))
            step += 1
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
    manifest = _base_manifest(spec, arch, subset, input_shape)
    manifest["step"] = step
    manifest["temperature"] = temperature
    arrays = [(n, p.detach().numpy().copy()) for n, p in assembly.backbone.named_parameters()]
    return PretrainResult(arrays=arrays, manifest=manifest, history=history)
