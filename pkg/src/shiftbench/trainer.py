"""The standardized training loop shared by every adaptation method.

Everything unrelated to the adaptation loss (initialization, batch order,
optimizer, schedules, evaluation cadence) is a pure function of the run
config and seed, never of the method. That is the artifact's core contract:
any method with adaptation_weight = 0 reproduces the source-only run
exactly.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SamplingPlan, ShiftSpec, make_two_domain_synthetic
from .errors import AbortedRunError, ConfigError
from .io import load_dataset
from .methods import MethodConfig, make_method
from .metrics import MetricsRecord, accuracy
from .models import ArchSpec, build_assembly, load_backbone_weights


@dataclass(frozen=True)
class StepContext:
    grl_coeff: float
    progress: float


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    path: str | None = None
    num_classes: int = 5
    samples_per_domain: int = 2000
    feature_dim: int = 2
    mode: str = "vector"
    shift: ShiftSpec = ShiftSpec("rotation", 30.0, 0)
    seed: int = 0
    train_ratio: float = 0.9
    class_std: float = 0.45
    std_spread: float = 0.0
    radius: float = 2.0

    def to_dict(self):
        return {
            "kind": self.kind,
            "path": self.path,
            "num_classes": self.num_classes,
            "samples_per_domain": self.samples_per_domain,
            "feature_dim": self.feature_dim,
            "mode": self.mode,
            "shift": {
                "family": self.shift.family,
                "magnitude": self.shift.magnitude,
                "seed": self.shift.seed,
            },
            "seed": self.seed,
            "train_ratio": self.train_ratio,
            "class_std": self.class_std,
            "std_spread": self.std_spread,
            "radius": self.radius,
        }


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    lr: float = 0.02
    momentum: float = 0.9
    schedule: str = "cosine"
    clip_norm: float | None = 5.0

    def to_dict(self):
        return {
            "kind": self.kind,
            "lr": self.lr,
            "momentum": self.momentum,
            "schedule": self.schedule,
            "clip_norm": self.clip_norm,
        }


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = DatasetSpec()
    method: MethodConfig = MethodConfig("source-only")
    arch: ArchSpec = ArchSpec("mlp", depth=2, width=96, feature_dim=16)
    target_sampling: SamplingPlan | None = None
    source_sampling: SamplingPlan | None = None
    pretrain_checkpoint: str | None = None
    seed: int = 0
    iterations: int = 2000
    batch_size: int = 32
    optimizer: OptimizerSpec = OptimizerSpec()
    val_every: int = 200
    early_stop: bool = False

    def to_dict(self):
        def plan_dict(plan):
            if plan is None:
                return None
            return {"strategy": plan.strategy, "fraction": plan.fraction, "seed": plan.seed}

        return {
            "dataset": self.dataset.to_dict(),
            "method": {
                "name": self.method.name,
                "adaptation_weight": self.method.adaptation_weight,
                "params": dict(self.method.params),
            },
            "arch": {
                "family": self.arch.family,
                "depth": self.arch.depth,
                "width": self.arch.width,
                "feature_dim": self.arch.feature_dim,
            },
            "target_sampling": plan_dict(self.target_sampling),
            "source_sampling": plan_dict(self.source_sampling),
            "pretrain_checkpoint": self.pretrain_checkpoint,
            "seed": self.seed,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer.to_dict(),
            "val_every": self.val_every,
            "early_stop": self.early_stop,
        }


def config_from_dict(doc):
    """Inverse of RunConfig.to_dict for resolved config documents."""
    def plan(entry):
        if entry is None:
            return None
        return SamplingPlan(entry["strategy"], entry["fraction"], entry.get("seed"))

    ds = doc["dataset"]
    return RunConfig(
        dataset=DatasetSpec(
            kind=ds["kind"],
            path=ds.get("path"),
            num_classes=ds["num_classes"],
            samples_per_domain=ds["samples_per_domain"],
            feature_dim=ds["feature_dim"],
            mode=ds["mode"],
            shift=ShiftSpec(ds["shift"]["family"], ds["shift"]["magnitude"], ds["shift"]["seed"]),
            seed=ds["seed"],
            train_ratio=ds["train_ratio"],
            class_std=ds["class_std"],
            std_spread=ds.get("std_spread", 0.0),
            radius=ds["radius"],
        ),
        method=MethodConfig(
            doc["method"]["name"], doc["method"]["adaptation_weight"], dict(doc["method"]["params"])
        ),
        arch=ArchSpec(
            doc["arch"]["family"], doc["arch"]["depth"], doc["arch"]["width"], doc["arch"]["feature_dim"]
        ),
        target_sampling=plan(doc.get("target_sampling")),
        source_sampling=plan(doc.get("source_sampling")),
        pretrain_checkpoint=doc.get("pretrain_checkpoint"),
        seed=doc["seed"],
        iterations=doc["iterations"],
        batch_size=doc["batch_size"],
        optimizer=OptimizerSpec(**doc["optimizer"]),
        val_every=doc["val_every"],
        early_stop=doc["early_stop"],
    )


def config_hash(config):
    doc = config.to_dict() if isinstance(config, RunConfig) else config
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    metrics: MetricsRecord
    log: list
    wall_seconds: float
    manifest: dict
    status: str = "completed"

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "status": self.status,
            "metrics": self.metrics.to_dict(),
            "log": self.log,
            "wall_seconds": self.wall_seconds,
            "manifest": self.manifest,
        }


def grl_lambda_schedule(progress):
    """Standard adversarial ramp 2/(1+exp(-10 p)) - 1, from 0 toward 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def cosine_lr(base_lr, step, total):
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total)))


def evaluate(assembly, split):
    """Accuracy of the assembly on one labeled split (fraction in [0, 1])."""
    return accuracy(assembly, split)


class BatchIterator:
    """Cyclic minibatches over one domain, reshuffled per epoch with derived
    seeds; batches are always full-size even when the set is smaller than
    the batch."""

    def __init__(self, features, labels, batch_size, seed):
        self.features = features
        self.labels = labels
        self.batch_size = batch_size
        self.seed = int(seed)
        self.n = len(features)
        if self.n == 0:
            raise ConfigError("cannot iterate over an empty split")
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self._epoch = 0

    def _extend(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, self._epoch, 43]))
        self._order = np.concatenate([self._order[self._pos:], rng.permutation(self.n)])
        self._pos = 0
        self._epoch += 1

    def next(self):
        while len(self._order) - self._pos < self.batch_size:
            self._extend()
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        batch_labels = self.labels[idx] if self.labels is not None else None
        return self.features[idx], batch_labels


def resolve_dataset(spec):
    if spec.kind == "path":
        return load_dataset(spec.path)
    if spec.kind == "synthetic":
        return make_two_domain_synthetic(
            spec.num_classes,
            spec.samples_per_domain,
            spec.feature_dim,
            spec.shift,
            spec.seed,
            mode=spec.mode,
            class_std=spec.class_std,
            std_spread=spec.std_spread,
            radius=spec.radius,
            train_ratio=spec.train_ratio,
        )
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")


def _derived_seeds(run_seed):
    ss = np.random.SeedSequence([int(run_seed), 47])
    names = ("target_sampling", "source_sampling", "assembly", "source_batches", "target_batches")
    return {name: int(child.generate_state(1)[0]) for name, child in zip(names, ss.spawn(len(names)))}


def _apply_plan(split, plan, derived_seed):
    if plan is None:
        return split
    if plan.seed is None:
        plan = SamplingPlan(plan.strategy, plan.fraction, derived_seed)
    return plan.apply(split)


def _make_optimizer(params, spec):
    if spec.kind == "sgd":
        return torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum)
    if spec.kind == "adam":
        return torch.optim.Adam(params, lr=spec.lr)
    raise ConfigError(f"unknown optimizer kind {spec.kind!r}")


def train_run(config, checkpoint_dir=None):
    """Execute one run: standardized batches, one optimizer step per
    iteration, periodic evaluation on both test splits. Deterministic under
    a fixed seed on a fixed platform."""
    torch.set_num_threads(1)
    start = time.perf_counter()
    if config.iterations < 0:
        raise ConfigError("iterations must be >= 0")
    if config.method.name != "source-only" and config.batch_size < 2:
        raise ConfigError("methods consuming both domains need batch_size >= 2")
    if config.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")

    bundle = resolve_dataset(config.dataset)
    seeds = _derived_seeds(config.seed)
    target_train = _apply_plan(bundle.target_train, config.target_sampling, seeds["target_sampling"])
    source_train = _apply_plan(bundle.source_train, config.source_sampling, seeds["source_sampling"])

    method = make_method(config.method)
    method.reset(config.seed, bundle.source_train.mode)
    disc_dim = method.discriminator_dim(config.arch.feature_dim, bundle.num_classes)
    assembly = build_assembly(
        config.arch,
        bundle.source_train.features.shape[1:],
        bundle.num_classes,
        seed=seeds["assembly"],
        discriminator_dim=disc_dim,
        with_aux_head=method.needs_aux_head,
    )
    if config.pretrain_checkpoint:
        load_backbone_weights(assembly, config.pretrain_checkpoint)

    optimizer = _make_optimizer(list(assembly.parameters()), config.optimizer)
    src_iter = BatchIterator(
        source_train.features, source_train.labels, config.batch_size, seeds["source_batches"]
    )
    tgt_iter = BatchIterator(target_train.features, None, config.batch_size, seeds["target_batches"])

    log = []

    def validate(step, bundle_loss=None):
        entry = {
            "step": step,
            "lambda_s": evaluate(assembly, bundle.source_test),
            "lambda_t": evaluate(assembly, bundle.target_test),
        }
        if bundle_loss is not None:
            entry["total"] = float(bundle_loss.total.detach())
            entry["ce_source"] = bundle_loss.ce_source
            entry["adaptation"] = bundle_loss.adaptation
        log.append(entry)

    if config.iterations == 0:
        validate(0)
    last_bundle = None
    for step in range(config.iterations):
        progress = step / config.iterations
        if config.optimizer.schedule == "cosine":
            lr = cosine_lr(config.optimizer.lr, step, config.iterations)
            for group in optimizer.param_groups:
                group["lr"] = lr
        ctx = StepContext(grl_coeff=grl_lambda_schedule(progress), progress=progress)
        xs, ys = src_iter.next()
        xt, _ = tgt_iter.next()
        bundle_loss = method.step_loss(assembly, (xs, ys), xt, ctx)
        if not torch.isfinite(bundle_loss.total):
            raise AbortedRunError(step)
        optimizer.zero_grad()
        bundle_loss.total.backward()
        if config.optimizer.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(list(assembly.parameters()), config.optimizer.clip_norm)
        optimizer.step()
        last_bundle = bundle_loss
        if (step + 1) % config.val_every == 0 or step + 1 == config.iterations:
            validate(step + 1, last_bundle)

    if config.early_stop:
        best = max(log, key=lambda e: e["lambda_t"])
    else:
        best = log[-1]
    metrics = MetricsRecord.from_accuracies(best["lambda_s"], best["lambda_t"])
    if checkpoint_dir is not None:
        from .models import save_backbone_checkpoint

        save_backbone_checkpoint(assembly, checkpoint_dir, seed=config.seed, step=config.iterations)
    return RunRecord(
        config_hash=config_hash(config),
        seed=config.seed,
        metrics=metrics,
        log=log,
        wall_seconds=time.perf_counter() - start,
        manifest=config.to_dict(),
    )
