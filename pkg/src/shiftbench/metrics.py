"""Robustness metrics and the domain-discrimination saturation probe."""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyInputError, EmptySubsetError
from .models import init_params, make_discriminator, predict


def relative_drop(lambda_s, lambda_t):
    """Relative and absolute source-to-target accuracy drop.

    sigma_st = 100 * (lambda_s - lambda_t) / lambda_s; both inputs must share
    a scale (fractions or percents). Lower is better for both outputs.
    """
    if lambda_s <= 0:
        raise ValueError("relative drop is undefined for lambda_s <= 0")
    return 100.0 * (lambda_s - lambda_t) / lambda_s, lambda_s - lambda_t


@dataclass(frozen=True)
class MetricsRecord:
    """Accuracies in percent; sigma_st is None when lambda_s is 0."""

    lambda_s: float
    lambda_t: float
    sigma_st: float | None
    abs_drop: float

    @classmethod
    def from_accuracies(cls, source_acc, target_acc):
        lam_s, lam_t = 100.0 * source_acc, 100.0 * target_acc
        if lam_s > 0:
            sigma, abs_drop = relative_drop(lam_s, lam_t)
        else:
            sigma, abs_drop = None, lam_s - lam_t
        return cls(lambda_s=lam_s, lambda_t=lam_t, sigma_st=sigma, abs_drop=abs_drop)

    def to_dict(self):
        return {
            "lambda_s": self.lambda_s,
            "lambda_t": self.lambda_t,
            "sigma_st": self.sigma_st,
            "abs_drop": self.abs_drop,
        }


def accuracy(assembly, split):
    """Fraction of argmax predictions matching labels (ties break toward the
    lowest class index)."""
    if len(split) == 0:
        raise EmptyInputError("cannot evaluate an empty split")
    probs = predict(assembly, split.features)
    return float((probs.argmax(axis=1) == split.labels).mean())


@dataclass
class ProbeCurve:
    fractions: list
    discriminator_accuracy: list
    seed: int
    config_hash: str

    def __post_init__(self):
        if len(self.fractions) != len(self.discriminator_accuracy):
            raise ValueError("fractions and accuracies must align")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ValueError("fractions must be strictly increasing")

    def to_csv(self, path):
        lines = ["fraction,accuracy,seed"]
        for f, a in zip(self.fractions, self.discriminator_accuracy):
            lines.append(f"{f:.10g},{a:.10g},{self.seed}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            rows = [line.strip().split(",") for line in fh if line.strip()]
        if rows and rows[0][0] == "fraction":
            rows = rows[1:]
        fractions = [float(r[0]) for r in rows]
        accs = [float(r[1]) for r in rows]
        seed = int(rows[0][2]) if rows else 0
        return cls(fractions, accs, seed, config_hash="")


def _train_domain_classifier(x_train, y_train, x_test, y_test, seed, steps=300, lr=0.01):
    net = init_params(make_discriminator(x_train.shape[1]), seed)
    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        logits = net(xt).reshape(-1)
        loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, yt)
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (torch.sigmoid(net(torch.from_numpy(x_test)).reshape(-1)) > 0.5).numpy()
    return float((pred == y_test.astype(bool)).mean())


def domain_probe(source_features, target_features, fractions, seed, *, steps=300):
    """Held-out accuracy of a fresh 2-layer domain classifier per target
    fraction. The source side is subsampled to the target subset size so the
    probe reads 0.5 for indistinguishable domains at every fraction.
    """
    torch.set_num_threads(1)
    if len(source_features) == 0 or len(target_features) == 0:
        raise EmptyInputError("probe needs non-empty feature sets")
    src = np.asarray(source_features, dtype=np.float64).reshape(len(source_features), -1)
    tgt = np.asarray(target_features, dtype=np.float64).reshape(len(target_features), -1)
    fractions = [float(f) for f in fractions]
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be strictly increasing")
    accs = []
    for i, frac in enumerate(fractions):
        ss = np.random.SeedSequence([int(seed), i, 41])
        sub_rng, split_rng, init_seq = ss.spawn(3)
        sub_rng = np.random.default_rng(sub_rng)
        split_rng = np.random.default_rng(split_rng)
        k = int(np.floor(frac * len(tgt)))
        if k == 0:
            raise EmptySubsetError(f"fraction {frac} of {len(tgt)} target samples keeps nothing")
        tgt_idx = np.sort(sub_rng.choice(len(tgt), size=k, replace=False))
        src_idx = np.sort(sub_rng.choice(len(src), size=min(k, len(src)), replace=False))
        x = np.concatenate([src[src_idx], tgt[tgt_idx]])
        y = np.concatenate([np.zeros(len(src_idx)), np.ones(len(tgt_idx))])
        train_idx, test_idx = [], []
        for domain in (0, 1):
            idx = split_rng.permutation(np.flatnonzero(y == domain))
            cut = int(np.floor(0.8 * len(idx)))
            train_idx.extend(idx[:cut])
            test_idx.extend(idx[cut:])
        train_idx = np.asarray(sorted(train_idx))
        test_idx = np.asarray(sorted(test_idx))
        accs.append(
            _train_domain_classifier(
                x[train_idx], y[train_idx], x[test_idx], y[test_idx],
                seed=int(init_seq.generate_state(1)[0]), steps=steps,
            )
        )
    digest = hashlib.sha256(
        json.dumps([seed, fractions, src.shape, tgt.shape]).encode()
    ).hexdigest()[:16]
    return ProbeCurve(fractions, accs, seed=int(seed), config_hash=digest)
