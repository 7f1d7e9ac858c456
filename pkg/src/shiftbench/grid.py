"""Experiment-grid expansion, parallel execution, and aggregation.

Runs are keyed by (config hash, seed); the store is an append-only JSONL
file with a header line, safe to resume after interrupts. Workers are
process-isolated and the aggregated output is independent of worker count
and completion order.
"""

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from itertools import product
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .data import SamplingPlan
from .errors import AbortedRunError, ConfigError, EmptyAxisError
from .methods import MethodConfig, method_param_spec
from .models import default_arch
from .trainer import RunConfig, config_from_dict, config_hash, train_run

AXIS_NAMES = ("methods", "archs", "target_fractions", "source_fractions", "sampling", "pretrain")
STORE_SCHEMA = 1


@dataclass(frozen=True)
class GridConfig:
    axes: dict
    repeats: int = 1
    master_seed: int = 0
    base: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        unknown = set(self.axes) - set(AXIS_NAMES)
        if unknown:
            raise ConfigError(f"unknown grid axes: {sorted(unknown)}")
        for name in AXIS_NAMES:
            if not self.axes.get(name):
                raise EmptyAxisError(f"grid axis {name!r} is empty")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def to_dict(self):
        return {
            "axes": {k: list(self.axes[k]) for k in AXIS_NAMES},
            "repeats": self.repeats,
            "master_seed": self.master_seed,
            "base": self.base.to_dict(),
        }


def derive_seed(master_seed, axis_values, repeat):
    """Stable 63-bit seed from (master seed, axis values, repeat index)."""
    payload = json.dumps([master_seed, list(axis_values), repeat], sort_keys=True)
    digest = hashlib.sha256(payload.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class GridCell:
    axes: dict
    config: RunConfig


def _cell_config(base, method_name, arch_family, t_frac, s_frac, strategy, pretrain, seed):
    params = dict(base.method.params) if method_name == base.method.name else method_param_spec(method_name)
    method = MethodConfig(method_name, base.method.adaptation_weight, params)
    if arch_family == base.arch.family:
        arch = base.arch
    else:
        preset = default_arch(arch_family, base.dataset.mode)
        arch = replace(preset, feature_dim=base.arch.feature_dim)
    target_plan = SamplingPlan(strategy, float(t_frac), None)
    source_plan = None if float(s_frac) == 1.0 else SamplingPlan("stratified", float(s_frac), None)
    return replace(
        base,
        method=method,
        arch=arch,
        target_sampling=target_plan,
        source_sampling=source_plan,
        pretrain_checkpoint=pretrain,
        seed=seed,
    )


def expand_cells(grid):
    cells = []
    axes = grid.axes
    for combo in product(
        axes["methods"],
        axes["archs"],
        axes["target_fractions"],
        axes["source_fractions"],
        axes["sampling"],
        axes["pretrain"],
    ):
        method_name, arch_family, t_frac, s_frac, strategy, pretrain = combo
        for repeat in range(grid.repeats):
            seed = derive_seed(grid.master_seed, combo, repeat)
            config = _cell_config(grid.base, *combo, seed=seed)
            cells.append(
                GridCell(
                    axes={
                        "method": method_name,
                        "arch": arch_family,
                        "target_fraction": float(t_frac),
                        "source_fraction": float(s_frac),
                        "sampling": strategy,
                        "pretrain": pretrain if pretrain else "none",
                        "repeat": repeat,
                    },
                    config=config,
                )
            )
    return cells


def expand_grid(grid):
    """Cartesian product of all axes and repeats, deterministically ordered."""
    return [cell.config for cell in expand_cells(grid)]


class ResultsStore:
    """Append-only JSONL store, one complete record per line under a header
    line carrying the schema version. A partial trailing line (crash during
    a write) is ignored on load."""

    def __init__(self, path):
        self.path = Path(path)
        self._keys = {(r["config_hash"], r["seed"]) for r in self.load()}

    def load(self):
        if not self.path.exists():
            return []
        records = []
        lines = self.path.read_text().split("\n")
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError:
                if i >= len(lines) - 2:
                    continue
                raise
            if "schema" in doc and "config_hash" not in doc:
                if doc["schema"] != STORE_SCHEMA:
                    raise ConfigError(f"unsupported store schema {doc['schema']}")
                continue
            records.append(doc)
        return records

    def completed_keys(self):
        return set(self._keys)

    def append(self, record):
        key = (record["config_hash"], record["seed"])
        if key in self._keys:
            raise ConfigError(f"duplicate record for {key}")
        new_file = not self.path.exists()
        with open(self.path, "a") as fh:
            if new_file:
                fh.write(json.dumps({"schema": STORE_SCHEMA, "kind": "shiftbench-results"}) + "\n")
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._keys.add(key)


def run_cell(cell_doc):
    """Process-pool entry point: run one config, return a store record."""
    config = config_from_dict(cell_doc["config"])
    base = {"config_hash": config_hash(config), "seed": config.seed, "axes": cell_doc["axes"]}
    try:
        record = train_run(config).to_dict()
        record["axes"] = cell_doc["axes"]
        return record
    except AbortedRunError as err:
        return {**base, "status": "aborted", "step": err.step, "error": str(err)}


def _sample_std(values):
    if len(values) <= 1:
        return 0.0
    return float(np.std(values, ddof=1))


GROUP_KEYS = ("method", "arch", "target_fraction", "source_fraction", "sampling", "pretrain")


def aggregate(records):
    """Group completed records by all axes except seed; mean and sample std
    (n-1, zero for a single run) of the accuracy metrics."""
    groups = {}
    for rec in records:
        if rec.get("status") != "completed" or "axes" not in rec:
            continue
        key = tuple(rec["axes"].get(k) for k in GROUP_KEYS)
        groups.setdefault(key, []).append(rec["metrics"])
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        metrics = groups[key]
        row = dict(zip(GROUP_KEYS, key))
        row["n_runs"] = len(metrics)
        for field_name in ("lambda_t", "lambda_s", "sigma_st"):
            values = [m[field_name] for m in metrics if m[field_name] is not None]
            row[f"{field_name}_mean"] = float(np.mean(values)) if values else None
            row[f"{field_name}_std"] = _sample_std(values) if values else None
        rows.append(row)
    return rows


def execute_and_aggregate(grid, parallelism=1, store_path="results.jsonl"):
    """Run every pending grid cell (resuming completed hashes), then
    aggregate the full store. Returns (rows, summary)."""
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    store = ResultsStore(store_path)
    cells = expand_cells(grid)
    done = store.completed_keys()
    pending = []
    for cell in cells:
        key = (config_hash(cell.config), cell.config.seed)
        if key not in done:
            pending.append({"config": cell.config.to_dict(), "axes": cell.axes})
    aborted = []
    if parallelism == 1 or len(pending) <= 1:
        results = map(run_cell, pending)
        for record in results:
            store.append(record)
            if record.get("status") == "aborted":
                aborted.append(record)
    else:
        ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=parallelism, mp_context=ctx) as pool:
            futures = [pool.submit(run_cell, doc) for doc in pending]
            for future in as_completed(futures):
                record = future.result()
                store.append(record)
                if record.get("status") == "aborted":
                    aborted.append(record)
    records = store.load()
    summary = {
        "total_cells": len(cells),
        "executed": len(pending),
        "resumed": len(cells) - len(pending),
        "aborted": [
            {"config_hash": r["config_hash"], "seed": r["seed"], "step": r.get("step")}
            for r in records
            if r.get("status") == "aborted"
        ],
    }
    return aggregate(records), summary
