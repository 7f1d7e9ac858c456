"""Config files: YAML documents validated against a strict schema.

Unknown keys are rejected by dotted path, every default is resolved into the
returned document, and parse -> serialize -> parse is a fixed point. A
document is a run config by default; an ``axes`` section makes it a grid,
``probe`` a probe spec, and ``pretext`` a pretraining spec. The ``preset``
key selects the desk-scale defaults or the paper-defaults training recipe.
"""

from dataclasses import dataclass

import yaml

from .errors import ConfigError, ShiftBenchError
from .grid import AXIS_NAMES, GridConfig
from .methods import method_param_spec
from .models import ArchSpec, default_arch
from .pretrain import PretextSpec
from .trainer import DatasetSpec, RunConfig, config_from_dict

_MISSING = object()
_NONE = type(None)


class _NullableMap:
    def __init__(self, schema):
        self.schema = schema


class _List:
    def __init__(self, *item_types):
        self.item_types = item_types


_SHIFT = {"family": (str,), "magnitude": (float, int), "seed": (int,)}
_DATASET = {
    "kind": (str,),
    "path": (str, _NONE),
    "num_classes": (int,),
    "samples_per_domain": (int,),
    "feature_dim": (int,),
    "mode": (str,),
    "shift": _SHIFT,
    "seed": (int,),
    "train_ratio": (float, int),
    "class_std": (float, int),
    "std_spread": (float, int),
    "radius": (float, int),
}
_ARCH = {
    "family": (str,),
    "depth": (int, _NONE),
    "width": (int, _NONE),
    "feature_dim": (int,),
}
_SAMPLING = {"strategy": (str,), "fraction": (float, int), "seed": (int, _NONE)}
_RUN_SCHEMA = {
    "preset": (str,),
    "dataset": _DATASET,
    "method": {"name": (str,), "adaptation_weight": (float, int), "params": "method-params"},
    "arch": _ARCH,
    "target_sampling": _NullableMap(_SAMPLING),
    "source_sampling": _NullableMap(_SAMPLING),
    "pretrain_checkpoint": (str, _NONE),
    "seed": (int,),
    "iterations": (int,),
    "batch_size": (int,),
    "optimizer": {
        "kind": (str,),
        "lr": (float, int),
        "momentum": (float, int),
        "schedule": (str,),
        "clip_norm": (float, int, _NONE),
    },
    "val_every": (int,),
    "early_stop": (bool,),
}
_GRID_SCHEMA = {
    **_RUN_SCHEMA,
    "axes": {
        "methods": _List(str),
        "archs": _List(str),
        "target_fractions": _List(float, int),
        "source_fractions": _List(float, int),
        "sampling": _List(str),
        "pretrain": _List(str, _NONE),
    },
    "repeats": (int,),
    "master_seed": (int,),
}
_PROBE_SCHEMA = {
    "preset": (str,),
    "dataset": _DATASET,
    "probe": {
        "fractions": _List(float, int),
        "seed": (int,),
        "steps": (int,),
        "checkpoint": (str, _NONE),
    },
}
_PRETRAIN_SCHEMA = {
    "preset": (str,),
    "pretext": {
        "dataset": _DATASET,
        "budget": (int,),
        "exclude_classes": _List(int),
        "mode": (str,),
        "epochs": (int,),
        "seed": (int,),
        "batch_size": (int,),
        "lr": (float, int),
        "temperature": (float, int),
    },
    "arch": _ARCH,
}

# Desk-scale defaults: sized so a full method x fraction grid finishes on a
# laptop CPU. The paper-defaults preset mirrors the reference training recipe
# (batch 32, SGD lr 0.003, cosine decay, test-set early stopping) for use
# with externally loaded datasets.
_DESK_RUN = {
    "preset": "desk",
    "dataset": {
        "kind": "synthetic",
        "path": None,
        "num_classes": 5,
        "samples_per_domain": 2000,
        "feature_dim": 2,
        "mode": "vector",
        "shift": {"family": "rotation", "magnitude": 30.0, "seed": 0},
        "seed": 0,
        "train_ratio": 0.9,
        "class_std": 0.45,
        "std_spread": 0.0,
        "radius": 2.0,
    },
    "method": {"name": "source-only", "adaptation_weight": 1.0, "params": {}},
    "arch": {"family": "mlp", "depth": None, "width": None, "feature_dim": 16},
    "target_sampling": None,
    "source_sampling": None,
    "pretrain_checkpoint": None,
    "seed": 0,
    "iterations": 2000,
    "batch_size": 32,
    "optimizer": {"kind": "sgd", "lr": 0.02, "momentum": 0.9, "schedule": "cosine", "clip_norm": 5.0},
    "val_every": 200,
    "early_stop": False,
}
_PAPER_OVERRIDES = {
    "optimizer": {"kind": "sgd", "lr": 0.003, "momentum": 0.9, "schedule": "cosine", "clip_norm": 5.0},
    "iterations": 30000,
    "val_every": 500,
    "early_stop": True,
}
_GRID_DEFAULTS = {"repeats": 1, "master_seed": 0}
_PROBE_DEFAULTS = {
    "fractions": [0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
    "seed": 0,
    "steps": 300,
    "checkpoint": None,
}
_PRETEXT_DEFAULTS = {
    "budget": 500,
    "exclude_classes": [],
    "mode": "supervised",
    "epochs": 5,
    "seed": 0,
    "batch_size": 32,
    "lr": 0.05,
    "temperature": 0.5,
}


def _type_name(types):
    return " or ".join(t.__name__ for t in types)


def _check_leaf(value, types, path):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"config key {path}: expected {_type_name(types)}, got bool")
    if not isinstance(value, tuple(types)):
        raise ConfigError(
            f"config key {path}: expected {_type_name(types)}, got {type(value).__name__}"
        )
    return value


def _merge(defaults, raw, schema, path=""):
    if raw is _MISSING or raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config key {path or '<root>'}: expected a mapping")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}{key}")
    out = {}
    for key, spec in schema.items():
        child_path = f"{path}{key}."
        given = raw.get(key, _MISSING)
        default = defaults.get(key, _MISSING) if isinstance(defaults, dict) else _MISSING
        if isinstance(spec, dict):
            out[key] = _merge(default if default is not _MISSING else {}, given, spec, child_path)
        elif isinstance(spec, _NullableMap):
            if given is _MISSING:
                out[key] = default if default is not _MISSING else None
            elif given is None:
                out[key] = None
            else:
                base = default if isinstance(default, dict) else {"strategy": "stratified", "fraction": 1.0, "seed": None}
                out[key] = _merge(base, given, spec.schema, child_path)
        elif isinstance(spec, _List):
            value = given if given is not _MISSING else default
            if value is _MISSING:
                continue
            if not isinstance(value, list):
                raise ConfigError(f"config key {path}{key}: expected a list")
            for i, item in enumerate(value):
                _check_leaf(item, spec.item_types, f"{path}{key}[{i}]")
            out[key] = list(value)
        elif spec == "method-params":
            value = given if given is not _MISSING else (default if default is not _MISSING else {})
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key}: expected a mapping")
            out[key] = dict(value)
        else:
            if given is _MISSING:
                if default is _MISSING:
                    raise ConfigError(f"config key {path}{key} has no default and was not set")
                out[key] = default
            else:
                out[key] = _check_leaf(given, spec, f"{path}{key}")
    return out


def _apply_preset(doc):
    preset = doc.get("preset", "desk") if isinstance(doc, dict) else "desk"
    if preset == "desk":
        return _DESK_RUN
    if preset == "paper-defaults":
        merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in _DESK_RUN.items()}
        for key, value in _PAPER_OVERRIDES.items():
            merged[key] = dict(value) if isinstance(value, dict) else value
        merged["preset"] = "paper-defaults"
        return merged
    raise ConfigError(f"unknown preset {preset!r}; known: desk, paper-defaults")


def _finalize_run_doc(doc):
    arch = doc["arch"]
    if arch["depth"] is None or arch["width"] is None:
        preset = default_arch(arch["family"], doc["dataset"]["mode"])
        arch = dict(arch)
        arch["depth"] = preset.depth if arch["depth"] is None else arch["depth"]
        arch["width"] = preset.width if arch["width"] is None else arch["width"]
        doc["arch"] = arch
    params = dict(method_param_spec(doc["method"]["name"]))
    params.update(doc["method"]["params"])
    doc["method"] = {**doc["method"], "params": params}
    return doc


def _build_run(doc):
    try:
        config = config_from_dict(doc)
    except ShiftBenchError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(str(err)) from err
    resolved = {"preset": doc["preset"], **config.to_dict()}
    return config, resolved


@dataclass
class ParsedConfig:
    kind: str
    doc: dict
    obj: object


def parse_config_text(text):
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping")
    if "axes" in raw:
        return _parse_grid(raw)
    if "probe" in raw:
        return _parse_probe(raw)
    if "pretext" in raw:
        return _parse_pretrain(raw)
    return _parse_run(raw)


def parse_config(path):
    """Parse and resolve a config file into its typed object plus the fully
    resolved document (re-serializable as a fixed point)."""
    with open(path) as fh:
        return parse_config_text(fh.read())


def _parse_run(raw):
    merged = _merge(_apply_preset(raw), raw, _RUN_SCHEMA)
    merged["preset"] = raw.get("preset", merged["preset"])
    doc = _finalize_run_doc(merged)
    config, resolved = _build_run(doc)
    return ParsedConfig("run", resolved, config)


def _parse_grid(raw):
    defaults = dict(_apply_preset(raw))
    defaults["axes"] = {}
    defaults.update(_GRID_DEFAULTS)
    merged = _merge(defaults, raw, _GRID_SCHEMA)
    run_doc = {k: merged[k] for k in _RUN_SCHEMA}
    run_doc = _finalize_run_doc(run_doc)
    base, resolved_run = _build_run(run_doc)
    axes = dict(merged["axes"])
    axes.setdefault("methods", [base.method.name])
    axes.setdefault("archs", [base.arch.family])
    axes.setdefault("target_fractions", [1.0])
    axes.setdefault("source_fractions", [1.0])
    axes.setdefault("sampling", ["stratified"])
    axes.setdefault("pretrain", [None])
    axes["target_fractions"] = [float(f) for f in axes["target_fractions"]]
    axes["source_fractions"] = [float(f) for f in axes["source_fractions"]]
    try:
        grid = GridConfig(
            axes=axes, repeats=merged["repeats"], master_seed=merged["master_seed"], base=base
        )
    except ShiftBenchError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(str(err)) from err
    resolved = {
        **resolved_run,
        "axes": {k: axes[k] for k in AXIS_NAMES},
        "repeats": merged["repeats"],
        "master_seed": merged["master_seed"],
    }
    return ParsedConfig("grid", resolved, grid)


def _parse_probe(raw):
    defaults = {
        "preset": "desk",
        "dataset": _DESK_RUN["dataset"],
        "probe": _PROBE_DEFAULTS,
    }
    merged = _merge(defaults, raw, _PROBE_SCHEMA)
    dataset_doc = merged["dataset"]
    try:
        dataset = config_from_dict({**_DESK_RUN, "dataset": dataset_doc}).dataset
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(str(err)) from err
    fractions = sorted(float(f) for f in merged["probe"]["fractions"])
    if len(set(fractions)) != len(fractions):
        raise ConfigError("probe fractions must be distinct")
    resolved = {
        "preset": merged["preset"],
        "dataset": dataset.to_dict(),
        "probe": {**merged["probe"], "fractions": fractions},
    }
    return ParsedConfig("probe", resolved, (dataset, resolved["probe"]))


def _parse_pretrain(raw):
    defaults = {
        "preset": "desk",
        "pretext": {**_PRETEXT_DEFAULTS, "dataset": _DESK_RUN["dataset"]},
        "arch": _DESK_RUN["arch"],
    }
    merged = _merge(defaults, raw, _PRETRAIN_SCHEMA)
    pretext_doc = merged["pretext"]
    try:
        dataset = config_from_dict({**_DESK_RUN, "dataset": pretext_doc["dataset"]}).dataset
        arch_doc = merged["arch"]
        if arch_doc["depth"] is None or arch_doc["width"] is None:
            preset = default_arch(arch_doc["family"], pretext_doc["dataset"]["mode"])
            arch_doc = {
                **arch_doc,
                "depth": preset.depth if arch_doc["depth"] is None else arch_doc["depth"],
                "width": preset.width if arch_doc["width"] is None else arch_doc["width"],
            }
        arch = ArchSpec(arch_doc["family"], arch_doc["depth"], arch_doc["width"], arch_doc["feature_dim"])
        spec = PretextSpec(
            dataset=dataset,
            budget=pretext_doc["budget"],
            exclude_classes=tuple(pretext_doc["exclude_classes"]),
            mode=pretext_doc["mode"],
            epochs=pretext_doc["epochs"],
            seed=pretext_doc["seed"],
            batch_size=pretext_doc["batch_size"],
            lr=float(pretext_doc["lr"]),
            temperature=float(pretext_doc["temperature"]),
        )
    except ShiftBenchError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(str(err)) from err
    resolved = {
        "preset": merged["preset"],
        "pretext": spec.to_dict(),
        "arch": {"family": arch.family, "depth": arch.depth, "width": arch.width, "feature_dim": arch.feature_dim},
    }
    return ParsedConfig("pretrain", resolved, (spec, arch))


def serialize_config(doc):
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)
