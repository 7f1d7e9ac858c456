"""Flat binary serialization for datasets and checkpoints.

Every matrix is written with a 16-byte header: 4-byte magic, uint32 dtype
code, uint32 n, uint32 d (little endian). Datasets are directories holding a
text ``meta`` file plus per-split feature/label matrices; checkpoints hold a
text ``manifest`` plus one framed, named parameter list. External datasets in
the same layout load through the same reader.
"""

import struct
from pathlib import Path

import numpy as np

from .data import DatasetBundle, LabeledSet
from .errors import ConfigError

MAGIC = b"SBM1"
_DTYPE_CODES = {1: "<f8", 2: "<i8"}
_CODE_FOR = {np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_HEADER = struct.Struct("<4sIII")


def write_matrix(path, array):
    array = np.ascontiguousarray(array)
    if array.ndim != 2:
        raise ValueError("binary matrices are 2-d; flatten higher ranks first")
    code = _CODE_FOR.get(array.dtype.newbyteorder("<"))
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, code, array.shape[0], array.shape[1]))
        fh.write(array.astype(_DTYPE_CODES[code]).tobytes())


def read_matrix(path):
    with open(path, "rb") as fh:
        magic, code, n, d = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        if code not in _DTYPE_CODES:
            raise ConfigError(f"{path}: unknown dtype code {code}")
        data = np.frombuffer(fh.read(), dtype=_DTYPE_CODES[code])
    return data.reshape(n, d)


def _write_kv(path, mapping):
    lines = [f"{k}: {mapping[k]}" for k in sorted(mapping)]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_kv(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        out[key.strip()] = value.strip()
    return out


def save_dataset(bundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"name": bundle.name, "num_classes": bundle.num_classes}
    meta.update(bundle.meta)
    example = bundle.source_train.features
    meta["mode"] = "image" if example.ndim == 4 else "vector"
    if example.ndim == 4:
        meta["image_shape"] = "x".join(str(s) for s in example.shape[1:])
    _write_kv(directory / "meta", meta)
    for split_name, split in bundle.splits().items():
        feats = split.features.reshape(len(split), -1)
        write_matrix(directory / f"{split_name}.features.bin", feats)
        write_matrix(directory / f"{split_name}.labels.bin", split._labels.reshape(-1, 1))
    return directory


def load_dataset(directory):
    directory = Path(directory)
    meta = _read_kv(directory / "meta")
    if "num_classes" not in meta:
        raise ConfigError(f"{directory}/meta is missing num_classes")
    num_classes = int(meta["num_classes"])
    image_shape = None
    if meta.get("mode") == "image":
        image_shape = tuple(int(s) for s in meta["image_shape"].split("x"))
    splits = {}
    for split_name, domain_id in (
        ("source_train", 0),
        ("source_test", 0),
        ("target_train", 1),
        ("target_test", 1),
    ):
        feats = read_matrix(directory / f"{split_name}.features.bin")
        labels = read_matrix(directory / f"{split_name}.labels.bin").reshape(-1)
        if image_shape is not None:
            feats = feats.reshape(len(feats), *image_shape)
        splits[split_name] = LabeledSet(feats, labels, domain_id)
    bundle = DatasetBundle(
        splits["source_train"],
        splits["source_test"],
        splits["target_train"],
        splits["target_test"],
        name=meta.get("name", directory.name),
        num_classes=num_classes,
    )
    bundle.meta = meta
    return bundle


def save_checkpoint(named_arrays, manifest, directory):
    """Write a flat list of named parameter arrays plus a text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_kv(directory / "manifest", manifest)
    with open(directory / "params.bin", "wb") as fh:
        fh.write(struct.pack("<I", len(named_arrays)))
        for name, array in named_arrays:
            array = np.ascontiguousarray(array, dtype=np.float64)
            flat = array.reshape(1, -1) if array.ndim < 2 else array.reshape(array.shape[0], -1)
            encoded = name.encode() + b"|" + ",".join(str(s) for s in array.shape).encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(_HEADER.pack(MAGIC, 1, flat.shape[0], flat.shape[1]))
            fh.write(flat.astype("<f8").tobytes())
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = _read_kv(directory / "manifest")
    arrays = []
    with open(directory / "params.bin", "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            encoded = fh.read(name_len).decode()
            name, _, shape_str = encoded.partition("|")
            shape = tuple(int(s) for s in shape_str.split(",")) if shape_str else ()
            magic, code, n, d = _HEADER.unpack(fh.read(_HEADER.size))
            if magic != MAGIC or code != 1:
                raise ConfigError(f"{directory}/params.bin: corrupt entry for {name}")
            data = np.frombuffer(fh.read(n * d * 8), dtype="<f8").reshape(n, d)
            arrays.append((name, data.reshape(shape)))
    return arrays, manifest
