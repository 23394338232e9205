"""On-disk formats: raw tensor files, checkpoint and dataset directories, metric logs.

Tensor file layout (all integers little-endian)::

    b"KNOT" | u32 version=1 | u8 dtype (0=f64, 1=complex f64 re/im interleaved)
    | u8 ndim | ndim x u64 shape | row-major little-endian IEEE-754 payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KNOT"
VERSION = 1
_HEADER = struct.Struct("<4sIBB")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_MAX_ELEMENTS = 2**60

CHECKPOINT_MANIFEST = "manifest.json"
DATASET_MANIFEST = "dataset.json"


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ShapeOverflowError(TensorFormatError):
    pass


class CheckpointError(ValueError):
    pass


class MissingTensorError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def tensor_bytes(tensor: np.ndarray) -> bytes:
    tensor = np.asarray(tensor)
    if np.iscomplexobj(tensor):
        code, dtype = 1, _DTYPES[1]
    elif tensor.dtype.kind == "f":
        code, dtype = 0, _DTYPES[0]
    else:
        raise TypeError(f"unsupported dtype {tensor.dtype}")
    if tensor.ndim > 255:
        raise ShapeOverflowError(f"too many dimensions: {tensor.ndim}")
    header = _HEADER.pack(MAGIC, VERSION, code, tensor.ndim)
    shape = struct.pack(f"<{tensor.ndim}Q", *tensor.shape)
    return header + shape + np.ascontiguousarray(tensor, dtype=dtype).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the tensor header")
    magic, version, code, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file {version}, reader {VERSION}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    offset = _HEADER.size + 8 * ndim
    if len(buf) < offset:
        raise TruncatedPayloadError("file ends inside the shape block")
    shape = struct.unpack_from(f"<{ndim}Q", buf, _HEADER.size)
    count = 1
    for n in shape:
        count *= n
        if count > _MAX_ELEMENTS:
            raise ShapeOverflowError(f"shape {shape} overflows")
    dtype = _DTYPES[code]
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - offset} bytes, need {need - offset}")
    if len(buf) > need:
        raise TensorFormatError(f"{len(buf) - need} trailing bytes after payload")
    out = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return out.astype(dtype.newbyteorder("="))


def write_tensor(path, tensor: np.ndarray) -> str:
    """Write ``tensor``; returns the SHA-256 hex digest of the file contents."""
    data = tensor_bytes(tensor)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_hash(x: np.ndarray) -> str:
    return hashlib.sha256(tensor_bytes(x)).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class Checkpoint:
    params: dict
    model_config: object
    train_config: object
    mean: np.ndarray
    std: np.ndarray
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a checkpoint directory: ``manifest.json`` plus one ``.knot`` file per tensor."""
    from kno.model import param_shapes

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in param_shapes(ckpt.model_config):
        fname = f"{name}.knot"
        digest = write_tensor(path / fname, ckpt.params[name])
        arr = ckpt.params[name]
        tensors[name] = {
            "file": fname,
            "dtype": "c128" if np.iscomplexobj(arr) else "f64",
            "shape": list(arr.shape),
            "sha256": digest,
        }
    manifest = {
        "format": "kno-checkpoint",
        "version": VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "normalizer": {
            "mean": [float(v) for v in ckpt.mean],
            "std": [float(v) for v in ckpt.std],
        },
        "metadata": ckpt.metadata,
        "tensors": tensors,
    }
    _dump_json(path / CHECKPOINT_MANIFEST, manifest)
    return path


def load_checkpoint(path) -> Checkpoint:
    from kno.model import ModelConfig, param_shapes
    from kno.training import TrainConfig

    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise MissingTensorError(f"no manifest in {path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = ModelConfig(**manifest["model_config"])
    tcfg = TrainConfig(**manifest["train_config"]) if manifest["train_config"] else None
    expected = param_shapes(cfg)
    listed = manifest["tensors"]
    if set(listed) != set(expected):
        raise ConfigMismatchError(
            f"tensor set {sorted(listed)} does not match config {sorted(expected)}"
        )
    params = {}
    for name, (shape, dtype) in expected.items():
        entry = listed[name]
        fpath = path / entry["file"]
        if not fpath.exists():
            raise MissingTensorError(f"missing tensor file {fpath.name}")
        data = fpath.read_bytes()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise HashMismatchError(f"hash mismatch for {fpath.name}")
        arr = tensor_from_bytes(data)
        if arr.shape != shape or arr.dtype != np.dtype(dtype):
            raise ConfigMismatchError(f"{name}: stored {arr.shape} {arr.dtype}, expected {shape}")
        params[name] = arr
    norm = manifest["normalizer"]
    return Checkpoint(
        params,
        cfg,
        tcfg,
        np.array(norm["mean"], dtype=np.float64),
        np.array(norm["std"], dtype=np.float64),
        manifest.get("metadata", {}),
    )


def serialized_scalar_count(path) -> int:
    """Real scalars stored in a checkpoint directory (complex entries count twice)."""
    manifest = json.loads((Path(path) / CHECKPOINT_MANIFEST).read_text())
    total = 0
    for entry in manifest["tensors"].values():
        arr = read_tensor(Path(path) / entry["file"])
        total += arr.size * (2 if np.iscomplexobj(arr) else 1)
    return total


def save_dataset(ds, path) -> Path:
    """Persist a ``Dataset`` as ``snapshots.knot`` plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    digest = write_tensor(path / "snapshots.knot", ds.snapshots)
    manifest = {
        "format": "kno-dataset",
        "version": VERSION,
        "problem": ds.problem.to_dict(),
        "n_train": ds.n_train,
        "n_test": ds.n_test,
        "seeds": list(ds.seeds),
        "shape": list(ds.snapshots.shape),
        "normalizer": {"mean": [float(v) for v in ds.mean], "std": [float(v) for v in ds.std]},
        "snapshots": {"file": "snapshots.knot", "sha256": digest},
    }
    _dump_json(path / DATASET_MANIFEST, manifest)
    return path


def load_dataset(path):
    from kno.pdegen import Dataset, PdeProblem

    path = Path(path)
    manifest_path = path / DATASET_MANIFEST
    if not manifest_path.exists():
        raise MissingTensorError(f"no dataset manifest in {path}")
    manifest = json.loads(manifest_path.read_text())
    fpath = path / manifest["snapshots"]["file"]
    if not fpath.exists():
        raise MissingTensorError(f"missing tensor file {fpath.name}")
    data = fpath.read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["snapshots"]["sha256"]:
        raise HashMismatchError(f"hash mismatch for {fpath.name}")
    snaps = tensor_from_bytes(data)
    norm = manifest["normalizer"]
    return Dataset(
        snaps,
        manifest["n_train"],
        PdeProblem.from_dict(manifest["problem"]),
        manifest["seeds"],
        np.array(norm["mean"]),
        np.array(norm["std"]),
    )


def dataset_hash(ds) -> str:
    return array_hash(ds.snapshots)


class MetricsLog:
    """Append-only JSON-lines log; every record is flushed as it is written."""

    def __init__(self, path, experiment: str = "", config: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.experiment = experiment
        self.config = config or {}
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        full = {"experiment": self.experiment, "config": self.config}
        full.update(record)
        self._fh.write(json.dumps(full, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(log: MetricsLog, record: dict) -> None:
    log.write(record)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
