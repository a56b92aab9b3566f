"""Named parameter storage, initialisation and the on-disk weight manifest.

A manifest is a JSON index plus one little-endian raw blob::

    {"format": "srmamba-weights", "version": 1, "blob": "model.bin",
     "config": {...},
     "tensors": [{"name": ..., "shape": [...], "dtype": "f32", "offset": 0, "nbytes": ...}, ...]}
"""
from __future__ import annotations

import json
import math
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from . import config
from .tensor import Tensor

MANIFEST_FORMAT = "srmamba-weights"
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def init_array(shape, kind, rng: np.random.Generator) -> np.ndarray:
    """Draw an initial value (float64) for one parameter."""
    from .ssm import init_a_log, init_dt_bias

    tag = kind[0]
    if tag == "kaiming":
        # kaiming-uniform on fan-in with a=sqrt(5), i.e. bound 1/sqrt(fan_in)
        bound = 1.0 / math.sqrt(kind[1])
        return rng.uniform(-bound, bound, size=shape)
    if tag == "uniform":
        return rng.uniform(-kind[1], kind[1], size=shape)
    if tag == "zeros":
        return np.zeros(shape)
    if tag == "ones":
        return np.ones(shape)
    if tag == "a_log":
        return init_a_log(shape)
    if tag == "dt_bias":
        return init_dt_bias(shape, rng, kind[1], kind[2])
    raise ValueError(f"unknown init kind {kind!r}")


class WeightStore(Mapping):
    """Flat, insertion-ordered map from parameter name to :class:`Tensor`."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __setitem__(self, name: str, value: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._t[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def num_params(self) -> int:
        return sum(t.size for t in self._t.values())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def astype(self, dtype) -> "WeightStore":
        return WeightStore({k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype)
                            for k, v in self._t.items()})

    @classmethod
    def initialise(cls, shapes: Mapping[str, tuple], seed: int = 0, dtype=None) -> "WeightStore":
        """Build a store from ``{name: (shape, init_kind)}``, drawing in name order."""
        rng = np.random.default_rng(seed)
        dtype = dtype or config.default_dtype()
        return cls({name: Tensor(init_array(shape, kind, rng), requires_grad=True, dtype=dtype, name=name)
                    for name, (shape, kind) in shapes.items()})


class Scope(Mapping):
    """Prefix view into a :class:`WeightStore`; ``scope["w"]`` reads ``"<prefix>.w"``."""

    def __init__(self, store: Mapping[str, Tensor], prefix: str):
        self.store = store
        self.prefix = prefix

    def _key(self, name):
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name):
        return self.store[self._key(name)]

    def __iter__(self):
        head = self.prefix + "."
        return (k[len(head):] for k in self.store if k.startswith(head))

    def __len__(self):
        return sum(1 for _ in self)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self.store, self._key(prefix))


def prefixed(prefix: str, shapes: Mapping[str, tuple]) -> dict[str, tuple]:
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


# --------------------------------------------------------------------------
# Manifest


def save_weights(store: Mapping[str, Tensor], path, extra_config: dict | None = None) -> Path:
    """Write ``<path>`` (JSON index) and ``<path stem>.bin`` (raw blob)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, t in store.items():
            dt = _DTYPE_NAMES[t.data.dtype]
            raw = np.ascontiguousarray(t.data, dtype=_NAME_DTYPES[dt]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(t.shape), "dtype": dt,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    index = {"format": MANIFEST_FORMAT, "version": 1, "blob": blob_path.name,
             "config": extra_config or {}, "tensors": entries}
    path.write_text(json.dumps(index, indent=1))
    return path


def load_manifest(path) -> dict:
    index = json.loads(Path(path).read_text())
    if index.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a weight manifest")
    return index


def load_weights(path, requires_grad: bool = True) -> tuple[WeightStore, dict]:
    """Inverse of :func:`save_weights`; returns the store and the stored config."""
    path = Path(path)
    index = load_manifest(path)
    blob = (path.parent / index["blob"]).read_bytes()
    store = WeightStore()
    for e in index["tensors"]:
        dt = _NAME_DTYPES[e["dtype"]]
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"{path}: blob truncated at tensor {e['name']!r}")
        arr = np.frombuffer(blob, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        store[e["name"]] = Tensor(arr, requires_grad=requires_grad, dtype=arr.dtype, name=e["name"])
    return store, index.get("config", {})


def save_tensor(t: Tensor, path) -> None:
    """Dump a tensor as ``<path>.bin`` (little-endian) plus ``<path>.json`` (shape, dtype)."""
    path = Path(path)
    dt = _DTYPE_NAMES[t.data.dtype]
    path.with_suffix(".bin").write_bytes(np.ascontiguousarray(t.data, dtype=_NAME_DTYPES[dt]).tobytes())
    path.with_suffix(".json").write_text(json.dumps({"shape": list(t.shape), "dtype": dt}))


def load_tensor(path) -> Tensor:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dt = _NAME_DTYPES[meta["dtype"]]
    arr = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=dt).reshape(meta["shape"])
    return Tensor(arr.astype(dt.newbyteorder("=")), dtype=dt.newbyteorder("="))
