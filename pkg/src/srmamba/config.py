"""Process-wide numeric precision and worker-count settings."""
from __future__ import annotations

import contextlib
import os

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = {
    "dtype": DTYPES[os.environ.get("SRMAMBA_PRECISION", "f32")],
    "workers": int(os.environ.get("SRMAMBA_WORKERS", "1")),
}


def default_dtype():
    return _state["dtype"]


def default_dtype_name() -> str:
    return next(k for k, v in DTYPES.items() if v is _state["dtype"])


def set_default_dtype(name: str) -> None:
    if name not in DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    _state["dtype"] = DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype (``"f32"`` or ``"f64"``)."""
    old = _state["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _state["dtype"] = old


def workers() -> int:
    return _state["workers"]


def set_workers(n: int) -> None:
    if n < 1:
        raise ValueError("workers must be >= 1")
    _state["workers"] = int(n)


@contextlib.contextmanager
def worker_count(n: int):
    old = _state["workers"]
    set_workers(n)
    try:
        yield
    finally:
        _state["workers"] = old
