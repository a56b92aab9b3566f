"""Anatomy-based selective scan over sagittal, coronal and axial planes.

A ``[C, H, W, D]`` feature volume is viewed three ways: as ``H`` sagittal
slices of ``W x D`` voxels, ``W`` coronal slices of ``H x D`` and ``D`` axial
slices of ``H x W``. Each slice grid is unrolled in four directions, scanned
with the plane's S6 parameters, folded back and summed; the three plane
results are then added.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .ssm import SSMParams, selective_scan
from .tensor import ShapeError, Tensor, add, concat, getitem, permute, permute_axis, reshape

PLANES = ("sagittal", "coronal", "axial")
_ALIASES = {"h": "sagittal", "w": "coronal", "d": "axial"}
# axis order that brings the plane's slicing axis first, then the grid axes
_PERMS = {"sagittal": (0, 1, 2, 3), "coronal": (0, 2, 1, 3), "axial": (0, 3, 1, 2)}


def _plane(plane: str) -> str:
    plane = _ALIASES.get(plane, plane)
    if plane not in _PERMS:
        raise ValueError(f"unknown plane {plane!r}")
    return plane


def plane_grid(shape, plane: str) -> tuple[int, int]:
    """Slice grid ``(rows, cols)`` of ``plane`` for a ``[C, H, W, D]`` shape."""
    _, *spatial = _PERMS[_plane(plane)]
    return (shape[spatial[1]], shape[spatial[2]])


def plane_rearrange(x: Tensor, plane: str) -> Tensor:
    """``[C, H, W, D] -> [C, A, L]`` with ``A`` the slicing axis and ``L`` the slice size."""
    if x.ndim != 4:
        raise ShapeError(f"plane_rearrange expects [C,H,W,D], got {x.shape}")
    perm = _PERMS[_plane(plane)]
    y = x if perm == (0, 1, 2, 3) else permute(x, perm)
    c, a, r, q = y.shape
    return reshape(y, (c, a, r * q))


def plane_restore(f: Tensor, plane: str, shape) -> Tensor:
    """Inverse of :func:`plane_rearrange` for a volume of ``shape``."""
    perm = _PERMS[_plane(plane)]
    permuted = tuple(shape[i] for i in perm)
    y = reshape(f, permuted)
    return y if perm == (0, 1, 2, 3) else permute(y, tuple(np.argsort(perm)))


def direction_indices(rows: int, cols: int) -> list[np.ndarray]:
    """Index maps of the four traversals; ``seq[t] = grid.ravel()[idx[t]]``.

    1: row-major, 2: column-major, 3 and 4: reversals of 1 and 2.
    """
    grid = np.arange(rows * cols).reshape(rows, cols)
    d1 = grid.ravel()
    d2 = grid.T.ravel()
    return [d1, d2, d1[::-1].copy(), d2[::-1].copy()]


@dataclass
class DirectionalSequences:
    """Four traversals of every slice of a plane, each ``[C, A, L]``."""

    seqs: list[Tensor]
    grid: tuple[int, int]

    def __post_init__(self):
        if len(self.seqs) != 4:
            raise ShapeError("need exactly four directional sequences")
        shapes = {s.shape for s in self.seqs}
        if len(shapes) != 1:
            raise ShapeError(f"directional sequences disagree in shape: {sorted(shapes)}")


def cross_scan(f: Tensor, grid: tuple[int, int] | None = None) -> DirectionalSequences:
    """Unroll each slice of ``f [C, A, L]`` (a ``rows x cols`` grid) four ways."""
    if grid is None:
        grid = (1, f.shape[2])
    rows, cols = grid
    if rows * cols != f.shape[2]:
        raise ShapeError(f"grid {grid} does not cover sequence length {f.shape[2]}")
    idx = direction_indices(rows, cols)
    return DirectionalSequences([permute_axis(f, i, axis=2) for i in idx], tuple(grid))


def cross_merge(seqs: DirectionalSequences) -> Tensor:
    """Map each direction back to grid order and sum in direction order."""
    idx = direction_indices(*seqs.grid)
    out = None
    for s, i in zip(seqs.seqs, idx):
        back = permute_axis(s, np.argsort(i), axis=2)
        out = back if out is None else add(out, back)
    return out


def scan_directions(seqs: DirectionalSequences, p: SSMParams) -> DirectionalSequences:
    """Apply one shared S6 to all four directions (batched along the slice axis)."""
    c, a, L = seqs.seqs[0].shape
    stacked = concat(seqs.seqs, axis=1)                # [C, 4A, L]
    y = selective_scan(permute(stacked, (1, 2, 0)), p)  # [4A, L, C]
    y = permute(y, (2, 0, 1))
    return DirectionalSequences([getitem(y, (slice(None), slice(k * a, (k + 1) * a)))
                                 for k in range(4)], seqs.grid)


def plane_scan(x: Tensor, plane: str, p: SSMParams, transform=None) -> Tensor:
    """One plane's contribution, restored to ``[C, H, W, D]``.

    ``transform`` replaces the S6 step (used to probe the traversal algebra).
    """
    f = plane_rearrange(x, plane)
    seqs = cross_scan(f, plane_grid(x.shape, plane))
    seqs = transform(seqs) if transform is not None else scan_directions(seqs, p)
    return plane_restore(cross_merge(seqs), plane, x.shape)


def abss_forward(x: Tensor, params: Mapping[str, SSMParams]) -> Tensor:
    """Sum of the sagittal, coronal and axial scans (in that order)."""
    out = None
    for plane in PLANES:
        y = plane_scan(x, plane, params[plane])
        out = y if out is None else add(out, y)
    return out
