"""Selective state-space scan (S6) with an analytic reverse-time backward.

Recurrence, per batch item, step t, channel c, state n::

    h[t,c,n] = exp(delta[t,c] * A[c,n]) * h[t-1,c,n] + delta[t,c] * B[t,n] * u[t,c]
    y[t,c]   = sum_n C[t,n] * h[t,c,n] + D[c] * u[t,c]

``delta``, ``B`` and ``C`` are produced from the input by linear projections
(softplus on ``delta``), which is what makes the scan selective.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numba
import numpy as np

from . import config
from .tensor import (NonFiniteError, ShapeError, Tensor, _make, broadcast_to, exp, matmul,
                     neg, reshape, softplus)


@numba.njit(cache=True, nogil=True)
def _scan_fwd(u, delta, A, B, C, D, y):
    nb, L, d = u.shape
    N = A.shape[1]
    h = np.zeros((d, N), dtype=u.dtype)
    for b in range(nb):
        h[:] = 0
        for t in range(L):
            for c in range(d):
                dl = delta[b, t, c]
                uc = u[b, t, c]
                acc = 0.0
                for n in range(N):
                    hn = np.exp(dl * A[c, n]) * h[c, n] + dl * B[b, t, n] * uc
                    h[c, n] = hn
                    acc += C[b, t, n] * hn
                y[b, t, c] = acc + D[c] * uc


@numba.njit(cache=True, nogil=True)
def _scan_bwd(u, delta, A, B, C, D, gy, gu, gdelta, gA, gB, gC, gD):
    # states are recomputed here rather than kept from the forward pass;
    # gA, gD hold per-batch partials that the caller reduces in batch order
    nb, L, d = u.shape
    N = A.shape[1]
    hs = np.zeros((L + 1, d, N), dtype=u.dtype)
    decay = np.empty((L, d, N), dtype=u.dtype)
    gh = np.zeros((d, N), dtype=u.dtype)
    for b in range(nb):
        for t in range(L):
            for c in range(d):
                dl = delta[b, t, c]
                uc = u[b, t, c]
                for n in range(N):
                    a = np.exp(dl * A[c, n])
                    decay[t, c, n] = a
                    hs[t + 1, c, n] = a * hs[t, c, n] + dl * B[b, t, n] * uc
        gh[:] = 0
        for t in range(L - 1, -1, -1):
            for c in range(d):
                dl = delta[b, t, c]
                uc = u[b, t, c]
                g = gy[b, t, c]
                gD[b, c] += g * uc
                gu_acc = g * D[c]
                gdl = 0.0
                for n in range(N):
                    a = decay[t, c, n]
                    ght = gh[c, n] + g * C[b, t, n]
                    gC[b, t, n] += g * hs[t + 1, c, n]
                    ga = ght * hs[t, c, n]
                    gdl += ga * a * A[c, n] + ght * B[b, t, n] * uc
                    gA[b, c, n] += ga * a * dl
                    gB[b, t, n] += ght * dl * uc
                    gu_acc += ght * dl * B[b, t, n]
                    gh[c, n] = ght * a
                gu[b, t, c] = gu_acc
                gdelta[b, t, c] = gdl


def _batch_slices(nb: int, parts: int):
    parts = max(1, min(parts, nb))
    edges = np.linspace(0, nb, parts + 1).astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(parts)]


def _run(kernel, args, batched, nb):
    """Call ``kernel`` once per contiguous batch slice, one slice per worker.

    Batch items are independent, so the split never changes any result.
    """
    slices = _batch_slices(nb, config.workers())

    def call(sl):
        kernel(*[a[sl] if bt else a for a, bt in zip(args, batched)])

    if len(slices) == 1:
        call(slices[0])
        return
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        list(pool.map(call, slices))


def scan_forward_array(u, delta, A, B, C, D) -> np.ndarray:
    y = np.empty_like(u)
    _run(_scan_fwd, (u, delta, A, B, C, D, y), (1, 1, 0, 1, 1, 0, 1), u.shape[0])
    if not np.isfinite(y).all():
        raise NonFiniteError("selective scan produced non-finite state")
    return y


def scan_backward_array(u, delta, A, B, C, D, gy):
    nb, L, d = u.shape
    N = A.shape[1]
    gu = np.empty_like(u)
    gdelta = np.empty_like(u)
    gA = np.zeros((nb, d, N), dtype=u.dtype)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros((nb, d), dtype=u.dtype)
    _run(_scan_bwd, (u, delta, A, B, C, D, gy, gu, gdelta, gA, gB, gC, gD),
         (1, 1, 0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1), nb)
    return gu, gdelta, _ordered_sum(gA), gB, gC, _ordered_sum(gD)


def _ordered_sum(parts: np.ndarray) -> np.ndarray:
    out = parts[0].copy()
    for p in parts[1:]:
        out += p
    return out


def scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable S6 recurrence on precomputed ``delta``, ``A``, ``B``, ``C``.

    Shapes: ``u, delta [nb, L, d]``, ``B, C [nb, L, N]``, ``A [d, N]``, ``D [d]``.
    """
    if u.ndim != 3 or delta.shape != u.shape:
        raise ShapeError(f"scan: u {u.shape} and delta {delta.shape} must be [nb, L, d]")
    nb, L, d = u.shape
    if A.ndim != 2 or A.shape[0] != d:
        raise ShapeError(f"scan: A shape {A.shape} incompatible with d={d}")
    N = A.shape[1]
    if B.shape != (nb, L, N) or C.shape != (nb, L, N) or D.shape != (d,):
        raise ShapeError("scan: B, C must be [nb, L, N] and D [d]")
    if L < 1:
        raise ShapeError("scan: empty sequence")
    arrs = [np.ascontiguousarray(t.data) for t in (u, delta, A, B, C, D)]
    y = scan_forward_array(*arrs)

    def back(g):
        return scan_backward_array(*arrs, np.ascontiguousarray(g))

    return _make(y, "selective_scan", (u, delta, A, B, C, D), back)


# --------------------------------------------------------------------------
# Parameters


@dataclass
class SSMParams:
    """Learned parameters of one selective scan over ``d`` channels with state size ``N``."""

    a_log: Tensor    # [d, N]; effective A = -exp(a_log)
    d_skip: Tensor   # [d]
    w_delta: Tensor  # [d, d]
    b_delta: Tensor  # [d]
    w_b: Tensor      # [d, N]
    w_c: Tensor      # [d, N]

    FIELDS = ("a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c")

    @property
    def d(self) -> int:
        return self.a_log.shape[0]

    @property
    def N(self) -> int:
        return self.a_log.shape[1]

    @classmethod
    def from_weights(cls, w: Mapping[str, Tensor]) -> "SSMParams":
        return cls(**{f: w[f] for f in cls.FIELDS})

    def A(self) -> Tensor:
        return neg(exp(self.a_log))


def ssm_shapes(d: int, N: int) -> dict[str, tuple]:
    """Parameter shapes paired with init kind, in storage order."""
    return {
        "a_log": ((d, N), ("a_log",)),
        "d_skip": ((d,), ("ones",)),
        "w_delta": ((d, d), ("uniform", d ** -0.5)),
        "b_delta": ((d,), ("dt_bias", 1e-3, 1e-1)),
        "w_b": ((d, N), ("uniform", d ** -0.5)),
        "w_c": ((d, N), ("uniform", d ** -0.5)),
    }


def init_a_log(shape) -> np.ndarray:
    # S4D-real: A[c, n] = -(n + 1)
    d, N = shape
    return np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (d, 1))


def init_dt_bias(shape, rng: np.random.Generator, lo=1e-3, hi=1e-1) -> np.ndarray:
    """Inverse-softplus of step sizes drawn log-uniformly from ``[lo, hi]``."""
    dt = np.exp(rng.uniform(np.log(lo), np.log(hi), size=shape))
    return dt + np.log(-np.expm1(-dt))


def init_ssm_params(d: int, N: int, rng: np.random.Generator, dtype=None) -> SSMParams:
    from .weights import init_array

    arrays = {name: init_array(shape, kind, rng) for name, (shape, kind) in ssm_shapes(d, N).items()}
    return SSMParams(**{k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in arrays.items()})


# --------------------------------------------------------------------------
# Selective scan


def _linear_rows(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = out + broadcast_to(reshape(b, (1, b.shape[0])), out.shape)
    return out


def projections(u: Tensor, p: SSMParams):
    """Input-dependent ``delta [nb,L,d]``, ``B [nb,L,N]`` and ``C [nb,L,N]``."""
    nb, L, d = u.shape
    flat = reshape(u, (nb * L, d))
    delta = softplus(_linear_rows(flat, p.w_delta, p.b_delta))
    B = matmul(flat, p.w_b)
    C = matmul(flat, p.w_c)
    return (reshape(delta, (nb, L, d)), reshape(B, (nb, L, p.N)), reshape(C, (nb, L, p.N)))


def selective_scan(u: Tensor, p: SSMParams) -> Tensor:
    """Run the selective scan over ``u`` of shape ``[L, d]`` or ``[nb, L, d]``."""
    squeeze = u.ndim == 2
    if squeeze:
        u = reshape(u, (1,) + u.shape)
    if u.ndim != 3 or u.shape[2] != p.d:
        raise ShapeError(f"selective_scan: input {u.shape} does not match d={p.d}")
    delta, B, C = projections(u, p)
    y = scan(u, delta, p.A(), B, C, p.d_skip)
    return reshape(y, y.shape[1:]) if squeeze else y


def selective_scan_backward(u: Tensor, p: SSMParams, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * selective_scan(u, p))`` for ``u`` and every field of ``p``."""
    from .tensor import Tape, backward, mul, sum_all

    leaves = {"u": Tensor(u.data, requires_grad=True, dtype=u.dtype)}
    for f in SSMParams.FIELDS:
        leaves[f] = Tensor(getattr(p, f).data, requires_grad=True, dtype=u.dtype)
    q = SSMParams(**{f: leaves[f] for f in SSMParams.FIELDS})
    with Tape() as tape:
        y = selective_scan(leaves["u"], q)
        up = Tensor(np.asarray(upstream), dtype=u.dtype)
        loss = sum_all(mul(y, up))
    backward(loss, tape)
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}
