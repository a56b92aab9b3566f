"""Central-difference gradient checks and the per-op gradient suite.

Every check runs in f64. A function under test maps a list of tensors to a
scalar tensor; vector-valued ops are reduced with a fixed random cotangent
so that every output element contributes with a distinct weight.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import precision
from .tensor import Tape, Tensor, backward, no_grad


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    checked: int = 0
    worst: tuple | None = None   # (input index, flat coordinate, analytic, numeric)

    def __getitem__(self, key):
        # dict-style access: report["pass"], report["max_rel_err"]
        return self.passed if key == "pass" else getattr(self, key)


def rel_err(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def analytic_grads(f: Callable, xs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in xs:
        x.grad = None
        x.requires_grad = True
    with Tape() as tape:
        y = f(*xs)
    if y.size != 1:
        raise T.ShapeError(f"gradient check needs a scalar function, got shape {y.shape}")
    backward(y, tape)
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]


def _central(f, xs, flat, i, h) -> float:
    orig = flat[i]
    with no_grad():
        flat[i] = orig + h
        fp = float(f(*xs).item())
        flat[i] = orig - h
        fm = float(f(*xs).item())
    flat[i] = orig
    return (fp - fm) / (2 * h)


def _ridders(f, xs, flat, i, h, shrink=1.4, ntab=8) -> tuple[float, float]:
    """Central differences at shrinking steps, extrapolated to zero step.

    Returns ``(estimate, error estimate)``. The estimate is chosen by the
    tableau's own error estimate, never by comparison with the analytic gradient.
    """
    s2 = shrink * shrink
    a = np.zeros((ntab, ntab))
    a[0, 0] = _central(f, xs, flat, i, h)
    best, err = a[0, 0], np.inf
    for k in range(1, ntab):
        h /= shrink
        a[0, k] = _central(f, xs, flat, i, h)
        fac = s2
        for j in range(1, k + 1):
            a[j, k] = (a[j - 1, k] * fac - a[j - 1, k - 1]) / (fac - 1)
            fac *= s2
            e = max(abs(a[j, k] - a[j - 1, k]), abs(a[j, k] - a[j - 1, k - 1]))
            if e <= err:
                err, best = e, a[j, k]
        if abs(a[k, k] - a[k - 1, k - 1]) >= 2 * err:
            break
    return float(best), float(err)


def _extrapolated(f, xs, flat, i, h) -> float:
    # strongly curved coordinates want a small first step, tiny gradients a
    # large one; keep whichever tableau is more self-consistent
    runs = [_ridders(f, xs, flat, i, h0) for h0 in (h, h / 10)]
    return min(runs, key=lambda r: r[1])[0]


def finite_diff_check(f: Callable, x, h: float = 1e-6, tol: float = 1e-4,
                      indices: Sequence[np.ndarray] | None = None,
                      extrapolate: bool = False) -> GradReport:
    """Compare tape gradients of scalar ``f(*xs)`` with central differences.

    ``x`` is one tensor or a list of tensors (all f64). ``indices`` optionally
    restricts the probed flat coordinates per input (a single array when ``x``
    is one tensor); default is all of them.
    With ``extrapolate`` each coordinate uses Ridders' extrapolation starting
    from step ``h``, which copes with gradients spanning many magnitudes.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    if isinstance(x, Tensor) and indices is not None and np.ndim(indices) == 1:
        indices = [indices]
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks require f64 tensors")
    grads = analytic_grads(f, xs)
    worst, max_err, count = None, 0.0, 0
    for k, t in enumerate(xs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size) if indices is None else np.asarray(indices[k], dtype=np.intp)
        for i in idx:
            num = _extrapolated(f, xs, flat, i, h) if extrapolate else _central(f, xs, flat, i, h)
            ana = float(grads[k].reshape(-1)[i])
            e = float(rel_err(ana, num))
            count += 1
            if worst is None or e > max_err:
                max_err, worst = e, (k, int(i), ana, num)
    return GradReport(max_err, bool(max_err < tol), count, worst)


def sample_indices(xs: Sequence[Tensor], rng: np.random.Generator, per_input: int | None) -> list[np.ndarray]:
    out = []
    for t in xs:
        n = t.size
        if per_input is None or n <= per_input:
            out.append(np.arange(n))
        else:
            out.append(np.sort(rng.choice(n, size=per_input, replace=False)))
    return out


# --------------------------------------------------------------------------
# The suite


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)


def _contract(out: Tensor, r: np.ndarray) -> Tensor:
    """Scalar ``sum(out * r)`` with a fixed random cotangent ``r``."""
    return T.sum_all(T.mul(out, Tensor(r, dtype=np.float64)))


def _reduced(op: Callable, rng) -> Callable:
    cache = {}

    def f(*xs):
        out = op(*xs)
        if "r" not in cache:
            cache["r"] = rng.uniform(-1, 1, size=out.shape)
        return _contract(out, cache["r"])

    return f


@dataclass
class Case:
    name: str
    tol: float
    build: Callable          # rng -> (f, xs)
    per_input: int | None = None
    h: float = 1e-6


def _pointwise_cases():
    def unary_case(fn, lo=-3.0, hi=3.0):
        def build(rng):
            return _reduced(lambda x: T.unary(x, fn), rng), [_leaf(rng, (3, 4), lo, hi)]
        return Case(f"pointwise.{fn}", 1e-4, build)

    def binary_case(fn):
        def build(rng):
            a = _leaf(rng, (2, 5))
            b = _leaf(rng, (2, 5), 0.5, 2.0) if fn == "div" else _leaf(rng, (2, 5))
            return _reduced(lambda x, y: T.pointwise(x, fn, y), rng), [a, b]
        return Case(f"pointwise.{fn}", 1e-4, build)

    cases = [unary_case(fn) for fn in ("sigmoid", "silu", "softplus", "exp", "neg")]
    cases.append(unary_case("log", 0.2, 3.0))
    cases += [binary_case(fn) for fn in ("add", "sub", "mul", "div")]

    def scale_build(rng):
        s = float(rng.uniform(-2, 2))
        return _reduced(lambda x: T.scale(T.shift(x, 0.3), s), rng), [_leaf(rng, (4, 3))]

    cases.append(Case("pointwise.scale_shift", 1e-4, scale_build))

    def clip_build(rng):
        # entries kept at least 0.1 from the bounds so no probe crosses a kink
        x = rng.uniform(0.1, 0.9, (3, 4)) + rng.choice([-1.0, 0.0, 1.0], (3, 4))
        return _reduced(lambda x: T.clip(x, 0.0, 1.0), rng), [T.Tensor(x, dtype=np.float64)]

    cases.append(Case("pointwise.clip", 1e-4, clip_build))
    return cases


def _shape_cases():
    def perm(rng):
        return _reduced(lambda x: T.permute(T.reshape(x, (3, 2, 4)), (2, 0, 1)), rng), [_leaf(rng, (6, 4))]

    def paxis(rng):
        p = rng.permutation(5)
        return _reduced(lambda x: T.permute_axis(x, p, 1), rng), [_leaf(rng, (2, 5, 3))]

    def bcast(rng):
        return _reduced(lambda x: T.broadcast_to(x, (3, 4, 2)), rng), [_leaf(rng, (3, 1, 2))]

    def cat(rng):
        return (_reduced(lambda a, b: T.getitem(T.concat([a, b], axis=1), (slice(None), slice(1, 6))), rng),
                [_leaf(rng, (2, 3)), _leaf(rng, (2, 4))])

    def reduce(rng):
        return (lambda x: T.add(T.sum_all(T.mul(x, x)), T.mean(x))), [_leaf(rng, (3, 3))]

    return [Case("shape.permute_reshape", 1e-4, perm), Case("shape.permute_axis", 1e-4, paxis),
            Case("shape.broadcast_to", 1e-4, bcast), Case("shape.concat_getitem", 1e-4, cat),
            Case("reduce.sum_mean", 1e-4, reduce)]


def _matmul_case():
    def build(rng):
        m, k, n = rng.integers(1, 6, size=3)
        return _reduced(T.matmul, rng), [_leaf(rng, (m, k)), _leaf(rng, (k, n))]
    return Case("matmul", 1e-4, build)


def _conv_cases():
    def build(rng, stride, padding, groups, k):
        cin, cout = 2 * groups, 2 * groups
        x = _leaf(rng, (cin, 4, 5, 4))
        w = _leaf(rng, (cout, cin // groups, k, k, k))
        b = _leaf(rng, (cout,))
        op = lambda x, w, b: T.conv3d(x, w, b, stride=stride, padding=padding, groups=groups)  # noqa: E731
        return _reduced(op, rng), [x, w, b]

    return [
        Case("conv3d.k3_pad1", 1e-4, lambda r: build(r, 1, 1, 1, 3), per_input=40),
        Case("conv3d.k2_stride2_grouped", 1e-4, lambda r: build(r, 2, 0, 2, 2), per_input=40),
        Case("conv3d.k1", 1e-4, lambda r: build(r, 1, 0, 1, 1), per_input=40),
    ]


def _layer_norm_case():
    def build(rng):
        n = 5
        return (_reduced(lambda x, g, b: T.layer_norm(x, n, g, b), rng),
                [_leaf(rng, (3, n), -2, 2), _leaf(rng, (n,), 0.5, 1.5), _leaf(rng, (n,))])
    return Case("layer_norm", 1e-4, build)


def _trilinear_case():
    def build(rng):
        src = tuple(int(v) for v in rng.integers(1, 5, size=3))
        dst = tuple(int(v) for v in rng.integers(1, 7, size=3))
        return _reduced(lambda x: T.trilinear_resize(x, dst), rng), [_leaf(rng, (2, *src))]
    return Case("trilinear_resize", 1e-4, build)


def _scan_cases():
    from .ssm import init_ssm_params, scan, selective_scan

    def raw(rng):
        nb, L, d, N = 2, int(rng.integers(1, 7)), 3, 4
        u = _leaf(rng, (nb, L, d))
        delta = _leaf(rng, (nb, L, d), 0.05, 1.0)
        A = _leaf(rng, (d, N), -2.0, -0.1)
        B, C, D = _leaf(rng, (nb, L, N)), _leaf(rng, (nb, L, N)), _leaf(rng, (d,))
        return _reduced(scan, rng), [u, delta, A, B, C, D]

    def full(rng):
        d, N, L = 3, 4, int(rng.integers(2, 8))
        p = init_ssm_params(d, N, rng, dtype=np.float64)
        p.b_delta.data[:] = rng.uniform(0.3, 1.0, d)
        leaves = [getattr(p, k) for k in p.FIELDS]
        u = _leaf(rng, (2, L, d))

        return _reduced(lambda u, *_: selective_scan(u, p), rng), [u, *leaves]

    return [Case("selective_scan.kernel", 1e-4, raw), Case("selective_scan", 1e-4, full)]


def _composite_cases():
    from .abss import abss_forward
    from .blocks import (BlockConfig, abm_shapes, gsc_forward, gsc_shapes, sabmamba_forward,
                         sabmamba_shapes, ssm_params)
    from .network import NetworkConfig, srma_forward, weight_shapes
    from .train import dice_ce_loss
    from .weights import WeightStore

    # weights are perturbed in place, so each op simply closes over its store
    def store(shapes, rng):
        w = WeightStore.initialise(shapes, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        for name, t in w.items():
            if name.endswith(".b_delta"):
                # order-one step sizes; at the init's tiny steps A barely matters and
                # its gradient drowns in finite-difference noise
                t.data[:] = rng.uniform(0.3, 1.0, t.shape)
        return w

    def pick(w, rng, k=4, where=""):
        names = [n for n in w if where in n]
        sel = sorted(rng.choice(len(names), size=min(k, len(names)), replace=False))
        return [w[names[i]] for i in sel]

    def abss(rng):
        w = store(abm_shapes(BlockConfig(2, state_dim=3)), rng)
        x = _leaf(rng, (2, 3, 3, 2))
        return _reduced(lambda x, *_: abss_forward(x, ssm_params(w)), rng), [x, *pick(w, rng, where="ssm_")]

    # channel LayerNorm over only two channels saturates to +-1 and starves
    # everything upstream of gradient, so LN-bearing blocks get four channels
    def sab(rng):
        cfg = BlockConfig(4, state_dim=3)
        w = store(sabmamba_shapes(cfg), rng)
        x = _leaf(rng, (4, 2, 2, 2))
        return _reduced(lambda x, *_: sabmamba_forward(x, w, cfg), rng), [x, *pick(w, rng)]

    def gsc(rng):
        cfg = BlockConfig(2)
        w = store(gsc_shapes(cfg), rng)
        x = _leaf(rng, (2, 4, 4, 4))
        return _reduced(lambda x, *_: gsc_forward(x, w, cfg), rng), [x, *pick(w, rng)]

    def srma(rng):
        ncfg = NetworkConfig(stage_channels=(4, 8), state_dim=2)
        w = store({k: v for k, v in weight_shapes(ncfg).items() if k.startswith("dec1.")}, rng)
        f = _leaf(rng, (4, 4, 4, 2))
        s_prev = _leaf(rng, (1, 2, 2, 1), -2, 2)
        op = lambda f, s, *_: srma_forward(f, s, w.scope("dec1"), ncfg.block(1))  # noqa: E731
        return _reduced(op, rng), [f, s_prev, *pick(w, rng)]

    def loss(rng):
        logits = _leaf(rng, (1, 8, 8, 8), -3, 3)
        target = (rng.random((8, 8, 8)) < 0.4).astype(np.uint8)
        return (lambda z: dice_ce_loss(z, target)), [logits]

    # deeper graphs carry more rounding in f, so a wider step balances better
    return [
        Case("abss_forward", 1e-3, abss, per_input=48, h=1e-4),
        Case("sabmamba_forward", 1e-3, sab, per_input=48, h=1e-4),
        Case("gsc_forward", 1e-3, gsc, per_input=48, h=1e-4),
        Case("srma_forward", 1e-3, srma, per_input=48, h=1e-4),
        Case("dice_ce_loss", 1e-4, loss, per_input=128, h=1e-4),
    ]


def suite_cases() -> list[Case]:
    return (_pointwise_cases() + _shape_cases() + [_matmul_case()] + _conv_cases()
            + [_layer_norm_case(), _trilinear_case()] + _scan_cases() + _composite_cases())


@dataclass
class SuiteResult:
    name: str
    tol: float
    reports: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.reports)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def to_dict(self) -> dict:
        return {"op": self.name, "tol": self.tol, "instances": len(self.reports),
                "max_rel_err": self.max_rel_err, "pass": self.passed}


def run_suite(instances: int = 3, seed: int = 0, only: Sequence[str] | None = None, log=None) -> list[SuiteResult]:
    """Run every case on ``instances`` random draws; deterministic in ``seed``."""
    results = []
    with precision("f64"):
        for ci, case in enumerate(suite_cases()):
            if only and not any(case.name.startswith(o) for o in only):
                continue
            res = SuiteResult(case.name, case.tol)
            t0 = time.perf_counter()
            for k in range(instances):
                rng = np.random.default_rng([seed, ci, k])
                f, xs = case.build(rng)
                idx = sample_indices(xs, rng, case.per_input)
                res.reports.append(finite_diff_check(f, xs, h=case.h, tol=case.tol, indices=idx))
            results.append(res)
            if log is not None:
                status = "ok" if res.passed else "FAIL"
                log.write(f"{status:4s} {case.name:28s} max_rel_err={res.max_rel_err:.2e} "
                          f"({time.perf_counter() - t0:.1f}s)\n")
    return results
