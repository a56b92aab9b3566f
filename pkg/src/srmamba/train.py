"""Dice + cross-entropy objective, Adam, and the synthetic-sphere overfit run."""
from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .network import NetworkConfig, StageOutputs, forward, init_weights, predict_mask
from .tensor import (NonFiniteError, ShapeError, Tape, Tensor, add, backward, mean, mul, scale,
                     sigmoid, softplus, sub, sum_all)


@dataclass
class LossWeights:
    w_dice: float = 1.0
    w_ce: float = 1.0
    deep_supervision: Mapping[int, float] | float = 1.0
    smooth: float = 1.0

    def __post_init__(self):
        if min(self.w_dice, self.w_ce, self.smooth) < 0:
            raise ValueError("loss weights and smoothing must be nonnegative")
        if self.w_dice + self.w_ce <= 0:
            raise ValueError("w_dice + w_ce must be positive")
        ds = self.deep_supervision
        if (min(ds.values(), default=0) if isinstance(ds, Mapping) else ds) < 0:
            raise ValueError("deep supervision weights must be nonnegative")

    def stage_weight(self, stage: int) -> float:
        ds = self.deep_supervision
        return ds.get(stage, 0.0) if isinstance(ds, Mapping) else float(ds)


def _target_tensor(target, like: Tensor) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != like.shape:
        if t.shape == like.shape[1:]:
            t = t[None]
        else:
            raise ShapeError(f"target shape {t.shape} does not match logits {like.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target must be binary")
    return Tensor(t, dtype=like.dtype)


def dice_ce_terms(logits: Tensor, target, lw: LossWeights | None = None):
    """Return ``(loss, dice_term, ce_term)`` as scalar tensors."""
    lw = lw or LossWeights()
    g = _target_tensor(target, logits)
    p = sigmoid(logits)
    s = lw.smooth
    num = scale(sum_all(mul(p, g)), 2.0) + s
    den = sum_all(p) + (float(g.data.sum()) + s)
    dice = 1.0 - num / den
    # stable BCE with logits: softplus(x) - x*g
    ce = mean(sub(softplus(logits), mul(logits, g)))
    loss = add(scale(dice, lw.w_dice), scale(ce, lw.w_ce))
    return loss, dice, ce


def dice_ce_loss(logits: Tensor, target, lw: LossWeights | None = None) -> Tensor:
    return dice_ce_terms(logits, target, lw)[0]


def downsample_nearest(mask: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour resampling of a ``[H, W, D]`` mask (index ``floor(i * n_in / n_out)``)."""
    mask = np.asarray(mask)
    idx = [np.floor(np.arange(m) * (n / m)).astype(int) for n, m in zip(mask.shape, shape)]
    return mask[np.ix_(*idx)]


def total_loss(outputs: StageOutputs, target, lw: LossWeights | None = None):
    """Deep-supervised loss; also returns the summed dice and ce terms for logging."""
    lw = lw or LossWeights()
    target = np.asarray(target)
    if target.ndim == 4:
        target = target[0]
    loss, dice, ce = dice_ce_terms(outputs.logits, target, lw)
    for stage in sorted(outputs.maps):
        wt = lw.stage_weight(stage)
        if wt == 0:
            continue
        s = outputs.maps[stage]
        l_i, d_i, c_i = dice_ce_terms(s, downsample_nearest(target, s.shape[1:]), lw)
        loss = add(loss, scale(l_i, wt))
        dice = add(dice, scale(d_i, wt))
        ce = add(ce, scale(c_i, wt))
    return loss, dice, ce


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None, st: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``weights``.

    ``grads`` defaults to each tensor's ``.grad`` (missing grads count as zero).
    """
    if grads is None:
        grads = {k: t.grad for k, t in weights.items()}
    for name, t in weights.items():
        g = grads.get(name)
        if g is not None:
            if np.shape(g) != t.shape:
                raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, expected {t.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name!r}")
    st.step += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for name, t in weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        g = np.asarray(g, dtype=t.dtype)
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        st.m[name], st.v[name] = m, v
        t.data -= (st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)).astype(t.dtype)
    return st


# --------------------------------------------------------------------------
# Synthetic overfit


def sphere_volume(shape=(32, 32, 16), radius: float | None = None, noise: float = 0.1, seed: int = 0):
    """A noisy volume with a centred bright ball and its binary mask."""
    shape = tuple(shape)
    if radius is None:
        radius = 0.375 * min(shape)
    centre = [(n - 1) / 2 for n in shape]
    grid = np.meshgrid(*[np.arange(n) - c for n, c in zip(shape, centre)], indexing="ij")
    mask = (sum(g * g for g in grid) <= radius * radius).astype(np.uint8)
    rng = np.random.default_rng(seed)
    image = mask.astype(np.float64) + noise * rng.standard_normal(shape)
    image = (image - image.mean()) / image.std()
    return image, mask


def hard_dice(mask_pred: np.ndarray, mask_true: np.ndarray) -> float:
    inter = float(np.logical_and(mask_pred, mask_true).sum())
    total = float(mask_pred.sum() + mask_true.sum())
    return 1.0 if total == 0 else 2 * inter / total


def train_step(x: Tensor, target, weights, cfg: NetworkConfig, st: AdamState, lw: LossWeights | None = None):
    weights.zero_grad()
    with Tape() as tape:
        out = forward(x, weights, cfg)
        loss, dice, ce = total_loss(out, target, lw)
    backward(loss, tape)
    adam_step(weights, None, st)
    return out, float(loss.item()), float(dice.item()), float(ce.item())


def overfit_sphere(steps: int = 200, size=(32, 32, 16), lr: float = 1e-3, seed: int = 0,
                   cfg: NetworkConfig | None = None, log=None, lw: LossWeights | None = None) -> dict:
    """Fit one synthetic ball volume; returns the final training Dice and loss.

    ``log`` is a writable stream receiving one JSON line per step.
    """
    cfg = cfg or NetworkConfig()
    image, mask = sphere_volume(size, seed=seed)
    x = Tensor(image[None])
    weights = init_weights(cfg, seed=seed)
    st = AdamState(lr=lr)
    t0 = time.perf_counter()
    loss = float("nan")
    for step in range(1, steps + 1):
        _, loss, dice_term, ce_term = train_step(x, mask, weights, cfg, st, lw)
        if log is not None:
            log.write(json.dumps({"step": step, "loss": loss, "dice_term": dice_term,
                                  "ce_term": ce_term}) + "\n")
            log.flush()
    from .tensor import no_grad

    with no_grad():
        out = forward(x, weights, cfg)
    pred = predict_mask(out.logits)[0]
    return {"steps": steps, "size": list(size), "lr": lr, "seed": seed,
            "final_loss": loss, "train_dice": hard_dice(pred, mask),
            "seconds": time.perf_counter() - t0, "weights": weights}


if __name__ == "__main__":  # pragma: no cover
    res = overfit_sphere(log=sys.stderr)
    res.pop("weights")
    print(json.dumps(res))
