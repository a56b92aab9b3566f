"""Segmentation network: SABMamba encoder pyramid and reverse-attention decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import (BlockConfig, conv, conv_shapes, downsample, downsample_shapes, gsc_forward,
                     gsc_shapes, sabmamba_forward, sabmamba_shapes, silu, stem_forward, stem_shapes)
from .tensor import ShapeError, Tensor, add, broadcast_to, clip, mul, neg, sigmoid, trilinear_resize
from .weights import WeightStore, prefixed

REFERENCE_PARAMS = 17.22e6


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (48, 96, 192, 384)
    state_dim: int = 16
    mlp_ratio: float = 4.0
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        ch = self.stage_channels
        if len(ch) == 0:
            raise ValueError("network needs at least one stage")
        if any(c <= 0 for c in ch):
            raise ValueError("stage channels must be positive")
        if any(b != 2 * a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"stage channels must double from stage to stage, got {ch}")
        if self.in_channels <= 0 or self.state_dim <= 0 or self.mlp_ratio <= 0:
            raise ValueError("in_channels, state_dim and mlp_ratio must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def divisor(self) -> int:
        """Spatial extents must be multiples of this."""
        return 2 ** self.num_stages

    def block(self, stage: int) -> BlockConfig:
        return BlockConfig(self.stage_channels[stage - 1], self.mlp_ratio, self.state_dim, eps=self.eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: (tuple(v) if k == "stage_channels" else v) for k, v in d.items()})


@dataclass
class StageOutputs:
    features: list[Tensor]        # f_1 .. f_n
    maps: dict[int, Tensor]       # stage index -> 1-channel logits S_i
    logits: Tensor                # full resolution
    attention: dict[int, Tensor] = field(default_factory=dict)


def weight_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Every learnable tensor of the network, in storage order."""
    ch = cfg.stage_channels
    shapes = prefixed("stem", stem_shapes(cfg.in_channels, ch[0]))
    for i in range(1, cfg.num_stages + 1):
        b = cfg.block(i)
        shapes.update(prefixed(f"enc{i}.gsc", gsc_shapes(b)))
        shapes.update(prefixed(f"enc{i}.sab", sabmamba_shapes(b)))
        if i < cfg.num_stages:
            shapes.update(prefixed(f"down{i}", downsample_shapes(ch[i - 1])))
    shapes.update(prefixed("head", conv_shapes(ch[-1], 1, 1)))
    for i in range(cfg.num_stages - 1, 0, -1):
        b = cfg.block(i)
        c = ch[i - 1]
        shapes.update(prefixed(f"dec{i}.sab_in", sabmamba_shapes(b)))
        shapes.update(prefixed(f"dec{i}.att_conv", conv_shapes(c, c, 3)))
        shapes.update(prefixed(f"dec{i}.sab_out", sabmamba_shapes(b)))
        shapes.update(prefixed(f"dec{i}.out1", conv_shapes(c, c, 3)))
        shapes.update(prefixed(f"dec{i}.out2", conv_shapes(c, 1, 1)))
    shapes.update(prefixed("final", conv_shapes(1, 1, 3)))
    return shapes


def init_weights(cfg: NetworkConfig, seed: int = 0, dtype=None) -> WeightStore:
    return WeightStore.initialise(weight_shapes(cfg), seed=seed, dtype=dtype)


def param_count(cfg: NetworkConfig) -> int:
    return sum(math.prod(shape) for shape, _ in weight_shapes(cfg).values())


# --------------------------------------------------------------------------
# Forward


def _check_input(x: Tensor, cfg: NetworkConfig) -> None:
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected input [{cfg.in_channels}, H, W, D], got {x.shape}")
    if any(n % cfg.divisor for n in x.shape[1:]):
        raise ShapeError(f"spatial extents {x.shape[1:]} must be divisible by {cfg.divisor}")


def encode(x: Tensor, w, cfg: NetworkConfig) -> list[Tensor]:
    """Stem, then GSC and SABMamba per stage with downsampling in between."""
    _check_input(x, cfg)
    h = stem_forward(x, w.scope("stem"))
    feats = []
    for i in range(1, cfg.num_stages + 1):
        b = cfg.block(i)
        h = gsc_forward(h, w.scope(f"enc{i}.gsc"), b)
        h = sabmamba_forward(h, w.scope(f"enc{i}.sab"), b)
        feats.append(h)
        if i < cfg.num_stages:
            h = downsample(h, w.scope(f"down{i}"))
    return feats


def coarse_head(f_last: Tensor, w) -> Tensor:
    return conv(f_last, w.scope("head"))


def reverse_attention(s_up: Tensor) -> Tensor:
    """``1 - sigmoid(S)``: high where the coarse map is not yet confident foreground.

    Evaluated as ``sigmoid(-S)``, which keeps precision where the attention is
    small, then held inside the open interval: past ``|S|`` of about 37 (f64)
    the exact value rounds to 0 or 1. Both steps are monotone, so the map
    stays antitone in ``S`` after rounding.
    """
    fi = np.finfo(s_up.dtype)
    return clip(sigmoid(neg(s_up)), float(fi.tiny), 1.0 - float(fi.epsneg))


def srma_forward(f: Tensor, s_prev: Tensor, w, cfg: BlockConfig, return_attention: bool = False):
    """Refine the coarser map ``s_prev`` with stage features ``f``."""
    if s_prev.ndim != 4 or s_prev.shape[0] != 1:
        raise ShapeError(f"segmentation map must be [1, h, w, d], got {s_prev.shape}")
    if any(a != 2 * b for a, b in zip(f.shape[1:], s_prev.shape[1:])):
        raise ShapeError(f"scale mismatch: features {f.shape[1:]} vs map {s_prev.shape[1:]}")
    up = trilinear_resize(s_prev, f.shape[1:])
    att = reverse_attention(up)
    g = sabmamba_forward(f, w.scope("sab_in"), cfg)
    gated = mul(broadcast_to(att, f.shape), g)
    fr = sabmamba_forward(conv(gated, w.scope("att_conv"), padding=1), w.scope("sab_out"), cfg)
    r = add(fr, g)
    s = conv(silu(conv(r, w.scope("out1"), padding=1)), w.scope("out2"))
    s = add(s, up)
    return (s, att) if return_attention else s


def forward(x: Tensor, w, cfg: NetworkConfig) -> StageOutputs:
    feats = encode(x, w, cfg)
    n = cfg.num_stages
    maps = {n: coarse_head(feats[-1], w)}
    attention = {}
    s = maps[n]
    for i in range(n - 1, 0, -1):
        s, att = srma_forward(feats[i - 1], s, w.scope(f"dec{i}"), cfg.block(i), return_attention=True)
        maps[i] = s
        attention[i] = att
    logits = trilinear_resize(conv(s, w.scope("final"), padding=1), x.shape[1:])
    return StageOutputs(feats, maps, logits, attention)


def predict_mask(logits: Tensor, threshold: float = 0.5) -> np.ndarray:
    """Binary mask ``sigmoid(logit) > threshold``; ties go to background."""
    from .tensor import _sigmoid

    return (_sigmoid(np.asarray(logits.data, dtype=np.float64)) > threshold).astype(np.uint8)
