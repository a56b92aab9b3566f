"""Composite blocks: stem, GSC, ABM / SABMamba, MLP and downsampling.

Each block is a pure function ``f(x, w, ...)`` of a ``[C, H, W, D]`` volume
and a weight mapping with block-local names. The matching ``*_shapes``
function lists those names with their shapes and init kind.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .abss import PLANES, abss_forward
from .ssm import SSMParams, ssm_shapes
from .tensor import ShapeError, Tensor, add, conv3d, layer_norm, mul, permute, reshape, silu
from .weights import prefixed


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    mlp_ratio: float = 4.0
    state_dim: int = 16
    dw_kernel: int = 3
    gsc_kernel: int = 3
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.state_dim <= 0:
            raise ValueError("state_dim must be positive")

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.channels)))


def conv_shapes(cin: int, cout: int, k: int, groups: int = 1, bias: bool = True) -> dict:
    fan_in = (cin // groups) * k ** 3
    shapes = {"weight": ((cout, cin // groups, k, k, k), ("kaiming", fan_in))}
    if bias:
        shapes["bias"] = ((cout,), ("zeros",))
    return shapes


def norm_shapes(c: int) -> dict:
    return {"gamma": ((c,), ("ones",)), "beta": ((c,), ("zeros",))}


def conv(x: Tensor, w: Mapping[str, Tensor], stride=1, padding=0, groups=1) -> Tensor:
    return conv3d(x, w["weight"], w.get("bias"), stride=stride, padding=padding, groups=groups)


def linear(x: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    """Per-voxel channel mixing, i.e. a 1x1x1 convolution."""
    return conv(x, w)


def channel_norm(x: Tensor, w: Mapping[str, Tensor], eps: float = 1e-5) -> Tensor:
    """LayerNorm over the channel axis of ``[C, H, W, D]``."""
    y = permute(x, (1, 2, 3, 0))
    y = layer_norm(y, x.shape[0], w["gamma"], w["beta"], eps)
    return permute(y, (3, 0, 1, 2))


def instance_norm(x: Tensor, w: Mapping[str, Tensor], eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial axes, then per-channel affine."""
    c = x.shape[0]
    y = reshape(x, (c, -1))
    y = reshape(layer_norm(y, y.shape[1], eps=eps), x.shape)
    gamma = reshape(w["gamma"], (c, 1, 1, 1, 1))
    return conv3d(y, gamma, w["beta"], groups=c)


# --------------------------------------------------------------------------
# ABM and SABMamba


def abm_shapes(cfg: BlockConfig) -> dict:
    C, k = cfg.channels, cfg.dw_kernel
    shapes = {}
    shapes.update(prefixed("in_proj", conv_shapes(C, C, 1)))
    shapes.update(prefixed("dw", conv_shapes(C, C, k, groups=C)))
    shapes.update(prefixed("pw", conv_shapes(C, C, 1)))
    for plane in PLANES:
        shapes.update(prefixed(f"ssm_{plane}", ssm_shapes(C, cfg.state_dim)))
    shapes.update(prefixed("out_norm", norm_shapes(C)))
    shapes.update(prefixed("out_proj", conv_shapes(C, C, 1)))
    return shapes


def ssm_params(w: Mapping[str, Tensor]) -> dict[str, SSMParams]:
    return {plane: SSMParams.from_weights(w.scope(f"ssm_{plane}")) for plane in PLANES}


def abm_forward(x: Tensor, w, cfg: BlockConfig) -> Tensor:
    """Linear, depthwise-separable conv, SiLU, ABSS, LayerNorm, linear."""
    y = linear(x, w.scope("in_proj"))
    y = conv(y, w.scope("dw"), padding=cfg.dw_kernel // 2, groups=cfg.channels)
    y = conv(y, w.scope("pw"))
    y = silu(y)
    y = abss_forward(y, ssm_params(w))
    y = channel_norm(y, w.scope("out_norm"), cfg.eps)
    return linear(y, w.scope("out_proj"))


def mlp_shapes(cfg: BlockConfig) -> dict:
    shapes = prefixed("fc1", conv_shapes(cfg.channels, cfg.hidden, 1))
    shapes.update(prefixed("fc2", conv_shapes(cfg.hidden, cfg.channels, 1)))
    return shapes


def mlp_forward(x: Tensor, w, cfg: BlockConfig) -> Tensor:
    return linear(silu(linear(x, w.scope("fc1"))), w.scope("fc2"))


def sabmamba_shapes(cfg: BlockConfig) -> dict:
    shapes = prefixed("norm1", norm_shapes(cfg.channels))
    shapes.update(prefixed("abm", abm_shapes(cfg)))
    shapes.update(prefixed("norm2", norm_shapes(cfg.channels)))
    shapes.update(prefixed("mlp", mlp_shapes(cfg)))
    return shapes


def sabmamba_forward(x: Tensor, w, cfg: BlockConfig) -> Tensor:
    """``x1 = x + ABM(LN(x))``, then ``x1 + MLP(LN(x1))``."""
    x1 = add(x, abm_forward(channel_norm(x, w.scope("norm1"), cfg.eps), w.scope("abm"), cfg))
    return add(x1, mlp_forward(channel_norm(x1, w.scope("norm2"), cfg.eps), w.scope("mlp"), cfg))


# --------------------------------------------------------------------------
# GSC


def gsc_shapes(cfg: BlockConfig) -> dict:
    C, k = cfg.channels, cfg.gsc_kernel
    shapes = {}
    # no bias ahead of instance norm: it would be subtracted straight back out
    shapes.update(prefixed("conv_a", conv_shapes(C, C, k, bias=False)))
    shapes.update(prefixed("norm_a", norm_shapes(C)))
    shapes.update(prefixed("conv_b", conv_shapes(C, C, 1, bias=False)))
    shapes.update(prefixed("norm_b", norm_shapes(C)))
    shapes.update(prefixed("conv_out", conv_shapes(C, C, k)))
    return shapes


def gsc_forward(x: Tensor, w, cfg: BlockConfig) -> Tensor:
    """Gated spatial convolution: ``x + conv(phi(conv3(x)) * phi(conv1(x)))``."""
    pad = cfg.gsc_kernel // 2
    a = silu(instance_norm(conv(x, w.scope("conv_a"), padding=pad), w.scope("norm_a"), cfg.eps))
    b = silu(instance_norm(conv(x, w.scope("conv_b")), w.scope("norm_b"), cfg.eps))
    return add(x, conv(mul(a, b), w.scope("conv_out"), padding=pad))


# --------------------------------------------------------------------------
# Resolution changes


STEM_KERNEL = 7


def stem_shapes(cin: int, cout: int) -> dict:
    return conv_shapes(cin, cout, STEM_KERNEL)


def _check_even(x: Tensor, what: str) -> None:
    if any(n % 2 for n in x.shape[1:]):
        raise ShapeError(f"{what} needs even spatial extents, got {x.shape[1:]}")


def stem_forward(x: Tensor, w) -> Tensor:
    """Strided 7x7x7 convolution halving every spatial extent."""
    _check_even(x, "stem")
    return conv(x, w, stride=2, padding=STEM_KERNEL // 2)


def downsample_shapes(cin: int) -> dict:
    return conv_shapes(cin, 2 * cin, 2)


def downsample(x: Tensor, w) -> Tensor:
    """Strided 2x2x2 convolution: halve the extents, double the channels."""
    _check_even(x, "downsample")
    return conv(x, w, stride=2)
