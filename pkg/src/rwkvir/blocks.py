"""The residual block pairing a spatial-mix and a channel-mix sub-module.

Spatial mix: layer norm, token shift, three square projections to receptance
R, key K and value V, global WKV attention over the token dimension, then a
sigmoid(R)-gated output projection. Channel mix: layer norm, token shift,
then a gated per-token MLP (K -> squared-ReLU -> V). Each sub-module sits
inside its own residual connection.

With the output projections zero-initialized the whole block is exactly the
identity, which keeps the freshly built network at the global residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .shift import ShiftParams, apply_shift, init_shift, shift_named_params
from .tensor import Tensor, add, layer_norm, matmul, mul, reshape, sigmoid, squared_relu
from .wkv import WkvParams, bi_wkv, re_wkv, uni_wkv

ATTENTION_KINDS = ("re", "bi", "uni")


@dataclass
class SpatialMixParams:
    gamma: Tensor
    beta: Tensor
    shift: ShiftParams
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    attn: list[WkvParams]
    attention: str = "re"


@dataclass
class ChannelMixParams:
    gamma: Tensor
    beta: Tensor
    shift: ShiftParams
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class BlockParams:
    spatial: SpatialMixParams
    channel: ChannelMixParams
    channels: int = field(default=0)


def _proj(C_in: int, C_out: int, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.standard_normal((C_in, C_out)) / np.sqrt(C_in), requires_grad=True)


def init_spatial_mix(
    C: int,
    rng: np.random.Generator,
    attention: str = "re",
    shift_kind: str = "omni",
    recurrence: int = 2,
    zero_output: bool = True,
) -> SpatialMixParams:
    if attention not in ATTENTION_KINDS:
        raise ConfigError(f"unknown attention kind {attention!r}")
    n_attn = recurrence if attention == "re" else 1
    attn = [
        WkvParams(
            w=Tensor(rng.uniform(0.3, 1.3, C), requires_grad=True),
            u=Tensor(rng.uniform(-0.3, 0.3, C), requires_grad=True),
        )
        for _ in range(n_attn)
    ]
    w_o = Tensor(np.zeros((C, C)), requires_grad=True) if zero_output else _proj(C, C, rng)
    return SpatialMixParams(
        gamma=Tensor(np.ones(C), requires_grad=True),
        beta=Tensor(np.zeros(C), requires_grad=True),
        shift=init_shift(shift_kind, C, rng),
        w_r=_proj(C, C, rng),
        w_k=_proj(C, C, rng),
        w_v=_proj(C, C, rng),
        w_o=w_o,
        attn=attn,
        attention=attention,
    )


def init_channel_mix(
    C: int,
    rng: np.random.Generator,
    hidden_ratio: float = 4.0,
    shift_kind: str = "omni",
    zero_output: bool = True,
) -> ChannelMixParams:
    if hidden_ratio < 1:
        raise ConfigError(f"hidden_ratio must be >= 1, got {hidden_ratio}")
    C_h = int(round(hidden_ratio * C))
    w_o = Tensor(np.zeros((C, C)), requires_grad=True) if zero_output else _proj(C, C, rng)
    return ChannelMixParams(
        gamma=Tensor(np.ones(C), requires_grad=True),
        beta=Tensor(np.zeros(C), requires_grad=True),
        shift=init_shift(shift_kind, C, rng),
        w_r=_proj(C, C, rng),
        w_k=_proj(C, C_h, rng),
        w_v=_proj(C_h, C, rng),
        w_o=w_o,
    )


def init_block(
    C: int,
    rng: np.random.Generator,
    attention: str = "re",
    shift_kind: str = "omni",
    recurrence: int = 2,
    hidden_ratio: float = 4.0,
    zero_output: bool = True,
) -> BlockParams:
    return BlockParams(
        spatial=init_spatial_mix(C, rng, attention, shift_kind, recurrence, zero_output),
        channel=init_channel_mix(C, rng, hidden_ratio, shift_kind, zero_output),
        channels=C,
    )


def _shifted_norm(x: Tensor, H: int, W: int, gamma: Tensor, beta: Tensor, shift: ShiftParams):
    C = x.data.shape[1]
    xn = layer_norm(x, gamma, beta)
    xs = apply_shift(reshape(xn, (H, W, C)), shift)
    return reshape(xs, (H * W, C))


def spatial_mix(x: Tensor, H: int, W: int, p: SpatialMixParams) -> Tensor:
    """Token mixing over the whole grid; x is the T x C token sequence."""
    xs = _shifted_norm(x, H, W, p.gamma, p.beta, p.shift)
    r = matmul(xs, p.w_r)
    k = matmul(xs, p.w_k)
    v = matmul(xs, p.w_v)
    if p.attention == "re":
        wkv = re_wkv(k, v, p.attn, (H, W))
    elif p.attention == "bi":
        wkv = bi_wkv(k, v, p.attn[0])
    else:
        wkv = uni_wkv(k, v, p.attn[0])
    return matmul(mul(sigmoid(r), wkv), p.w_o)


def channel_mix(x: Tensor, H: int, W: int, p: ChannelMixParams) -> Tensor:
    """Per-token feature fusion; the value is estimated from the key."""
    xs = _shifted_norm(x, H, W, p.gamma, p.beta, p.shift)
    r = matmul(xs, p.w_r)
    k = matmul(xs, p.w_k)
    v = matmul(squared_relu(k), p.w_v)
    return matmul(mul(sigmoid(r), v), p.w_o)


def r_rwkv_block(x: Tensor, H: int, W: int, p: BlockParams) -> Tensor:
    x1 = add(x, spatial_mix(x, H, W, p.spatial))
    return add(x1, channel_mix(x1, H, W, p.channel))


def block_named_params(p: BlockParams, prefix: str):
    out = [
        (f"{prefix}.spatial.ln.gamma", p.spatial.gamma),
        (f"{prefix}.spatial.ln.beta", p.spatial.beta),
    ]
    out += shift_named_params(p.spatial.shift, f"{prefix}.spatial.shift")
    out += [
        (f"{prefix}.spatial.w_r", p.spatial.w_r),
        (f"{prefix}.spatial.w_k", p.spatial.w_k),
        (f"{prefix}.spatial.w_v", p.spatial.w_v),
        (f"{prefix}.spatial.w_o", p.spatial.w_o),
    ]
    for j, a in enumerate(p.spatial.attn):
        out += [(f"{prefix}.spatial.attn{j}.w", a.w), (f"{prefix}.spatial.attn{j}.u", a.u)]
    out += [
        (f"{prefix}.channel.ln.gamma", p.channel.gamma),
        (f"{prefix}.channel.ln.beta", p.channel.beta),
    ]
    out += shift_named_params(p.channel.shift, f"{prefix}.channel.shift")
    out += [
        (f"{prefix}.channel.w_r", p.channel.w_r),
        (f"{prefix}.channel.w_k", p.channel.w_k),
        (f"{prefix}.channel.w_v", p.channel.w_v),
        (f"{prefix}.channel.w_o", p.channel.w_o),
    ]
    return out
