"""Token-shift layers that mix each token with its spatial neighbours.

The omnidirectional shift runs four parallel branches during training
(depthwise 5x5, 3x3, 1x1 and identity, each scaled by a learnable alpha) and
collapses them into a single depthwise 5x5 convolution for inference:
smaller kernels zero-pad into the 5x5 grid center-aligned, the identity
becomes a centered delta, so the fused kernel reproduces the branch sum
exactly. Zero padding at the image border in both modes keeps that identity
exact at the edges too.

``uni_shift`` and ``quad_shift`` are the simpler interpolation-style shifts
kept as ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, StateError
from .tensor import (
    Tensor,
    add,
    concat_channels,
    depthwise_conv2d,
    scale,
    select,
    shift2d,
    slice_channels,
    sub,
)


@dataclass
class OmniShiftParams:
    k5: Tensor
    k3: Tensor
    k1: Tensor
    alpha: Tensor  # four branch scales
    fused: Tensor | None = None
    mode: str = "train"

    @property
    def channels(self) -> int:
        return self.k5.data.shape[2]


@dataclass
class QuadShiftParams:
    mix: Tensor  # one interpolation coefficient per channel quarter


@dataclass
class UniShiftParams:
    mix: Tensor  # single coefficient, left neighbour only


def init_omni_shift(C: int, rng: np.random.Generator) -> OmniShiftParams:
    # near-identity start: the identity branch carries the signal, the
    # convolution branches begin as small zero-mean noise
    return OmniShiftParams(
        k5=Tensor(rng.normal(0.0, 1e-3, (5, 5, C)), requires_grad=True),
        k3=Tensor(rng.normal(0.0, 1e-3, (3, 3, C)), requires_grad=True),
        k1=Tensor(rng.normal(0.0, 1e-3, (1, 1, C)), requires_grad=True),
        alpha=Tensor(np.ones(4), requires_grad=True),
    )


def init_quad_shift(C: int) -> QuadShiftParams:
    if C % 4:
        raise ConfigError(f"quad shift needs channels divisible by 4, got {C}")
    return QuadShiftParams(mix=Tensor(np.full(4, 0.5), requires_grad=True))


def init_uni_shift() -> UniShiftParams:
    return UniShiftParams(mix=Tensor(np.array([0.5]), requires_grad=True))


def _pad_center(kernel: np.ndarray, size: int) -> np.ndarray:
    k = kernel.shape[0]
    off = (size - k) // 2
    out = np.zeros((size, size, kernel.shape[2]))
    out[off : off + k, off : off + k] = kernel
    return out


def fused_kernel(p: OmniShiftParams) -> np.ndarray:
    """The single 5x5 kernel equal to the four-branch sum."""
    a = p.alpha.data
    C = p.channels
    delta = np.zeros((5, 5, C))
    delta[2, 2] = 1.0
    return (
        a[0] * p.k5.data
        + a[1] * _pad_center(p.k3.data, 5)
        + a[2] * _pad_center(p.k1.data, 5)
        + a[3] * delta
    )


def fuse(p: OmniShiftParams) -> OmniShiftParams:
    """Consolidate the training branches into one inference kernel.

    Branch kernels are retained on the result for provenance.
    """
    if p.mode != "train":
        raise StateError("fuse: params already fused")
    return replace(p, fused=Tensor(fused_kernel(p)), mode="fused")


def omni_shift_forward(x: Tensor, p: OmniShiftParams) -> Tensor:
    """Apply the shift to an H x W x C tensor."""
    if p.mode == "fused":
        if p.fused is None:
            raise StateError("omni_shift_forward: fused mode without a fused kernel")
        return depthwise_conv2d(x, p.fused)
    b5 = scale(depthwise_conv2d(x, p.k5), select(p.alpha, (0,)))
    b3 = scale(depthwise_conv2d(x, p.k3), select(p.alpha, (1,)))
    b1 = scale(depthwise_conv2d(x, p.k1), select(p.alpha, (2,)))
    bid = scale(x, select(p.alpha, (3,)))
    return add(add(b5, b3), add(b1, bid))


_QUAD_OFFSETS = ((0, 1), (0, -1), (1, 0), (-1, 0))  # left, right, up, down


def quad_shift_forward(x: Tensor, p: QuadShiftParams) -> Tensor:
    """Quarter the channels; each quarter interpolates with one neighbour."""
    C = x.data.shape[2]
    if C % 4:
        raise ConfigError(f"quad shift needs channels divisible by 4, got {C}")
    q = C // 4
    parts = []
    for g, (dy, dx) in enumerate(_QUAD_OFFSETS):
        xg = slice_channels(x, g * q, (g + 1) * q)
        moved = shift2d(xg, dy, dx)
        parts.append(add(xg, scale(sub(moved, xg), select(p.mix, (g,)))))
    out = parts[0]
    for part in parts[1:]:
        out = concat_channels(out, part)
    return out


def uni_shift_forward(x: Tensor, p: UniShiftParams) -> Tensor:
    """Interpolate every channel with the left neighbour (zero at borders)."""
    moved = shift2d(x, 0, 1)
    return add(x, scale(sub(moved, x), select(p.mix, (0,))))


ShiftParams = OmniShiftParams | QuadShiftParams | UniShiftParams


def init_shift(kind: str, C: int, rng: np.random.Generator) -> ShiftParams:
    if kind == "omni":
        return init_omni_shift(C, rng)
    if kind == "quad":
        return init_quad_shift(C)
    if kind == "uni":
        return init_uni_shift()
    raise ConfigError(f"unknown shift kind {kind!r}")


def apply_shift(x: Tensor, p: ShiftParams) -> Tensor:
    if isinstance(p, OmniShiftParams):
        return omni_shift_forward(x, p)
    if isinstance(p, QuadShiftParams):
        return quad_shift_forward(x, p)
    return uni_shift_forward(x, p)


def shift_named_params(p: ShiftParams, prefix: str):
    if isinstance(p, OmniShiftParams):
        return [
            (f"{prefix}.k5", p.k5),
            (f"{prefix}.k3", p.k3),
            (f"{prefix}.k1", p.k1),
            (f"{prefix}.alpha", p.alpha),
        ]
    return [(f"{prefix}.mix", p.mix)]
