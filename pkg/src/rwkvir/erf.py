"""Effective receptive field maps.

Backpropagates from the center output pixel to the input over a batch of
random images, accumulates absolute input gradients and normalizes the mean
map to peak 1. Coverage is the fraction of pixels whose normalized response
exceeds a small threshold, which turns the usual "how dark is the picture"
reading into a number.

Probe models pair one attention kind with one token-shift kind behind
pointwise projections, so the map shows the receptive field of that
combination alone: the causal kernel must leave exact zeros after the scan
position, while the recurrent bidirectional kernel reaches every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockParams, init_block, r_rwkv_block, spatial_mix
from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, matmul, reshape, select

COVERAGE_THRESHOLD = 1e-4

VARIANTS = {
    "uni-wkv": "uni",
    "bi-wkv": "bi",
    "re-wkv": "re",
    "uni": "uni",
    "quad": "quad",
    "omni": "omni",
    "uni-shift": "uni",
    "quad-shift": "quad",
    "omni-shift": "omni",
}


def parse_variant(text: str) -> tuple[str, str]:
    """Parse '<attention>+<shift>' combos such as 're-wkv+omni'."""
    try:
        attn_raw, shift_raw = text.split("+", 1)
        attention = {"uni-wkv": "uni", "bi-wkv": "bi", "re-wkv": "re"}[attn_raw.strip()]
        shift = VARIANTS[shift_raw.strip()]
        if shift not in ("uni", "quad", "omni"):
            raise KeyError(shift_raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(
            f"bad variant {text!r}; want e.g. 're-wkv+omni', 'bi-wkv+quad', 'uni-wkv+uni'"
        ) from exc
    return attention, shift


@dataclass
class ErfMap:
    values: np.ndarray  # H x W, normalized to max 1 (all zeros if no response)
    samples: int
    variant: str = ""

    def coverage(self, threshold: float = COVERAGE_THRESHOLD) -> float:
        return float(np.mean(self.values > threshold))


@dataclass
class ProbeModel:
    """Affine in/out projections around one token-mixing unit.

    By default the unit is the spatial mix alone (shift + attention + gate):
    the block's residual bypass would dominate the center pixel's gradient
    and hide the attention field the probe is meant to show. `use_block=True`
    keeps the full residual block instead.

    The in-projection carries a bias: a pure 1 -> C linear map would make
    every token's feature rank one, and layer norm is scale-invariant along
    that direction, which silences input gradients down to the eps floor.
    """

    w_in: Tensor
    b_in: Tensor
    block: BlockParams
    w_out: Tensor
    use_block: bool = False

    def forward(self, x: Tensor) -> Tensor:
        H, W, cin = x.data.shape
        T = H * W
        t = matmul(reshape(x, (T, cin)), self.w_in)
        t = add(t, Tensor(np.tile(self.b_in.data, (T, 1))))
        if self.use_block:
            t = r_rwkv_block(t, H, W, self.block)
        else:
            t = spatial_mix(t, H, W, self.block.spatial)
        t = matmul(t, self.w_out)
        return reshape(t, (H, W, self.w_out.data.shape[1]))


def build_probe(
    attention: str,
    shift: str,
    channels: int = 8,
    recurrence: int = 2,
    seed: int = 0,
    use_block: bool = False,
) -> ProbeModel:
    rng = np.random.default_rng(seed)
    block = init_block(
        channels, rng,
        attention=attention,
        shift_kind=shift,
        recurrence=recurrence,
        zero_output=False,  # a zero output projection would kill the probe signal
    )
    return ProbeModel(
        w_in=Tensor(rng.standard_normal((1, channels)), requires_grad=True),
        b_in=Tensor(rng.standard_normal(channels), requires_grad=True),
        block=block,
        w_out=Tensor(rng.standard_normal((channels, 1)) / np.sqrt(channels), requires_grad=True),
        use_block=use_block,
    )


def erf_map(forward_fn, inputs, center: tuple[int, int] | None = None, variant: str = "") -> ErfMap:
    """Mean absolute input gradient of the center output pixel."""
    if not inputs:
        raise ShapeError("erf_map: need at least one input image")
    H, W = inputs[0].shape
    if center is None:
        center = (H // 2, W // 2)
    ch, cw = center
    if not (0 <= ch < H and 0 <= cw < W):
        raise ShapeError(f"erf_map: center {center} outside {H}x{W}")
    acc = np.zeros((H, W))
    for img in inputs:
        x = Tensor(np.asarray(img, dtype=np.float64)[:, :, None], requires_grad=True)
        y = forward_fn(x)
        select(y, (ch, cw, 0)).backward()
        if x.grad is None:
            raise ConfigError("erf_map: model does not propagate gradients to its input")
        acc += np.abs(x.grad[:, :, 0])
    acc /= len(inputs)
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    return ErfMap(values=acc, samples=len(inputs), variant=variant)


def erf_inputs(size: int, samples: int = 8, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.random((size, size)) for _ in range(samples)]


def erf_compare(
    variants,
    size: int = 32,
    samples: int = 8,
    seed: int = 0,
    channels: int = 8,
    recurrence: int = 2,
) -> list[ErfMap]:
    """One probe ERF map per '<attention>+<shift>' combo, shared inputs and seed."""
    inputs = erf_inputs(size, samples, seed)
    maps = []
    for text in variants:
        attention, shift = parse_variant(text)
        probe = build_probe(attention, shift, channels=channels, recurrence=recurrence, seed=seed)
        maps.append(erf_map(probe.forward, inputs, variant=text))
    return maps
