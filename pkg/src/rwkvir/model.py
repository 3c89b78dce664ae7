"""The 4-level U-shaped restoration network.

Pipeline: a 3x3 input projection (1 -> C), three encoder levels at C, 2C and
4C channels, a bottleneck at 8C, a mirrored decoder with pixel-shuffle
upsampling and skip concatenation (1x1 fusion convs reduce 8C -> 4C and
4C -> 2C; the final decoder level keeps the concatenated 2C), refinement
blocks at 2C, a 3x3 output projection (2C -> 1) and a global residual:
output = input + residual.

Downsampling is a 1x1 convolution halving channels followed by
pixel-unshuffle (net x2 channels, spatial /2); upsampling is pixel-shuffle
followed by a 1x1 convolution (net /2 channels, spatial x2).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import BlockParams, block_named_params, init_block, r_rwkv_block
from .errors import ConfigError, FormatError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    crop2d,
    pad_reflect2d,
    pixel_shuffle,
    pixel_unshuffle,
    reshape,
)

CHECKPOINT_MAGIC = b"WKVIRCKP"
CHECKPOINT_VERSION = 1

# reference sizes from the published model table, used by the params report
PARAM_TARGETS = {"light": 1.16e6, "full": 27.91e6}
FLOP_TARGETS_128 = {"light": 1.52e9, "full": 37.46e9}


@dataclass
class ModelConfig:
    base_channels: int = 48
    blocks: tuple[int, int, int, int] = (4, 6, 6, 8)
    refinement: int = 4
    recurrence: int = 2
    hidden_ratio: float = 4.0
    attention: str = "re"
    shift: str = "omni"
    variant: str = "full"
    pad_mode: str = "reflect"  # or "reject"

    def validate(self) -> None:
        if self.base_channels < 2 or self.base_channels % 2 or len(self.blocks) != 4:
            raise ConfigError("base_channels must be even and >= 2, blocks a 4-tuple")
        if any(n < 1 for n in self.blocks) or self.refinement < 0:
            raise ConfigError("block counts must be positive")
        if self.recurrence < 1:
            raise ConfigError("recurrence must be >= 1")
        if self.pad_mode not in ("reflect", "reject"):
            raise ConfigError(f"unknown pad_mode {self.pad_mode!r}")


def model_config(variant: str, **overrides) -> ModelConfig:
    """Presets matching the published model table.

    The channel-mix expansion differs per variant (4 for full, 6 for light);
    the publication leaves the ratio unstated and these values reconcile the
    reported parameter and FLOP figures.
    """
    if variant == "full":
        cfg = ModelConfig(
            base_channels=48, blocks=(4, 6, 6, 8), refinement=4, recurrence=2,
            hidden_ratio=4.0, variant="full",
        )
    elif variant == "light":
        cfg = ModelConfig(
            base_channels=16, blocks=(1, 1, 4, 1), refinement=1, recurrence=2,
            hidden_ratio=6.0, variant="light",
        )
    else:
        raise ConfigError(f"unknown variant {variant!r} (expected 'light' or 'full')")
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown model option {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@dataclass
class ConvParams:
    kernel: Tensor
    bias: Tensor


def _conv(k: int, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False) -> ConvParams:
    if zero:
        kern = np.zeros((k, k, c_in, c_out))
    else:
        kern = rng.standard_normal((k, k, c_in, c_out)) / np.sqrt(k * k * c_in)
    return ConvParams(
        kernel=Tensor(kern, requires_grad=True),
        bias=Tensor(np.zeros(c_out), requires_grad=True),
    )


@dataclass
class Model:
    config: ModelConfig
    in_conv: ConvParams
    enc1: list[BlockParams]
    down1: ConvParams
    enc2: list[BlockParams]
    down2: ConvParams
    enc3: list[BlockParams]
    down3: ConvParams
    mid: list[BlockParams]
    up3: ConvParams
    fuse3: ConvParams
    dec3: list[BlockParams]
    up2: ConvParams
    fuse2: ConvParams
    dec2: list[BlockParams]
    up1: ConvParams
    dec1: list[BlockParams]
    refine: list[BlockParams]
    out_conv: ConvParams
    seed: int = 0
    _names: list = field(default_factory=list, repr=False)

    def named_params(self):
        if not self._names:
            self._names = _collect_named_params(self)
        return self._names

    def forward(self, x: Tensor) -> Tensor:
        return forward(self, x)


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Construct a model with deterministic, seed-controlled initialization."""
    config.validate()
    rng = np.random.default_rng(seed)
    C = config.base_channels
    n1, n2, n3, n4 = config.blocks

    def blocks(n, c):
        return [
            init_block(
                c, rng,
                attention=config.attention,
                shift_kind=config.shift,
                recurrence=config.recurrence,
                hidden_ratio=config.hidden_ratio,
            )
            for _ in range(n)
        ]

    model = Model(
        config=config,
        in_conv=_conv(3, 1, C, rng),
        enc1=blocks(n1, C),
        down1=_conv(1, C, C // 2, rng),
        enc2=blocks(n2, 2 * C),
        down2=_conv(1, 2 * C, C, rng),
        enc3=blocks(n3, 4 * C),
        down3=_conv(1, 4 * C, 2 * C, rng),
        mid=blocks(n4, 8 * C),
        up3=_conv(1, 2 * C, 4 * C, rng),
        fuse3=_conv(1, 8 * C, 4 * C, rng),
        dec3=blocks(n3, 4 * C),
        up2=_conv(1, C, 2 * C, rng),
        fuse2=_conv(1, 4 * C, 2 * C, rng),
        dec2=blocks(n2, 2 * C),
        up1=_conv(1, C // 2, C, rng),
        dec1=blocks(n1, 2 * C),
        refine=blocks(config.refinement, 2 * C),
        out_conv=_conv(3, 2 * C, 1, rng, zero=True),  # start at the global residual
        seed=seed,
    )
    return model


def _collect_named_params(m: Model):
    out = [("in_conv.kernel", m.in_conv.kernel), ("in_conv.bias", m.in_conv.bias)]

    def add_blocks(name, blks):
        for i, b in enumerate(blks):
            out.extend(block_named_params(b, f"{name}.block{i}"))

    def add_conv(name, cp):
        out.append((f"{name}.kernel", cp.kernel))
        out.append((f"{name}.bias", cp.bias))

    add_blocks("enc1", m.enc1)
    add_conv("down1", m.down1)
    add_blocks("enc2", m.enc2)
    add_conv("down2", m.down2)
    add_blocks("enc3", m.enc3)
    add_conv("down3", m.down3)
    add_blocks("mid", m.mid)
    add_conv("up3", m.up3)
    add_conv("fuse3", m.fuse3)
    add_blocks("dec3", m.dec3)
    add_conv("up2", m.up2)
    add_conv("fuse2", m.fuse2)
    add_blocks("dec2", m.dec2)
    add_conv("up1", m.up1)
    add_blocks("dec1", m.dec1)
    add_blocks("refine", m.refine)
    add_conv("out_conv", m.out_conv)
    return out


def _run_blocks(x: Tensor, blks: list[BlockParams]) -> Tensor:
    H, W, C = x.data.shape
    t = reshape(x, (H * W, C))
    for b in blks:
        t = r_rwkv_block(t, H, W, b)
    return reshape(t, (H, W, C))


def forward(m: Model, image: Tensor) -> Tensor:
    """Restore an H x W x 1 image; output has the input's exact shape."""
    if image.data.ndim != 3 or image.data.shape[2] != 1:
        raise ShapeError(f"forward: expected H x W x 1, got {image.data.shape}")
    H, W, _ = image.data.shape
    ph = (-H) % 8
    pw = (-W) % 8
    if ph or pw:
        if m.config.pad_mode == "reject":
            raise ShapeError(f"forward: {H}x{W} not divisible by 8")
        x = pad_reflect2d(image, 0, ph, 0, pw)
    else:
        x = image

    f0 = conv2d(x, m.in_conv.kernel, m.in_conv.bias)
    e1 = _run_blocks(f0, m.enc1)
    d1 = pixel_unshuffle(conv2d(e1, m.down1.kernel, m.down1.bias))
    e2 = _run_blocks(d1, m.enc2)
    d2 = pixel_unshuffle(conv2d(e2, m.down2.kernel, m.down2.bias))
    e3 = _run_blocks(d2, m.enc3)
    d3 = pixel_unshuffle(conv2d(e3, m.down3.kernel, m.down3.bias))
    mid = _run_blocks(d3, m.mid)

    u3 = conv2d(pixel_shuffle(mid), m.up3.kernel, m.up3.bias)
    c3 = conv2d(concat_channels(u3, e3), m.fuse3.kernel, m.fuse3.bias)
    g3 = _run_blocks(c3, m.dec3)
    u2 = conv2d(pixel_shuffle(g3), m.up2.kernel, m.up2.bias)
    c2 = conv2d(concat_channels(u2, e2), m.fuse2.kernel, m.fuse2.bias)
    g2 = _run_blocks(c2, m.dec2)
    u1 = conv2d(pixel_shuffle(g2), m.up1.kernel, m.up1.bias)
    c1 = concat_channels(u1, e1)  # final level keeps the concatenated 2C
    g1 = _run_blocks(c1, m.dec1)
    r = _run_blocks(g1, m.refine)
    residual = conv2d(r, m.out_conv.kernel, m.out_conv.bias)
    out = add(x, residual)
    if ph or pw:
        out = crop2d(out, 0, H, 0, W)
    return out


def count_params(model: Model) -> int:
    return sum(t.size for _, t in model.named_params())


def param_breakdown(model: Model) -> dict[str, int]:
    """Parameter totals grouped by top-level stage."""
    groups: dict[str, int] = {}
    for name, t in model.named_params():
        groups.setdefault(name.split(".")[0], 0)
        groups[name.split(".")[0]] += t.size
    return groups


def _block_flops(T: int, C: int, cfg: ModelConfig) -> int:
    # multiply-adds: depthwise shift convs, projections, 7*T*C per WKV pass
    shift = T * C * (25 + 9 + 1)
    passes = cfg.recurrence if cfg.attention == "re" else 1
    spatial = shift + 4 * T * C * C + passes * 7 * T * C
    C_h = int(round(cfg.hidden_ratio * C))
    channel = shift + T * C * C * 2 + 2 * T * C * C_h
    return spatial + channel


def estimate_flops(model: Model, H: int, W: int) -> int:
    """Multiply-add estimate for one forward pass on an H x W image.

    Counts convolutions (H*W*k*k*Cin*Cout), linear projections (T*Cin*Cout)
    and 7*T*C per bidirectional attention pass; normalizations, activations
    and elementwise work are excluded.
    """
    cfg = model.config
    C = cfg.base_channels
    n1, n2, n3, n4 = cfg.blocks
    total = 0

    def conv(h, w, k, ci, co):
        return h * w * k * k * ci * co

    total += conv(H, W, 3, 1, C)
    total += n1 * _block_flops(H * W, C, cfg)
    total += conv(H, W, 1, C, C // 2)
    h2, w2 = H // 2, W // 2
    total += n2 * _block_flops(h2 * w2, 2 * C, cfg)
    total += conv(h2, w2, 1, 2 * C, C)
    h3, w3 = H // 4, W // 4
    total += n3 * _block_flops(h3 * w3, 4 * C, cfg)
    total += conv(h3, w3, 1, 4 * C, 2 * C)
    h4, w4 = H // 8, W // 8
    total += n4 * _block_flops(h4 * w4, 8 * C, cfg)
    total += conv(h3, w3, 1, 2 * C, 4 * C)  # up3
    total += conv(h3, w3, 1, 8 * C, 4 * C)  # fuse3
    total += n3 * _block_flops(h3 * w3, 4 * C, cfg)
    total += conv(h2, w2, 1, C, 2 * C)  # up2
    total += conv(h2, w2, 1, 4 * C, 2 * C)  # fuse2
    total += n2 * _block_flops(h2 * w2, 2 * C, cfg)
    total += conv(H, W, 1, C // 2, C)  # up1
    total += n1 * _block_flops(H * W, 2 * C, cfg)
    total += cfg.refinement * _block_flops(H * W, 2 * C, cfg)
    total += conv(H, W, 3, 2 * C, 1)
    return total


def save_checkpoint(
    path,
    model: Model,
    iteration: int = 0,
    seed: int = 0,
    adam_state: dict | None = None,
) -> None:
    """Versioned binary container: manifest (name, shape, offset) + raw
    little-endian float64 tensor payloads."""
    entries = []
    blobs = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, t in model.named_params():
        push(name, t.data)
    adam_meta = None
    if adam_state is not None:
        for name, arr in adam_state["m"].items():
            push(f"adam.m.{name}", arr)
        for name, arr in adam_state["v"].items():
            push(f"adam.v.{name}", arr)
        adam_meta = {"step": adam_state["step"]}

    config = asdict(model.config)
    config["blocks"] = list(config["blocks"])
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "iteration": iteration,
        "seed": seed,
        "model_seed": model.seed,
        "adam": adam_meta,
        "tensors": entries,
    }
    meta_bytes = json.dumps(meta).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(meta_bytes)).tobytes())
        fh.write(meta_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Rebuild the model from the config echo and restore every tensor
    bit-exactly. Returns (model, meta) where meta includes any Adam state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint file (magic {blob[:8]!r})", offset=0)
    version = int(np.frombuffer(blob[8:12], dtype=np.uint32)[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    meta_len = int(np.frombuffer(blob[12:20], dtype=np.uint64)[0])
    meta = json.loads(blob[20 : 20 + meta_len].decode())
    data_start = 20 + meta_len

    cfg_dict = dict(meta["config"])
    cfg_dict["blocks"] = tuple(cfg_dict["blocks"])
    config = ModelConfig(**cfg_dict)
    model = build(config, seed=meta.get("model_seed", 0))

    arrays = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        end = start + 8 * n
        if end > len(blob):
            raise FormatError(
                f"checkpoint truncated: tensor {entry['name']} needs bytes up to {end}, "
                f"file has {len(blob)}",
                offset=len(blob),
            )
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()

    for name, t in model.named_params():
        if name not in arrays:
            raise FormatError(f"checkpoint missing tensor {name}")
        if arrays[name].shape != t.data.shape:
            raise FormatError(
                f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {t.data.shape}"
            )
        t.data = arrays[name]

    adam = None
    if meta.get("adam") is not None:
        adam = {
            "step": meta["adam"]["step"],
            "m": {n[len("adam.m."):]: a for n, a in arrays.items() if n.startswith("adam.m.")},
            "v": {n[len("adam.v."):]: a for n, a in arrays.items() if n.startswith("adam.v.")},
        }
    info = {
        "iteration": meta["iteration"],
        "seed": meta["seed"],
        "config": config,
        "adam": adam,
    }
    return model, info
