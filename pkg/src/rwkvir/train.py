"""The optimization loop: Adam on mean absolute error with cosine-annealed
learning rate, aligned random patch batches, periodic validation PSNR and
checkpointing.

The published recipe (patch 128, batch 4, 30K iterations, lr 2e-4 -> 1e-6)
is configurable; the desk-scale defaults below (patch 64, batch 2, 2000
iterations) keep runs in CPU-minutes. Adam betas/eps are the standard
defaults, which the publication leaves unstated. Every random draw comes
from one seeded generator, so a (seed, config, data) triple fully determines
the loss curve.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import ImagePair
from .errors import ConfigError, NumericError
from .metrics import psnr
from .model import Model, save_checkpoint
from .tensor import Tensor, abs_, mean, no_grad, sub


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the gradient is sign(pred - target) / N."""
    return mean(abs_(sub(pred, target)))


def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Cosine annealing with exact endpoints; steps past `total` clamp."""
    if total < 1:
        raise ConfigError("cosine_lr: total must be >= 1")
    if step <= 0:
        return lr_init
    if step >= total:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / total))


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.zero_grad()

    def grads_finite(self) -> bool:
        return all(t.grad is None or np.isfinite(t.grad).all() for _, t in self.params)

    def clip_grads(self, max_norm: float) -> None:
        sq = sum(float((t.grad**2).sum()) for _, t in self.params if t.grad is not None)
        norm = math.sqrt(sq)
        if norm > max_norm > 0:
            scale = max_norm / norm
            for _, t in self.params:
                if t.grad is not None:
                    t.grad *= scale

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, t in self.params:
            g = t.grad if t.grad is not None else 0.0
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.step_count = state["step"]
        for name, _ in self.params:
            self.m[name] = state["m"][name]
            self.v[name] = state["v"][name]


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 2
    patch: int = 64
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    validate_every: int = 0  # 0: only at the end (when val data exists)
    checkpoint_every: int = 0  # 0: only at the end
    grad_clip: float = 0.0  # 0: off; debugging aid for overflow hunts

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_size < 1 or self.patch < 8:
            raise ConfigError("bad training config (iterations/batch/patch)")
        if self.lr_final > self.lr_init:
            raise ConfigError("lr_final must not exceed lr_init")


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)  # (iter, lr, l1, val_psnr or None)
    final_val_psnr: float | None = None
    checkpoint_path: str | None = None

    def loss_curve(self) -> list[float]:
        return [r[2] for r in self.rows]

    def csv_rows(self) -> list[str]:
        out = ["iter,lr,l1,val_psnr"]
        for it, lr, l1, vp in self.rows:
            out.append(f"{it},{lr:.10g},{l1:.17g},{'' if vp is None else f'{vp:.6f}'}")
        return out


def validate_psnr(model: Model, pairs: list[ImagePair]) -> float:
    """Mean PSNR of restored-vs-reference over full validation images."""
    vals = []
    with no_grad():
        for pair in pairs:
            restored = model.forward(Tensor(pair.lq[:, :, None])).data[:, :, 0]
            vals.append(psnr(np.clip(restored, 0.0, 1.0), pair.hq))
    return float(np.mean(vals))


def train(
    model: Model,
    train_pairs: list[ImagePair],
    val_pairs: list[ImagePair],
    cfg: TrainConfig,
    out_dir: str | None = None,
    log=None,
) -> TrainResult:
    cfg.validate()
    if not train_pairs:
        raise ConfigError("train: empty training split")
    adam = Adam(model.named_params(), cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    ckpt_path = os.path.join(out_dir, "checkpoint.bin") if out_dir else None
    bad_streak = 0

    for it in range(cfg.iterations):
        lr = cosine_lr(it, cfg.iterations, cfg.lr_init, cfg.lr_final)
        adam.zero_grad()
        loss_sum = 0.0
        for _ in range(cfg.batch_size):
            pair = train_pairs[int(rng.integers(len(train_pairs)))]
            H, W = pair.hq.shape
            size = min(cfg.patch, H, W)
            oy = int(rng.integers(0, H - size + 1))
            ox = int(rng.integers(0, W - size + 1))
            lq = pair.lq[oy : oy + size, ox : ox + size]
            hq = pair.hq[oy : oy + size, ox : ox + size]
            pred = model.forward(Tensor(lq[:, :, None]))
            loss = l1_loss(pred, Tensor(hq[:, :, None]))
            # seed 1/batch so accumulated gradients average over the batch
            loss.backward(np.asarray(1.0 / cfg.batch_size))
            loss_sum += float(loss.data)
        loss_val = loss_sum / cfg.batch_size

        if not math.isfinite(loss_val):
            bad_streak += 1
            if bad_streak >= 2:
                _dump_diagnostics(model, out_dir, it)
                raise NumericError(f"non-finite loss at iterations {it - 1} and {it}")
        else:
            bad_streak = 0

        if cfg.grad_clip > 0:
            adam.clip_grads(cfg.grad_clip)
        if adam.grads_finite():
            adam.step(lr)
        elif log:
            log(f"iter {it}: non-finite gradients, step skipped")

        val = None
        if val_pairs and cfg.validate_every and (it + 1) % cfg.validate_every == 0:
            val = validate_psnr(model, val_pairs)
        result.rows.append((it, lr, loss_val, val))
        if log and (it % 50 == 0 or val is not None):
            log(f"iter {it}: lr={lr:.3g} l1={loss_val:.5f}" + (f" val_psnr={val:.3f}" if val else ""))
        if ckpt_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_path, model, iteration=it + 1, seed=cfg.seed, adam_state=adam.state())

    if val_pairs:
        result.final_val_psnr = validate_psnr(model, val_pairs)
    if ckpt_path:
        save_checkpoint(
            ckpt_path, model, iteration=cfg.iterations, seed=cfg.seed, adam_state=adam.state()
        )
        result.checkpoint_path = ckpt_path
    return result


def _dump_diagnostics(model: Model, out_dir: str | None, it: int) -> None:
    lines = [f"non-finite loss at iteration {it}", "parameter norms:"]
    for name, t in model.named_params():
        lines.append(
            f"  {name}: |data|max={np.abs(t.data).max():.3e}"
            + (f" |grad|max={np.abs(t.grad).max():.3e}" if t.grad is not None else "")
        )
    text = "\n".join(lines)
    if out_dir:
        with open(os.path.join(out_dir, "diagnostics.txt"), "w") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# run-config files: plain `key=value` lines with `#` comments

RUN_CONFIG_KEYS = {
    "variant": str,
    "attention": str,
    "shift": str,
    "recurrence": int,
    "hidden_ratio": float,
    "iterations": int,
    "batch": int,
    "patch": int,
    "lr_init": float,
    "lr_final": float,
    "seed": int,
    "validate_every": int,
    "checkpoint_every": int,
    "grad_clip": float,
    "degrade": str,
}

RUN_CONFIG_DEFAULTS = {
    "variant": "light",
    "attention": "re",
    "shift": "omni",
    "recurrence": 2,
    "iterations": 2000,
    "batch": 2,
    "patch": 64,
    "lr_init": 2e-4,
    "lr_final": 1e-6,
    "seed": 0,
    "validate_every": 0,
    "checkpoint_every": 0,
    "grad_clip": 0.0,
    "degrade": "kspace:0.0625",
}


def parse_run_config(path) -> dict:
    """Strictly typed key=value parsing; unknown keys are errors."""
    values = dict(RUN_CONFIG_DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in RUN_CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = RUN_CONFIG_KEYS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def train_config_from_run(values: dict) -> TrainConfig:
    cfg = TrainConfig(
        iterations=values["iterations"],
        batch_size=values["batch"],
        patch=values["patch"],
        lr_init=values["lr_init"],
        lr_final=values["lr_final"],
        seed=values["seed"],
        validate_every=values["validate_every"],
        checkpoint_every=values["checkpoint_every"],
        grad_clip=values["grad_clip"],
    )
    cfg.validate()
    return cfg
