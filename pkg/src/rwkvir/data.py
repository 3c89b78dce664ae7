"""Synthetic degradation, image I/O and dataset plumbing.

Low-quality inputs are generated from high-quality images on the fly:
k-space truncation (2-D DFT, keep a centered block of coefficients, inverse
transform), additive Gaussian noise, or dose-scaled Poisson noise. Images
travel as H x W float64 arrays in [0, 1]; binary PGM (P5) is the only file
format, chosen because round trips are bit-predictable.

The DFT is a radix-2 FFT for power-of-two lengths with a direct-DFT fallback
for other sizes; the fallback doubles as the verification oracle in tests.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# discrete Fourier transform


def _fft_pow2(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative radix-2 transform along the last axis."""
    n = a.shape[-1]
    levels = n.bit_length() - 1
    # bit-reversal permutation
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    for _ in range(levels):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    out = a[..., rev].astype(np.complex128)
    sign = 2j if inverse else -2j
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * np.pi * np.arange(half) / size)
        blocks = out.reshape(*out.shape[:-1], n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return out


def _dft_direct(a: np.ndarray, inverse: bool) -> np.ndarray:
    n = a.shape[-1]
    jk = np.outer(np.arange(n), np.arange(n))
    sign = 2j if inverse else -2j
    mat = np.exp(sign * np.pi * jk / n)
    return a.astype(np.complex128) @ mat


def fft1d(a: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    a = np.moveaxis(np.asarray(a), axis, -1)
    n = a.shape[-1]
    if n & (n - 1) == 0 and n > 0:
        out = _fft_pow2(a, inverse)
    else:
        out = _dft_direct(a, inverse)
    if inverse:
        out = out / n
    return np.moveaxis(out, -1, axis)


def fft2(a: np.ndarray) -> np.ndarray:
    return fft1d(fft1d(a, axis=0), axis=1)


def ifft2(a: np.ndarray) -> np.ndarray:
    return fft1d(fft1d(a, axis=0, inverse=True), axis=1, inverse=True)


# ---------------------------------------------------------------------------
# degradations


@dataclass
class DegradationSpec:
    """Parametric LQ-from-HQ transform: kind plus one strength parameter."""

    kind: str  # kspace_truncation | gaussian_noise | poisson_scaled
    param: float
    seed: int = 0
    photon_scale: float = 1e4

    def validate(self) -> None:
        if self.kind == "kspace_truncation":
            if not 0.0 < self.param <= 1.0:
                raise ConfigError(f"kspace fraction must be in (0, 1], got {self.param}")
        elif self.kind == "gaussian_noise":
            if self.param < 0:
                raise ConfigError(f"noise sigma must be >= 0, got {self.param}")
        elif self.kind == "poisson_scaled":
            if self.param < 1:
                raise ConfigError(f"dose factor must be >= 1, got {self.param}")
        else:
            raise ConfigError(f"unknown degradation kind {self.kind!r}")


_SPEC_ALIASES = {"kspace": "kspace_truncation", "gauss": "gaussian_noise", "poisson": "poisson_scaled"}


def parse_degradation(text: str, seed: int = 0) -> DegradationSpec:
    """Parse 'kspace:0.0625', 'gauss:0.05' or 'poisson:4'."""
    try:
        kind, raw = text.split(":", 1)
        param = float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad degradation spec {text!r} (want kind:value)") from exc
    kind = _SPEC_ALIASES.get(kind, kind)
    spec = DegradationSpec(kind=kind, param=param, seed=seed)
    spec.validate()
    return spec


def kspace_mask(H: int, W: int, fraction: float) -> np.ndarray:
    """Boolean mask of retained coefficients: a centered block holding
    floor-to-even(sqrt(fraction) * side) frequencies per axis.

    Centering follows fftshift arithmetic: index i is kept when
    ((i + n/2) mod n) - n/2 lies in [-h/2, h/2).
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")

    def axis_keep(n: int) -> np.ndarray:
        h = int(np.sqrt(fraction) * n)
        h -= h % 2
        s = (np.arange(n) + n // 2) % n - n // 2
        return (s >= -h // 2) & (s < h // 2)

    return axis_keep(H)[:, None] & axis_keep(W)[None, :]


def degrade_kspace(hq: np.ndarray, fraction: float) -> np.ndarray:
    """Low-pass the image by zero-filling high k-space frequencies."""
    H, W = hq.shape
    if H % 2 or W % 2:
        raise ConfigError(f"degrade_kspace needs even sides, got {H}x{W}")
    spectrum = fft2(hq) * kspace_mask(H, W, fraction)
    return np.clip(ifft2(spectrum).real, 0.0, 1.0)


def sample_poisson(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poisson draws: CDF inversion below mean 50, normal approximation above."""
    lam = np.asarray(lam, dtype=np.float64)
    out = np.zeros(lam.shape)
    small = lam < 50.0
    ls = lam[small]
    if ls.size:
        u = rng.random(ls.shape)
        p = np.exp(-ls)
        cdf = p.copy()
        k = np.zeros(ls.shape)
        count = 0
        active = u > cdf
        while active.any():
            count += 1
            p = p * ls / count
            cdf += p
            k[active] += 1.0
            active = u > cdf
        out[small] = k
    lb = lam[~small]
    if lb.size:
        z = rng.standard_normal(lb.shape)
        out[~small] = np.maximum(np.round(lb + np.sqrt(lb) * z), 0.0)
    return out


def degrade(hq: np.ndarray, spec: DegradationSpec, item_seed: int | None = None) -> np.ndarray:
    spec.validate()
    seed = spec.seed if item_seed is None else item_seed
    if spec.kind == "kspace_truncation":
        return degrade_kspace(hq, spec.param)
    rng = np.random.default_rng(seed)
    if spec.kind == "gaussian_noise":
        if spec.param == 0.0:
            return hq.copy()
        return np.clip(hq + rng.normal(0.0, spec.param, hq.shape), 0.0, 1.0)
    # poisson_scaled: counts at reduced dose, rescaled back to [0, 1]
    S = spec.photon_scale
    counts = sample_poisson(hq * S / spec.param, rng)
    return np.clip(counts * spec.param / S, 0.0, 1.0)


def stable_seed(base: int, item_id: str) -> int:
    digest = hashlib.sha256(f"{base}:{item_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# PGM I/O (binary P5, 8- or 16-bit grayscale)


def save_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    if not (0 < maxval < 65536):
        raise ConfigError(f"maxval must be in [1, 65535], got {maxval}")
    q = np.clip(np.round(np.asarray(image) * maxval), 0, maxval)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            if blob[pos : pos + 1].isspace():
                pos += 1
            elif blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("unexpected end of header", offset=start)
        return blob[start:pos]

    magic = token()
    if magic != b"P5":
        raise FormatError(f"unsupported magic {magic!r} (only binary P5)", offset=0)
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise FormatError("non-numeric header field", offset=pos) from exc
    if not (0 < maxval < 65536):
        raise FormatError(f"maxval {maxval} out of range", offset=pos)
    pos += 1  # single whitespace byte after maxval
    bytes_per = 2 if maxval > 255 else 1
    expected = width * height * bytes_per
    payload = blob[pos : pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"payload has {len(payload)} bytes, expected {expected}", offset=pos + len(payload)
        )
    dtype = ">u2" if bytes_per == 2 else "u1"
    img = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# pairs, patches, manifests


@dataclass
class ImagePair:
    lq: np.ndarray
    hq: np.ndarray
    id: str


def sample_patches(pair: ImagePair, size: int, count: int, seed: int) -> list[ImagePair]:
    """Aligned random crops, reproducible from the seed."""
    H, W = pair.hq.shape
    if size > min(H, W):
        raise ConfigError(f"patch size {size} exceeds image {H}x{W}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        oy = int(rng.integers(0, H - size + 1))
        ox = int(rng.integers(0, W - size + 1))
        out.append(
            ImagePair(
                lq=pair.lq[oy : oy + size, ox : ox + size].copy(),
                hq=pair.hq[oy : oy + size, ox : ox + size].copy(),
                id=f"{pair.id}#{i}",
            )
        )
    return out


def read_manifest(path) -> list[tuple[str, str, str]]:
    """Plain-text dataset manifest: one `id<TAB>hq_path<TAB>split` per line."""
    rows = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            item_id, hq_path, split = parts
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: split {split!r} not in {SPLITS}")
            if not os.path.isabs(hq_path):
                hq_path = os.path.join(base, hq_path)
            rows.append((item_id, hq_path, split))
    return rows


def load_dataset(manifest_path, spec: DegradationSpec) -> dict[str, list[ImagePair]]:
    """Load HQ images and degrade on the fly with per-item derived seeds."""
    out: dict[str, list[ImagePair]] = {s: [] for s in SPLITS}
    for item_id, hq_path, split in read_manifest(manifest_path):
        if not os.path.exists(hq_path):
            raise DataError(f"missing image {hq_path} (id {item_id})")
        hq = load_pgm(hq_path)
        lq = degrade(hq, spec, item_seed=stable_seed(spec.seed, item_id))
        out[split].append(ImagePair(lq=lq, hq=hq, id=item_id))
    return out


# ---------------------------------------------------------------------------
# synthetic phantoms for desk-scale experiments


def synthetic_phantom(size: int, rng: np.random.Generator) -> np.ndarray:
    """A test image of smooth background (ramp plus broad blobs) carrying
    strong, crisp, non-overlapping shapes - rectangles and disks of either
    sign placed on a jittered 3x3 grid - plus one thin line, normalized into
    [0.05, 0.95].

    Every image draws from the same structural family, so the ringing that
    frequency truncation leaves behind is a shared, learnable pattern; the
    grid placement keeps shapes from overlapping, which keeps each edge at
    full contrast after normalization."""
    y, x = np.mgrid[0:size, 0:size] / size
    img = 0.35 + 0.15 * (rng.random() * x + rng.random() * y)
    for _ in range(3):
        cx, cy = rng.random(2)
        img += 0.15 * rng.random() * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / 0.05)
    cells = [(i, j) for i in range(3) for j in range(3)]
    rng.shuffle(cells)
    for ci, cj in cells[: int(rng.integers(6, 9))]:
        cx = (cj + 0.3 + 0.4 * rng.random()) / 3
        cy = (ci + 0.3 + 0.4 * rng.random()) / 3
        amp = rng.choice([-1.0, 1.0]) * (0.35 + 0.25 * rng.random())
        if rng.random() < 0.5:
            half = 0.04 + 0.06 * rng.random(2)
            mask = (np.abs(x - cx) < half[0]) & (np.abs(y - cy) < half[1])
        else:
            rad = 0.04 + 0.06 * rng.random()
            mask = (x - cx) ** 2 + (y - cy) ** 2 <= rad**2
        img = np.where(mask, img + amp, img)
    pos = int(rng.random() * 0.85 * size)
    if rng.random() < 0.5:
        img[pos : pos + max(1, size // 32), :] += 0.35
    else:
        img[:, pos : pos + max(1, size // 32)] += 0.35
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return 0.05 + 0.9 * img


def write_synthetic_dataset(
    directory,
    n_train: int,
    n_val: int,
    size: int = 64,
    seed: int = 0,
    n_test: int = 0,
) -> str:
    """Write phantom PGMs plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    counts = [("train", n_train), ("val", n_val), ("test", n_test)]
    for split, n in counts:
        for i in range(n):
            item_id = f"{split}{i:03d}"
            name = f"{item_id}.pgm"
            save_pgm(os.path.join(directory, name), synthetic_phantom(size, rng))
            rows.append(f"{item_id}\t{name}\t{split}")
    manifest = os.path.join(directory, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    return manifest
