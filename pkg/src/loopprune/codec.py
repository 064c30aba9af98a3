"""Desk-scale codec-artifact harness.

Stands in for a real encoder's data path: 8-bit single-component images
are degraded by quantizing 8x8 orthonormal block-DCT coefficients with a
step derived from a QP-like level, which reproduces the blocking
artifacts an in-loop filter targets.  A histogram-entropy rate proxy of
the quantized indices enables rate-distortion bookkeeping without an
entropy coder.  This is a proxy, not an encoder: no claim of equivalence
to any reference codec is made.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng
from .errors import ConfigError, DimensionError


def _dct_matrix() -> np.ndarray:
    c = np.zeros((8, 8))
    for k in range(8):
        scale = math.sqrt((1.0 if k == 0 else 2.0) / 8.0)
        for i in range(8):
            c[k, i] = scale * math.cos((2 * i + 1) * k * math.pi / 16.0)
    return c


_DCT = _dct_matrix()


def dct8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of one 8x8 block."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (8, 8):
        raise DimensionError(f"dct8 expects an 8x8 block, got {block.shape}")
    return _DCT @ block @ _DCT.T


def idct8(coefficients: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct8`."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (8, 8):
        raise DimensionError(f"idct8 expects an 8x8 block, got {coefficients.shape}")
    return _DCT.T @ coefficients @ _DCT


@dataclass(frozen=True)
class QuantSpec:
    """QP-like quantization level with the derived step 2^((qp-4)/6)."""

    qp: int

    @property
    def step(self) -> float:
        return 2.0 ** ((self.qp - 4) / 6.0)


def _pad_to_blocks(img: np.ndarray) -> np.ndarray:
    """Edge-replicate so both dimensions are multiples of 8."""
    h, w = img.shape
    ph = (-h) % 8
    pw = (-w) % 8
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    return img


def _blockify(img: np.ndarray) -> np.ndarray:
    """(h, w) -> (n_blocks, 8, 8) in row-major block order."""
    h, w = img.shape
    return img.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)


def _unblockify(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.reshape(h // 8, w // 8, 8, 8).transpose(0, 2, 1, 3).reshape(h, w)


def _block_dct(blocks: np.ndarray) -> np.ndarray:
    return np.einsum("ij,njk,lk->nil", _DCT, blocks, _DCT)


def _block_idct(coefs: np.ndarray) -> np.ndarray:
    return np.einsum("ji,njk,kl->nil", _DCT, coefs, _DCT)


def quantize_coefficients(coefficients: np.ndarray, step: float) -> np.ndarray:
    """Uniform quantize-dequantize: round(c / step) * step."""
    return np.round(np.asarray(coefficients, dtype=np.float64) / step) * step


def degrade(image: np.ndarray, q: QuantSpec) -> np.ndarray:
    """Quantize every 8x8 block's DCT coefficients with step q.step.

    Deterministic: dct -> round(c / step) * step -> idct -> clamp to
    [0, 255] -> round to 8-bit.  Non-multiple-of-8 images are padded by
    edge replication and cropped back.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise DimensionError(f"degrade expects a non-empty 2-D image, got shape {image.shape}")
    h, w = image.shape
    padded = _pad_to_blocks(image.astype(np.float64))
    blocks = _blockify(padded)
    coefs = quantize_coefficients(_block_dct(blocks), q.step)
    rec = _block_idct(coefs)
    out = _unblockify(rec, *padded.shape)[:h, :w]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def entropy_bits(symbols: np.ndarray) -> float:
    """Total Shannon entropy of a symbol array: per-symbol histogram
    entropy in bits times the symbol count."""
    symbols = np.asarray(symbols)
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / symbols.size
    return float(-(p * np.log2(p)).sum()) * symbols.size


def rate_proxy(image: np.ndarray, q: QuantSpec) -> float:
    """Shannon entropy, in bits, of the image's quantized coefficient
    indices, summed over all blocks."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise DimensionError(f"rate_proxy expects a non-empty 2-D image, got shape {image.shape}")
    padded = _pad_to_blocks(image.astype(np.float64))
    indices = np.round(_block_dct(_blockify(padded)) / q.step).astype(np.int64)
    return entropy_bits(indices)


# -- PGM I/O ------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise DimensionError(f"PGM image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise ConfigError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval; '#' comments allowed between tokens.
    tokens = []
    i = 2
    while len(tokens) < 3 and i < len(raw):
        ch = raw[i:i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if len(tokens) < 3:
        raise ConfigError(f"{path}: truncated PGM header")
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ConfigError(f"{path}: only maxval 255 PGM is supported, got {maxval}")
    i += 1  # single whitespace after maxval
    if len(raw) - i < w * h:
        raise ConfigError(f"{path}: truncated PGM payload")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=i)
    return data.reshape(h, w).copy()


# -- patch extraction and dataset generation ----------------------------------

def extract_patches(degraded: np.ndarray, original: np.ndarray,
                    patch_size: int, stride: int, seed: int = 0):
    """Aligned (degraded, original, y, x) patch tuples on a stride grid.

    The pair order is shuffled deterministically by ``seed``.
    """
    degraded = np.asarray(degraded)
    original = np.asarray(original)
    if degraded.shape != original.shape:
        raise DimensionError(f"patch pair shape mismatch: {degraded.shape} vs {original.shape}")
    h, w = degraded.shape
    if patch_size > h or patch_size > w:
        raise ConfigError(f"patch size {patch_size} does not fit in a {h}x{w} image")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    coords = [(y, x)
              for y in range(0, h - patch_size + 1, stride)
              for x in range(0, w - patch_size + 1, stride)]
    order = Rng(seed).permutation(len(coords))
    out = []
    for i in order:
        y, x = coords[i]
        out.append((degraded[y:y + patch_size, x:x + patch_size].copy(),
                    original[y:y + patch_size, x:x + patch_size].copy(), y, x))
    return out


@dataclass(frozen=True)
class ManifestRecord:
    degraded: str   # path relative to the manifest file
    original: str
    qp: int
    split: str      # "train" | "val"


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    patch_size: int = 48
    seed: int = 0

    def by_split(self, split: str, qp: int | None = None):
        return [r for r in self.records
                if r.split == split and (qp is None or r.qp == qp)]

    def qps(self):
        return sorted({r.qp for r in self.records})

    def to_text(self) -> str:
        lines = [f"# loopprune-manifest v1 patch_size={self.patch_size} seed={self.seed}"]
        lines += [f"{r.degraded}\t{r.original}\t{r.qp}\t{r.split}" for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        patch_size, seed = 48, 0
        records = []
        with open(path, encoding="ascii") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    for token in line.split():
                        if token.startswith("patch_size="):
                            patch_size = int(token.split("=")[1])
                        elif token.startswith("seed="):
                            seed = int(token.split("=")[1])
                    continue
                deg, orig, qp, split = line.split("\t")
                records.append(ManifestRecord(deg, orig, int(qp), split))
        return cls(records, patch_size, seed)


def load_pairs(manifest: DatasetManifest, root, split: str,
               qp: int | None = None):
    """Materialise a manifest split as normalized (inputs, targets) arrays
    of shape (n, 1, p, p) in [0, 1]."""
    recs = manifest.by_split(split, qp)
    if not recs:
        raise ConfigError(f"manifest has no records for split {split!r}"
                          + (f" at qp {qp}" if qp is not None else ""))
    xs, ys = [], []
    for r in recs:
        xs.append(read_pgm(os.path.join(root, r.degraded)))
        ys.append(read_pgm(os.path.join(root, r.original)))
    x = np.stack(xs).astype(np.float32) / 255.0
    y = np.stack(ys).astype(np.float32) / 255.0
    return x[:, None, :, :], y[:, None, :, :]


def gen_dataset(source_dir, out_dir, qps, patch_size: int = 48,
                stride: int | None = None, train_fraction: float = 0.8,
                seed: int = 0) -> DatasetManifest:
    """Degrade every source PGM at every QP, tile aligned patch pairs,
    split them train/val, and write everything under ``out_dir``.

    Layout: ``<out_dir>/<qp>/<split>/<name>`` plus ``<out_dir>/manifest.txt``.
    Fully reproducible from (sources, qps, patch size, fractions, seed).
    """
    if not os.path.isdir(source_dir):
        raise ConfigError(f"source directory does not exist: {source_dir}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must be in (0, 1), got {train_fraction}")
    names = sorted(n for n in os.listdir(source_dir) if n.endswith(".pgm"))
    if not names:
        raise ConfigError(f"no .pgm images found in {source_dir}")
    stride = stride or patch_size
    rng = Rng(seed)

    manifest = DatasetManifest(patch_size=patch_size, seed=seed)
    for qp in sorted(qps):
        q = QuantSpec(qp)
        entries = []
        for name in names:
            original = read_pgm(os.path.join(source_dir, name))
            degraded = degrade(original, q)
            stem = os.path.splitext(name)[0]
            for deg, orig, y, x in extract_patches(degraded, original, patch_size,
                                                   stride, seed=0):
                entries.append((f"{stem}_y{y:04d}_x{x:04d}", deg, orig))
        order = rng.permutation(len(entries))
        n_train = max(1, min(len(entries) - 1, round(train_fraction * len(entries))))
        for pos, i in enumerate(order):
            split = "train" if pos < n_train else "val"
            key, deg, orig = entries[i]
            rel_dir = os.path.join(str(qp), split)
            os.makedirs(os.path.join(out_dir, rel_dir), exist_ok=True)
            deg_rel = os.path.join(rel_dir, f"{key}_deg.pgm")
            orig_rel = os.path.join(rel_dir, f"{key}_orig.pgm")
            write_pgm(os.path.join(out_dir, deg_rel), deg)
            write_pgm(os.path.join(out_dir, orig_rel), orig)
            manifest.records.append(ManifestRecord(deg_rel, orig_rel, qp, split))
    manifest.records.sort(key=lambda r: (r.qp, r.split, r.degraded))
    manifest.save(os.path.join(out_dir, "manifest.txt"))
    return manifest
