import math

import numpy as np
import pytest


def synthetic_image(seed: int, height: int = 96, width: int = 96) -> np.ndarray:
    """Deterministic photographic-ish 8-bit test image: smooth gradients,
    a few blobs, low-frequency texture, mild grain."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 110.0 + 60.0 * (xx / width - 0.5) + 40.0 * (yy / height - 0.5)
    img += 25.0 * np.sin(2 * math.pi * xx / (16 + 8 * rng.random()))
    img += 18.0 * np.sin(2 * math.pi * (yy + xx) / (24 + 12 * rng.random()))
    for _ in range(3):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        amp = rng.uniform(-60, 60)
        sig = rng.uniform(8, 24)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    img += rng.normal(0, 2.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthetic_pair_batch(seed: int, count: int, patch: int, qp: int):
    """Aligned (degraded, original) float32 batches in [0, 1] of shape
    (count, 1, patch, patch), generated through the codec proxy."""
    from loopprune.codec import QuantSpec, degrade, extract_patches

    degs, origs = [], []
    img_seed = seed
    while len(degs) < count:
        img = synthetic_image(img_seed, patch * 2, patch * 2)
        deg = degrade(img, QuantSpec(qp))
        for d, o, _, _ in extract_patches(deg, img, patch, patch, seed=img_seed):
            degs.append(d)
            origs.append(o)
            if len(degs) == count:
                break
        img_seed += 1
    x = np.stack(degs).astype(np.float32) / 255.0
    y = np.stack(origs).astype(np.float32) / 255.0
    return x[:, None], y[:, None]


@pytest.fixture
def fixture_images(tmp_path):
    """Four synthetic source images written as PGM files."""
    from loopprune.codec import write_pgm

    src = tmp_path / "images"
    src.mkdir()
    for i in range(4):
        write_pgm(src / f"img{i}.pgm", synthetic_image(100 + i))
    return src
