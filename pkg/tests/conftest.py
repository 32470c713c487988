from __future__ import annotations

import os

import numpy as np
import pytest

from tokenbreak.imagecore import Image, save_image
from tokenbreak.vitmini import ViTConfig

SMALL_BACKBONE = {
    "patch_size": 4,
    "num_patches": 4,
    "embed_dim": 8,
    "depth": 2,
    "num_heads": 2,
    "mlp_ratio": 2.0,
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg() -> ViTConfig:
    """8x8 inputs, 2x2 token grid."""
    return ViTConfig(**SMALL_BACKBONE)


@pytest.fixture
def quantized_image(rng):
    """Random image on the 8-bit lattice, so PNG round trips are exact."""

    def make(h: int, w: int, c: int = 3) -> Image:
        return Image(rng.integers(0, 256, size=(h, w, c)) / 255.0)

    return make


@pytest.fixture
def write_images(quantized_image):
    """Write count random PNGs below root/<sub>; returns their paths."""

    def write(root, count: int, size: int = 8, sub: str = "", prefix: str = "img"):
        out = []
        for i in range(count):
            path = os.path.join(str(root), sub, f"{prefix}{i:03d}.png")
            save_image(quantized_image(size, size), path)
            out.append(path)
        return out

    return write


@pytest.fixture
def small_config_file(tmp_path):
    """Settings file for a tiny backbone; extra lines can be appended."""

    def write(**extra) -> str:
        values = {**SMALL_BACKBONE, "threads": 1, **extra}
        path = tmp_path / "tokenbreak.conf"
        path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
        return str(path)

    return write
