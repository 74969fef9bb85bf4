"""
Shared fixtures: synthetic image directories, stub encoder specs, tiny
network configs and the golden-value check.
"""

import json
from pathlib import Path
from typing import Callable, List

import numpy as np
import pytest
import torch

from cdasr.models import EncoderSpec, NetworkConfig
from cdasr.services.data_pipeline import Image
from cdasr.utils.image_io import write_image
from cdasr.utils.logger import configure_logging

GOLDEN_DIR = Path(__file__).parent / "golden"
GOLDEN_TOL = 1e-6

configure_logging("WARNING")


def textured(size: int, seed: int, channels: int = 3) -> np.ndarray:
    """Smooth random texture in [0, 1]: a few low-frequency sinusoids plus a ramp."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    out = np.empty((size, size, channels))
    for c in range(channels):
        field = 0.5 + 0.15 * (x - 0.5) + 0.1 * (y - 0.5)
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += 0.08 * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
        out[:, :, c] = field
    return np.clip(out, 0.0, 1.0)


def smooth(size: int, phase: float = 0.0) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] / size
    channels = [0.5 + 0.2 * np.sin(2 * np.pi * x + phase + k) * np.cos(2 * np.pi * y + k) for k in range(3)]
    return np.stack(channels, axis=-1)


@pytest.fixture
def stub_spec() -> EncoderSpec:
    return EncoderSpec.stub()


@pytest.fixture
def tiny_net() -> Callable[..., NetworkConfig]:
    def make(scale: int = 2, **overrides) -> NetworkConfig:
        fields = dict(
            scale=scale,
            backbone_channels=8,
            backbone_blocks=2,
            clip_dim=64,
            mlp_hidden=16,
            mlp_out=8,
            recon_blocks_per_stage=1,
        )
        fields.update(overrides)
        return NetworkConfig(**fields)

    return make


@pytest.fixture
def image_dir(tmp_path) -> Callable[..., Path]:
    """Writes `count` textured PNGs of side `size` into a fresh directory."""

    def make(count: int = 3, size: int = 32, name: str = "hr", seed: int = 0, generator=None) -> Path:
        root = tmp_path / name
        root.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            pixels = generator(size, i) if generator is not None else textured(size, seed + i)
            write_image(root / f"img_{i:03d}.png", pixels)
        return root

    return make


@pytest.fixture
def random_image() -> Callable[..., Image]:
    def make(h: int = 16, w: int = 16, seed: int = 0, channels: int = 3) -> Image:
        return Image(np.random.default_rng(seed).uniform(size=(h, w, channels)))

    return make


@pytest.fixture
def golden() -> Callable[[str, object], None]:
    """Compares a value against the committed tests/golden/<name>.json within GOLDEN_TOL."""

    def check(name: str, value) -> None:
        if isinstance(value, torch.Tensor):
            value = value.detach().to(torch.float64).cpu().numpy()
        flat: List[float] = np.asarray(value, dtype=np.float64).ravel().tolist()
        path = GOLDEN_DIR / f"{name}.json"
        if not path.exists():
            pytest.fail(f"golden file {path.name} is missing; pinned values are committed, never recorded by a test run")
        recorded = json.loads(path.read_text(encoding="utf-8"))
        assert len(recorded) == len(flat), f"{name}: length changed"
        np.testing.assert_allclose(flat, recorded, rtol=0, atol=GOLDEN_TOL)

    return check
