"""
Create sample image sets
Writes a source set of smooth synthetic textures and a target set of the same
kind with a different palette, for trying the command line without a
benchmark download.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from cdasr.utils.image_io import write_image  # noqa: E402


def texture(size: int, rng: np.random.Generator, palette: np.ndarray) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(4):
        fx, fy = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    field = (field - field.min()) / max(field.max() - field.min(), 1e-9)
    # blend two palette colours by the field value
    rgb = (1 - field)[..., None] * palette[0] + field[..., None] * palette[1]
    return np.clip(rgb, 0.0, 1.0)


parser = argparse.ArgumentParser(description="write synthetic HR image sets")
parser.add_argument("--out", type=Path, default=Path("../data/samples"))
parser.add_argument("--count", type=int, default=12)
parser.add_argument("--size", type=int, default=96)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

palettes = {
    "source": np.array([[0.15, 0.35, 0.20], [0.85, 0.80, 0.55]]),
    "target": np.array([[0.60, 0.10, 0.45], [0.20, 0.75, 0.90]]),
}

rng = np.random.default_rng(args.seed)
for name, palette in palettes.items():
    directory = args.out / name
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        write_image(directory / f"{name}_{i:03d}.png", texture(args.size, rng, palette))
    print(f"wrote {args.count} images of {args.size}x{args.size} to {directory}")

print("\ntry:")
print(f"  python -m cdasr train --encoder stub --hr-dir {args.out / 'source'} --scale 2 --max-steps 50 --out runs/demo")
print(f"  python -m cdasr adapt --encoder stub --checkpoint runs/demo/checkpoints/final --target-dir {args.out / 'target'} --out runs/demo_adapt")
