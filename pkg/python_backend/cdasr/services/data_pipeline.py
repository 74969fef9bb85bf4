"""
Data pipeline
HR directory ingestion, bicubic degradation, paired-patch sampling and
few-shot episode sampling. Every sampler is a pure function of its inputs and
an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from ..models.reports import DatasetManifest
from ..models.run_config import SUPPORTED_SCALES
from ..utils.errors import EmptyDatasetError, RejectedInputError
from ..utils.image_io import ImageDecodeError, list_image_files, read_image, write_image
from ..utils.logger import get_logger
from .resampling import resize_tensor

logger = get_logger()

DEFAULT_SHOTS = 5
DEFAULT_PATCH = 48


@dataclass(frozen=True)
class Image:
    """H×W×C pixel array in [0, 1]."""
    pixels: np.ndarray
    color_space: Literal["RGB", "Y"] = "RGB"
    source_path: Optional[str] = None

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise RejectedInputError(f"image must be H×W×C with H, W ≥ 1, got shape {pixels.shape}")
        if pixels.shape[2] not in (1, 3):
            raise RejectedInputError(f"image must have 1 or 3 channels, got {pixels.shape[2]}")
        if not np.all(np.isfinite(pixels)):
            raise RejectedInputError("image contains non-finite values")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def name(self) -> str:
        return Path(self.source_path).name if self.source_path else "<memory>"

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """C×H×W tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).to(dtype)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, source_path: Optional[str] = None, clamp: bool = True) -> "Image":
        data = tensor.detach().to(torch.float64).cpu()
        if data.dim() == 4:
            if data.shape[0] != 1:
                raise RejectedInputError("from_tensor expects a single image")
            data = data[0]
        if clamp:
            data = data.clamp(0.0, 1.0)
        channels = data.shape[0]
        return cls(pixels=data.numpy().transpose(1, 2, 0), color_space="RGB" if channels == 3 else "Y",
                   source_path=source_path)

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        return Image(pixels=np.clip(pixels, 0.0, 1.0), color_space=self.color_space, source_path=self.source_path)


Pair = Tuple[Image, Image]


@dataclass(frozen=True)
class PairedDataset:
    pairs: Tuple[Pair, ...]
    scale: int
    domain_tag: str = "source"
    skip_count: int = 0
    skipped: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        check_scale(self.scale)
        for lr, hr in self.pairs:
            if hr.height != self.scale * lr.height or hr.width != self.scale * lr.width:
                raise RejectedInputError(
                    f"pair {hr.name}: HR {hr.height}x{hr.width} is not x{self.scale} of LR {lr.height}x{lr.width}"
                )

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def min_lr_size(self) -> int:
        return min(min(lr.height, lr.width) for lr, _ in self.pairs)

    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            scale=self.scale,
            domain_tag=self.domain_tag,
            skip_count=self.skip_count,
            skipped=list(self.skipped),
            pairs=[
                {
                    "name": hr.name,
                    "hr": hr.source_path,
                    "lr": lr.source_path,
                    "hr_size": [hr.height, hr.width],
                    "lr_size": [lr.height, lr.width],
                }
                for lr, hr in self.pairs
            ],
        )


@dataclass(frozen=True)
class EpisodeSplit:
    support: Tuple[Pair, ...]
    query: Tuple[Pair, ...]
    support_indices: Tuple[int, ...] = ()
    query_indices: Tuple[int, ...] = ()


@dataclass(frozen=True)
class PatchPlan:
    """Crop and augmentation of one batch element (LR coordinates)."""
    index: int
    top: int
    left: int
    flip: bool
    rot90: int


# Geometry -----------------------------------------------------------------

def check_scale(scale: int) -> int:
    if scale not in SUPPORTED_SCALES:
        raise RejectedInputError(f"unsupported scale x{scale}; expected one of {list(SUPPORTED_SCALES)}")
    return scale


def crop_to_multiple(img: Image, scale: int) -> Image:
    """Centre-crop so that both dims are divisible by `scale`."""
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    if h < scale or w < scale:
        raise RejectedInputError(f"{img.name}: {img.height}x{img.width} is smaller than the scale x{scale}")
    if (h, w) == (img.height, img.width):
        return img
    top = (img.height - h) // 2
    left = (img.width - w) // 2
    return Image(img.pixels[top:top + h, left:left + w], img.color_space, img.source_path)


def resize(img: Image, out_h: int, out_w: int, antialias: bool = True) -> Image:
    tensor = img.to_tensor(torch.float64)
    out = resize_tensor(tensor, out_h, out_w, antialias=antialias)
    return Image.from_tensor(out, source_path=img.source_path)


def bicubic_downsample(img: Image, scale: int) -> Image:
    check_scale(scale)
    img = crop_to_multiple(img, scale)
    return resize(img, img.height // scale, img.width // scale, antialias=True)


def bicubic_upsample(img: Image, scale: int) -> Image:
    check_scale(scale)
    return resize(img, img.height * scale, img.width * scale, antialias=False)


# Ingestion ----------------------------------------------------------------

def load_images(hr_dir: Union[str, Path]) -> Tuple[List[Image], List[str]]:
    root = Path(hr_dir)
    if not root.is_dir():
        raise RejectedInputError(f"HR directory not found: {root}")

    images: List[Image] = []
    skipped: List[str] = []
    for path in list_image_files(root):
        try:
            images.append(Image(read_image(path), "RGB", str(path)))
        except ImageDecodeError as exc:
            skipped.append(str(path))
            logger.warning("image_skipped_undecodable", path=str(path), error=str(exc))
    return images, skipped


def build_dataset(hr_dir: Union[str, Path], scale: int, domain_tag: Optional[str] = None) -> PairedDataset:
    """One (LR, HR) pair per decodable HR image, LR synthesised by bicubic downsampling."""
    check_scale(scale)
    images, skipped = load_images(hr_dir)
    if not images:
        raise EmptyDatasetError(f"no decodable image in {hr_dir} ({len(skipped)} skipped)")

    pairs = []
    for hr in images:
        hr = crop_to_multiple(hr, scale)
        pairs.append((bicubic_downsample(hr, scale), hr))

    tag = domain_tag or Path(hr_dir).name
    logger.info("dataset_built", hr_dir=str(hr_dir), scale=scale, pairs=len(pairs), skipped=len(skipped), domain=tag)
    return PairedDataset(tuple(pairs), scale, tag, len(skipped), tuple(skipped))


def build_paired_dataset(
    hr_dir: Union[str, Path],
    lr_dir: Union[str, Path],
    scale: int,
    domain_tag: Optional[str] = None,
) -> PairedDataset:
    """Pairs an existing LR directory with its HR directory by relative path stem."""
    check_scale(scale)
    hr_root, lr_root = Path(hr_dir), Path(lr_dir)
    if not lr_root.is_dir():
        raise RejectedInputError(f"LR directory not found: {lr_root}")
    hr_images, skipped = load_images(hr_root)

    lr_index = {p.relative_to(lr_root).with_suffix("").as_posix(): p for p in list_image_files(lr_root)}
    pairs = []
    for hr in hr_images:
        key = Path(hr.source_path).relative_to(hr_root).with_suffix("").as_posix()
        lr_path = lr_index.get(key)
        if lr_path is None:
            skipped.append(hr.source_path)
            logger.warning("image_skipped_no_lr_counterpart", path=hr.source_path)
            continue
        try:
            lr = Image(read_image(lr_path), "RGB", str(lr_path))
        except ImageDecodeError as exc:
            skipped.append(str(lr_path))
            logger.warning("image_skipped_undecodable", path=str(lr_path), error=str(exc))
            continue
        pairs.append((lr, crop_to_multiple(hr, scale)))

    if not pairs:
        raise EmptyDatasetError(f"no usable pair in {hr_dir} / {lr_dir}")
    return PairedDataset(tuple(pairs), scale, domain_tag or hr_root.name, len(skipped), tuple(skipped))


def write_degraded(ds: PairedDataset, out_dir: Union[str, Path], hr_root: Union[str, Path]) -> Path:
    """Writes `<out>/X<scale>/<relative path>.png` for each LR image plus `manifest.json`."""
    target = Path(out_dir) / f"X{ds.scale}"
    hr_root = Path(hr_root)
    manifest = ds.manifest()
    for (lr, hr), entry in zip(ds.pairs, manifest.pairs):
        rel = Path(hr.source_path).relative_to(hr_root).with_suffix(".png") if hr.source_path else Path(f"{hr.name}.png")
        entry["lr"] = str(write_image(target / rel, lr.pixels))

    manifest_path = target / "manifest.json"
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("degraded_set_written", out=str(target), pairs=len(ds), skipped=ds.skip_count)
    return manifest_path


def invert_intensity(ds: PairedDataset, domain_tag: Optional[str] = None) -> PairedDataset:
    """Synthetic shifted domain: every pixel p becomes 1 - p."""
    pairs = tuple((lr.with_pixels(1.0 - lr.pixels), hr.with_pixels(1.0 - hr.pixels)) for lr, hr in ds.pairs)
    return PairedDataset(pairs, ds.scale, domain_tag or f"{ds.domain_tag}_inverted")


# Sampling -----------------------------------------------------------------

def plan_patch_batch(
    ds: PairedDataset,
    patch: int,
    batch: int,
    rng_seed: Union[int, Sequence[int]],
    indices: Optional[Sequence[int]] = None,
) -> List[PatchPlan]:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot sample patches from an empty dataset")
    if batch < 1:
        raise RejectedInputError(f"batch must be >= 1, got {batch}")
    if patch < 1 or patch > ds.min_lr_size:
        raise RejectedInputError(f"patch {patch} exceeds the smallest LR image side {ds.min_lr_size}")
    if indices is not None and len(indices) != batch:
        raise RejectedInputError("explicit indices must have one entry per batch element")

    rng = np.random.default_rng(rng_seed)
    plans = []
    for b in range(batch):
        index = int(indices[b]) if indices is not None else int(rng.integers(len(ds)))
        lr, _ = ds.pairs[index]
        top = int(rng.integers(lr.height - patch + 1))
        left = int(rng.integers(lr.width - patch + 1))
        flip = bool(rng.integers(2))
        rot = int(rng.integers(4))
        plans.append(PatchPlan(index, top, left, flip, rot))
    return plans


def _augment(pixels: np.ndarray, flip: bool, rot: int) -> np.ndarray:
    if flip:
        pixels = pixels[:, ::-1, :]
    return np.ascontiguousarray(np.rot90(pixels, k=rot, axes=(0, 1)))


def apply_patch_plan(ds: PairedDataset, plan: PatchPlan, patch: int) -> Pair:
    lr, hr = ds.pairs[plan.index]
    s = ds.scale
    lr_crop = lr.pixels[plan.top:plan.top + patch, plan.left:plan.left + patch]
    hr_crop = hr.pixels[s * plan.top:s * (plan.top + patch), s * plan.left:s * (plan.left + patch)]
    return (
        Image(_augment(lr_crop, plan.flip, plan.rot90), lr.color_space, lr.source_path),
        Image(_augment(hr_crop, plan.flip, plan.rot90), hr.color_space, hr.source_path),
    )


def sample_patch_batch(
    ds: PairedDataset,
    patch: int,
    batch: int,
    rng_seed: Union[int, Sequence[int]],
) -> List[Pair]:
    """Co-located LR/HR crops with identical flip / rot90 augmentation."""
    return [apply_patch_plan(ds, plan, patch) for plan in plan_patch_batch(ds, patch, batch, rng_seed)]


def sample_episode(ds: PairedDataset, shots: int = DEFAULT_SHOTS, query_size: int = 0, rng_seed: int = 0) -> EpisodeSplit:
    """Disjoint support / query split drawn uniformly without replacement."""
    if shots < 1 or query_size < 0:
        raise RejectedInputError(f"invalid episode sizes shots={shots}, query_size={query_size}")
    if shots + query_size > len(ds):
        raise RejectedInputError(
            f"episode needs {shots + query_size} pairs but dataset '{ds.domain_tag}' has {len(ds)}"
        )
    order = np.random.default_rng(rng_seed).permutation(len(ds))
    support_idx = tuple(int(i) for i in order[:shots])
    query_idx = tuple(int(i) for i in order[shots:shots + query_size])
    return EpisodeSplit(
        support=tuple(ds.pairs[i] for i in support_idx),
        query=tuple(ds.pairs[i] for i in query_idx),
        support_indices=support_idx,
        query_indices=query_idx,
    )


def stack_pairs(pairs: Sequence[Pair], dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batch equally sized pairs into (B, C, h, w) / (B, C, H, W) tensors."""
    if not pairs:
        raise RejectedInputError("cannot stack an empty list of pairs")
    lr = torch.stack([p[0].to_tensor(dtype) for p in pairs])
    hr = torch.stack([p[1].to_tensor(dtype) for p in pairs])
    return lr, hr
