"""
Loss terms
Pixel L1, multi-layer perceptual distance and semantic-embedding distance,
combined with the run's LossWeights. Every term is differentiable w.r.t. the
prediction; targets are treated as constants.
"""

from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from ..config.env import config
from ..models.reports import LossReport
from ..models.run_config import EncoderSpec, LossWeights
from ..utils.errors import RejectedInputError
from ..utils.logger import get_logger
from .data_pipeline import Image
from .semantic_encoder import EncoderFactory, StubEncoder, as_rgb

logger = get_logger()

ImageLike = Union[Image, torch.Tensor]


def _as_batch(x: ImageLike, dtype: Optional[torch.dtype]) -> torch.Tensor:
    if isinstance(x, Image):
        x = x.to_tensor(dtype or torch.float64)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x if dtype is None else x.to(dtype)


def _pair(pred: ImageLike, target: ImageLike) -> Tuple[torch.Tensor, torch.Tensor]:
    dtype = pred.dtype if isinstance(pred, torch.Tensor) else None
    if dtype is None and isinstance(target, torch.Tensor):
        dtype = target.dtype
    p = _as_batch(pred, dtype)
    t = _as_batch(target, p.dtype)
    if p.shape != t.shape:
        raise RejectedInputError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ in shape")
    return p, t


# Feature extractors --------------------------------------------------------

class FeatureExtractor(ABC):
    """Fixed multi-layer feature map used by the perceptual term."""

    name: str = "extractor"

    @abstractmethod
    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        ...

    def __call__(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.features(x)


class PooledStatisticsExtractor(FeatureExtractor):
    """Stub extractor: the stub encoder's pooled mean and variance statistics."""

    name = "pooled_statistics"

    def __init__(self, spec: Optional[EncoderSpec] = None) -> None:
        spec = spec if spec is not None and spec.backend == "stub" else EncoderSpec.stub()
        encoder = EncoderFactory.create(spec)
        if not isinstance(encoder, StubEncoder):
            raise RejectedInputError(f"pooled statistics need the stub encoder, got {spec.encoder_id}")
        self._encoder = encoder

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self._encoder.pooled_statistics(x)


class VGGExtractor(FeatureExtractor):
    """First three stages of ImageNet VGG19, cut after relu1_2, relu2_2 and relu3_4."""

    name = "vgg19"
    CUTS = (4, 9, 18)
    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self) -> None:
        from torchvision.models import VGG19_Weights, vgg19

        weights_file = config.CDASR_PERCEPTUAL_WEIGHTS
        if weights_file:
            model = vgg19(weights=None)
            model.load_state_dict(torch.load(weights_file, map_location="cpu"))
        else:
            model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        layers = model.features[: self.CUTS[-1]].eval()
        for param in layers.parameters():
            param.requires_grad_(False)

        self.stages = nn.ModuleList()
        start = 0
        for cut in self.CUTS:
            self.stages.append(layers[start:cut])
            start = cut
        logger.info("perceptual_extractor_loaded", extractor=self.name, local_weights=bool(weights_file))

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        model_dtype = next(self.stages.parameters()).dtype
        mean = torch.tensor(self.MEAN, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self.STD, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        h = ((as_rgb(x) - mean) / std).to(model_dtype)
        out = []
        for stage in self.stages:
            h = stage(h)
            out.append(h.to(x.dtype))
        return out


_extractors: Dict[str, FeatureExtractor] = {}
_extractor_lock = threading.Lock()


def perceptual_extractor(spec: EncoderSpec) -> FeatureExtractor:
    """Stub encoders pair with the stub extractor; pretrained ones with VGG19."""
    key = spec.model_dump_json() if spec.backend == "stub" else "vgg19"
    with _extractor_lock:
        if key not in _extractors:
            _extractors[key] = PooledStatisticsExtractor(spec) if spec.backend == "stub" else VGGExtractor()
        return _extractors[key]


# Loss terms ---------------------------------------------------------------

def l1_loss(pred: ImageLike, target: ImageLike) -> torch.Tensor:
    p, t = _pair(pred, target)
    return (p - t).abs().mean()


def perceptual_loss(pred: ImageLike, target: ImageLike, feat_extractor: FeatureExtractor) -> torch.Tensor:
    p, t = _pair(pred, target)
    total = p.new_zeros(())
    for fp, ft in zip(feat_extractor(p), feat_extractor(t)):
        total = total + F.mse_loss(fp, ft)
    return total


def semantic_loss(pred: ImageLike, target: ImageLike, spec: EncoderSpec) -> torch.Tensor:
    """Mean over the batch of the squared distance between unit embeddings."""
    p, t = _pair(pred, target)
    encoder = EncoderFactory.create(spec)
    with torch.no_grad():
        e_target = encoder.embed(t)
    e_pred = encoder.embed(p)
    return ((e_pred - e_target) ** 2).sum(dim=1).mean()


@dataclass
class LossTerms:
    """Differentiable loss components plus the weights they were combined with."""
    total: torch.Tensor
    pixel: torch.Tensor
    perceptual: torch.Tensor
    semantic: torch.Tensor
    weights: LossWeights

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v)) for v in (self.total, self.pixel, self.perceptual, self.semantic))

    def values(self) -> Dict[str, float]:
        return {
            "total": float(self.total),
            "pixel": float(self.pixel),
            "perceptual": float(self.perceptual),
            "semantic": float(self.semantic),
        }

    def report(self) -> LossReport:
        return LossReport(**self.values())


def total_loss(
    pred: ImageLike,
    target: ImageLike,
    w: LossWeights,
    spec: EncoderSpec,
    feat_extractor: Optional[FeatureExtractor] = None,
) -> LossTerms:
    p, t = _pair(pred, target)
    extractor = feat_extractor if feat_extractor is not None else perceptual_extractor(spec)
    pixel = l1_loss(p, t)
    perceptual = perceptual_loss(p, t, extractor)
    semantic = semantic_loss(p, t, spec)
    total = w.pixel * pixel + w.perceptual * perceptual + w.semantic * semantic
    return LossTerms(total, pixel, perceptual, semantic, w)
