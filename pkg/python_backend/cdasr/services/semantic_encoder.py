"""
Frozen semantic encoder.
A pretrained open_clip image tower and a deterministic stub share one
interface; every embedding is divided by its own L2 norm before use.
"""

from __future__ import annotations

import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Sequence, Type

import numpy as np
import torch
import torch.nn.functional as F

from ..config.env import config
from ..models.run_config import EncoderSpec
from ..utils.draws import UniformStream
from ..utils.errors import RejectedInputError
from ..utils.logger import get_logger
from .data_pipeline import Image
from .resampling import resize_tensor

logger = get_logger()

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
NORM_EPS = 1e-12


@dataclass(frozen=True)
class SemanticEmbedding:
    values: np.ndarray
    encoder_id: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.array(self.values, dtype=np.float64)).to(dtype)


def as_rgb(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) with C in {1, 3} -> (B, 3, H, W)."""
    if x.shape[1] == 3:
        return x
    if x.shape[1] == 1:
        return x.expand(-1, 3, -1, -1)
    raise RejectedInputError(f"expected 1 or 3 channels, got {x.shape[1]}")


def luma(x: torch.Tensor) -> torch.Tensor:
    weights = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (as_rgb(x) * weights).sum(dim=1, keepdim=True)


class SemanticEncoder(ABC):
    """Frozen image encoder: no parameter of it ever enters a ParameterSet."""

    def __init__(self, spec: EncoderSpec) -> None:
        self.spec = spec

    @property
    def encoder_id(self) -> str:
        return self.spec.encoder_id

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    @abstractmethod
    def _raw_embed(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) preprocessed batch -> (B, c) unnormalised embeddings."""

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        size = self.spec.input_size
        return resize_tensor(as_rgb(x), size, size, antialias=True)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings of a (B, C, H, W) batch; differentiable w.r.t. `x`."""
        raw = self._raw_embed(self.preprocess(x))
        norms = raw.norm(dim=1, keepdim=True)
        degenerate = norms <= NORM_EPS
        unit = raw / norms.clamp_min(NORM_EPS)
        if bool(degenerate.any()):
            logger.warning("embedding_zero_norm_fallback", encoder=self.encoder_id, count=int(degenerate.sum()))
            basis = torch.zeros_like(unit)
            basis[:, 0] = 1.0
            unit = torch.where(degenerate, basis, unit)
        return unit

    def encode(self, img: Image) -> SemanticEmbedding:
        with torch.no_grad():
            values = self.embed(img.to_tensor(torch.float64).unsqueeze(0))[0]
        return SemanticEmbedding(values.to(torch.float64).cpu().numpy(), self.encoder_id)

    def encode_batch(self, imgs: Sequence[Image]) -> List[SemanticEmbedding]:
        if not imgs:
            raise RejectedInputError("encode_batch needs at least one image")
        # one forward per image so batch results equal single encodes bit for bit
        return [self.encode(img) for img in imgs]


class StubEncoder(SemanticEncoder):
    """
    Deterministic stand-in for the pretrained tower: 8×8 average-pooled luma,
    centred, projected by a fixed seeded random matrix, then tanh.
    """

    GRID = 8
    SEED = 1_234_567

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__(spec)
        if spec.input_size < self.GRID:
            raise RejectedInputError(f"stub encoder needs input_size >= {self.GRID}")
        features = self.GRID * self.GRID
        # unit-variance uniform draws: projection rows first, then the bias
        stream = UniformStream(self.SEED)
        unit = math.sqrt(3.0)
        projection = stream.symmetric(spec.embed_dim * features, unit).reshape(spec.embed_dim, features)
        self._projection = torch.from_numpy(projection / math.sqrt(features))
        self._bias = torch.from_numpy(0.5 * stream.symmetric(spec.embed_dim, unit))

    def pooled_features(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(luma(x), self.GRID)
        return pooled.flatten(start_dim=1) - 0.5

    def _raw_embed(self, x: torch.Tensor) -> torch.Tensor:
        projection = self._projection.to(dtype=x.dtype, device=x.device)
        bias = self._bias.to(dtype=x.dtype, device=x.device)
        return torch.tanh(self.pooled_features(x) @ projection.T + bias)

    def pooled_statistics(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Multi-level pooled statistics; the stub's stand-in for perceptual feature maps."""
        rgb = as_rgb(x)
        fine = F.adaptive_avg_pool2d(rgb, self.GRID)
        coarse = F.adaptive_avg_pool2d(rgb, self.GRID // 2)
        variance = F.adaptive_avg_pool2d(rgb * rgb, self.GRID) - fine * fine
        return [fine, coarse, variance]


class ClipEncoder(SemanticEncoder):
    """Pretrained open_clip image tower (ViT-B/32 by default)."""

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__(spec)
        import open_clip

        cache_dir = config.encoder_cache_dir()
        model, _, _ = open_clip.create_model_and_transforms(
            spec.model_name,
            pretrained=spec.pretrained_tag,
            cache_dir=str(cache_dir) if cache_dir else None,
        )
        model.eval()
        for param in model.parameters():
            param.requires_grad_(False)
        self.model = model

        out_dim = int(getattr(model.visual, "output_dim", spec.embed_dim))
        if out_dim != spec.embed_dim:
            raise RejectedInputError(f"{spec.model_name} produces {out_dim}-d embeddings, spec says {spec.embed_dim}")
        logger.info("clip_encoder_loaded", model=spec.model_name, tag=spec.pretrained_tag, cache=str(cache_dir))

    def _raw_embed(self, x: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.MEAN, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(self.STD, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        model_dtype = next(self.model.parameters()).dtype
        out = self.model.encode_image(((x - mean) / std).to(model_dtype))
        return out.to(x.dtype)


class EncoderFactory:
    """Creates encoders once per spec; loading is the only exclusive step."""

    _backends: Dict[str, Type[SemanticEncoder]] = {
        "stub": StubEncoder,
        "pretrained": ClipEncoder,
    }

    _instances: Dict[str, SemanticEncoder] = {}
    _lock = threading.Lock()

    @classmethod
    def create(cls, spec: EncoderSpec) -> SemanticEncoder:
        key = spec.model_dump_json()
        cached = cls._instances.get(key)
        if cached is not None:
            return cached
        with cls._lock:
            if key not in cls._instances:
                backend = cls._backends.get(spec.backend)
                if backend is None:
                    raise RejectedInputError(f"unknown encoder backend '{spec.backend}'")
                cls._instances[key] = backend(spec)
                logger.info("encoder_created", encoder=spec.encoder_id)
        return cls._instances[key]

    @classmethod
    def clear_cache(cls) -> None:
        with cls._lock:
            cls._instances.clear()


def encode(spec: EncoderSpec, img: Image) -> SemanticEmbedding:
    return EncoderFactory.create(spec).encode(img)


def encode_batch(spec: EncoderSpec, imgs: Sequence[Image]) -> List[SemanticEmbedding]:
    if not imgs:
        raise RejectedInputError("encode_batch needs at least one image")
    return EncoderFactory.create(spec).encode_batch(imgs)
