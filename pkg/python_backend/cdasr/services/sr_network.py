"""
Super-resolution network
Backbone F_θ (reduced EDSR), semantic alignment G_φ (MLP -> broadcast ->
conv -> fusion) and the pixel-shuffle reconstruction R_ψ with a bicubic
global residual. Parameters live outside the modules in a ParameterSet and
every forward is a `torch.func.functional_call`, so inner-loop adaptation can
evaluate arbitrary parameter values without touching the source set.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import torch
from torch import nn
from torch.func import functional_call

from ..models.run_config import NetworkConfig
from ..utils.draws import UniformStream
from ..utils.errors import RejectedInputError
from ..utils.logger import get_logger
from .data_pipeline import Image
from .resampling import upsample_tensor
from .semantic_encoder import SemanticEmbedding

logger = get_logger()

# C×H×W (or B×C×H×W) activations
FeatureMap = torch.Tensor

MIN_LR_SIDE = 8


# Modules ------------------------------------------------------------------

def conv3x3(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)


class ResBlock(nn.Module):
    """conv-ReLU-conv with identity skip."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(torch.relu(self.conv1(x)))


class Backbone(nn.Module):
    def __init__(self, image_channels: int, channels: int, blocks: int) -> None:
        super().__init__()
        self.head = conv3x3(image_channels, channels)
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(blocks)])
        self.tail = conv3x3(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shallow = self.head(x)
        return self.tail(self.blocks(shallow)) + shallow


class ClipFeatureProcessor(nn.Module):
    """Two-layer MLP with ReLU: c -> h -> s."""

    def __init__(self, clip_dim: int, hidden: int, out: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(clip_dim, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.fc2(torch.relu(self.fc1(emb))))


class SpatialFeatureGenerator(nn.Module):
    """LayerNorm, per-channel constant broadcast to H×W, then Conv₂(ReLU(Conv₁(·)))."""

    def __init__(self, in_dim: int, channels: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(in_dim)
        self.conv1 = conv3x3(in_dim, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, f_proc: torch.Tensor, height: int, width: int) -> torch.Tensor:
        z = self.norm(f_proc)
        grid = z[:, :, None, None].expand(-1, -1, height, width)
        return self.conv2(torch.relu(self.conv1(grid)))


class Fusion(nn.Module):
    """1×1 conv over the channel concat, plus the SR features as residual."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def forward(self, sr_feat: torch.Tensor, spatial_feat: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([sr_feat, spatial_feat], dim=1)) + sr_feat


class Alignment(nn.Module):
    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        self.processor = ClipFeatureProcessor(cfg.clip_dim, cfg.mlp_hidden, cfg.mlp_out)
        self.spatial = SpatialFeatureGenerator(cfg.mlp_out, cfg.backbone_channels)
        self.fusion = Fusion(cfg.backbone_channels)


class UpsampleStage(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.expand = conv3x3(channels, 4 * channels)
        self.shuffle = nn.PixelShuffle(2)
        self.refine = conv3x3(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.refine(self.shuffle(self.expand(x)))


class Reconstruction(nn.Module):
    """
    log2(scale) pixel-shuffle stages; from x8 upward, residual blocks sit
    between consecutive stages. Output = final conv + bicubic(LR).
    """

    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        self.scale = cfg.scale
        channels = cfg.backbone_channels
        self.stages = nn.ModuleList([UpsampleStage(channels) for _ in range(cfg.upsample_stages)])
        if cfg.has_inter_stage_blocks:
            self.between = nn.ModuleList([
                nn.Sequential(*[ResBlock(channels) for _ in range(cfg.recon_blocks_per_stage)])
                for _ in range(cfg.upsample_stages - 1)
            ])
        else:
            self.between = nn.ModuleList()
        self.final = conv3x3(channels, cfg.image_channels)

    def forward(self, feat: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
        x = feat
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.between):
                x = self.between[i](x)
        return self.final(x) + upsample_tensor(lr, self.scale)


class CDASRNet(nn.Module):
    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        self.backbone = Backbone(cfg.image_channels, cfg.backbone_channels, cfg.backbone_blocks)
        self.alignment = Alignment(cfg) if cfg.use_alignment else None
        self.reconstruction = Reconstruction(cfg)

    def forward(self, lr: torch.Tensor, emb: Optional[torch.Tensor]) -> torch.Tensor:
        feat = self.backbone(lr)
        if self.alignment is not None:
            if emb is None:
                raise RejectedInputError("alignment is enabled but no embedding was given")
            f_proc = self.alignment.processor(emb)
            spatial = self.alignment.spatial(f_proc, feat.shape[-2], feat.shape[-1])
            feat = self.alignment.fusion(feat, spatial)
        return self.reconstruction(feat, lr)


@lru_cache(maxsize=16)
def _template(cfg_json: str) -> CDASRNet:
    return CDASRNet(NetworkConfig.model_validate_json(cfg_json))


def network_template(cfg: NetworkConfig) -> CDASRNet:
    """Structure-only module used as the target of functional calls."""
    return _template(cfg.model_dump_json())


# ParameterSet -------------------------------------------------------------

@dataclass
class ParameterSet:
    """Named parameter arrays with same-shaped gradient slots."""
    entries: "OrderedDict[str, torch.Tensor]"
    grads: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    cfg: Optional[NetworkConfig] = None

    def __post_init__(self) -> None:
        self.entries = OrderedDict(self.entries)
        if not self.grads:
            self.grads = OrderedDict((k, torch.zeros_like(v)) for k, v in self.entries.items())
        else:
            self.grads = OrderedDict(self.grads)
        if list(self.grads) != list(self.entries):
            raise RejectedInputError("gradient slots must match parameter names")
        for name, value in self.entries.items():
            if self.grads[name].shape != value.shape:
                raise RejectedInputError(f"gradient slot shape mismatch for '{name}'")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def items(self):
        return self.entries.items()

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(self.entries)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.entries.values())).dtype

    def numel(self, prefix: str = "") -> int:
        return sum(v.numel() for k, v in self.entries.items() if k.startswith(prefix))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.entries.items()}

    def clone(self) -> "ParameterSet":
        return ParameterSet(
            OrderedDict((k, v.detach().clone()) for k, v in self.entries.items()),
            OrderedDict((k, g.detach().clone()) for k, g in self.grads.items()),
            self.cfg,
        )

    def replace(self, entries: Mapping[str, torch.Tensor], grads: Optional[Mapping[str, torch.Tensor]] = None) -> "ParameterSet":
        """New set with the same names and shapes but different values."""
        missing = set(self.entries) ^ set(entries)
        if missing:
            raise RejectedInputError(f"parameter names differ: {sorted(missing)[:5]}")
        ordered = OrderedDict((k, entries[k]) for k in self.entries)
        for name, value in ordered.items():
            if value.shape != self.entries[name].shape:
                raise RejectedInputError(f"shape of '{name}' changed from {tuple(self.entries[name].shape)} to {tuple(value.shape)}")
        grad_slots = OrderedDict((k, grads[k]) for k in self.entries) if grads is not None else None
        return ParameterSet(ordered, grad_slots or OrderedDict(), self.cfg)

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.zero_()

    def set_grads(self, grads: Mapping[str, torch.Tensor]) -> None:
        for name, grad in grads.items():
            self.grads[name].copy_(grad.detach())

    def leaves(self) -> "OrderedDict[str, torch.Tensor]":
        """Fresh autograd leaves holding the current values."""
        return OrderedDict((k, v.detach().requires_grad_(True)) for k, v in self.entries.items())

    def to(self, dtype: torch.dtype) -> "ParameterSet":
        return ParameterSet(
            OrderedDict((k, v.detach().to(dtype)) for k, v in self.entries.items()),
            OrderedDict((k, g.detach().to(dtype)) for k, g in self.grads.items()),
            self.cfg,
        )

    def equal(self, other: "ParameterSet") -> bool:
        if self.names != other.names:
            return False
        return all(torch.equal(self.entries[k], other.entries[k]) for k in self.entries)


def _zero_init_names(module: CDASRNet) -> set:
    """Convolutions that close a residual branch and start at zero."""
    names = set()
    for name, sub in module.named_modules():
        if isinstance(sub, ResBlock):
            names.add(f"{name}.conv2")
    names.add("reconstruction.final")
    if module.alignment is not None:
        names.add("alignment.fusion.conv")
    return names


def init_network(cfg: NetworkConfig, seed: int, dtype: torch.dtype = torch.float32) -> ParameterSet:
    """Kaiming-uniform weights, zero biases, zero residual tails; a pure function of (cfg, seed)."""
    template = network_template(cfg)
    zero_tails = _zero_init_names(template)
    stream = UniformStream(seed)

    entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, param in template.named_parameters():
        owner, _, kind = name.rpartition(".")
        if kind == "bias" or owner in zero_tails:
            value = torch.zeros(param.shape, dtype=dtype)
        elif param.dim() == 1:
            value = torch.ones(param.shape, dtype=dtype)  # LayerNorm gain
        else:
            # He-uniform bound for ReLU: sqrt(6 / fan_in)
            fan_in = param.shape[1:].numel()
            draws = stream.symmetric(param.numel(), math.sqrt(6.0 / fan_in))
            value = torch.from_numpy(draws.reshape(tuple(param.shape))).to(dtype)
        entries[name] = value

    params = ParameterSet(entries, cfg=cfg)
    logger.info("network_initialized", seed=seed, scale=cfg.scale, tensors=len(params), numel=params.numel())
    return params


# Functional forwards ------------------------------------------------------

def _batch(x: Union[Image, torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, Image):
        x = x.to_tensor(dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise RejectedInputError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
    return x.to(dtype)


def _embedding(emb: Union[SemanticEmbedding, torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    if isinstance(emb, SemanticEmbedding):
        emb = emb.to_tensor(dtype)
    if emb.dim() == 1:
        emb = emb.unsqueeze(0)
    return emb.to(dtype)


def _sub(params: ParameterSet, prefix: str, entries: Optional[Mapping[str, torch.Tensor]] = None) -> Dict[str, torch.Tensor]:
    source = entries if entries is not None else params.entries
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in source.items() if k.startswith(prefix + ".")}


def _cfg(params: ParameterSet) -> NetworkConfig:
    if params.cfg is None:
        raise RejectedInputError("parameter set carries no network config")
    return params.cfg


def _alignment(cfg: NetworkConfig) -> Alignment:
    module = network_template(cfg).alignment
    if module is None:
        raise RejectedInputError("network was built without semantic alignment")
    return module


def backbone_forward(params: ParameterSet, lr_img: Union[Image, torch.Tensor]) -> FeatureMap:
    cfg = _cfg(params)
    x = _batch(lr_img, params.dtype)
    if min(x.shape[-2:]) < MIN_LR_SIDE:
        raise RejectedInputError(f"LR input must be at least {MIN_LR_SIDE}x{MIN_LR_SIDE}, got {tuple(x.shape[-2:])}")
    return functional_call(network_template(cfg).backbone, _sub(params, "backbone"), (x,))


def clip_feature_processor(params: ParameterSet, emb: Union[SemanticEmbedding, torch.Tensor]) -> torch.Tensor:
    cfg = _cfg(params)
    e = _embedding(emb, params.dtype)
    if e.shape[-1] != cfg.clip_dim:
        raise RejectedInputError(f"embedding has dimension {e.shape[-1]}, network expects {cfg.clip_dim}")
    return functional_call(_alignment(cfg).processor, _sub(params, "alignment.processor"), (e,))


def spatial_feature_generator(params: ParameterSet, f_proc: torch.Tensor, h_w: Tuple[int, int]) -> FeatureMap:
    cfg = _cfg(params)
    f = f_proc.unsqueeze(0) if f_proc.dim() == 1 else f_proc
    module = _alignment(cfg).spatial
    return functional_call(module, _sub(params, "alignment.spatial"), (f.to(params.dtype), int(h_w[0]), int(h_w[1])))


def fuse(params: ParameterSet, sr_feat: FeatureMap, spatial_feat: FeatureMap) -> FeatureMap:
    cfg = _cfg(params)
    if sr_feat.shape != spatial_feat.shape:
        raise RejectedInputError(f"cannot fuse {tuple(sr_feat.shape)} with {tuple(spatial_feat.shape)}")
    return functional_call(_alignment(cfg).fusion, _sub(params, "alignment.fusion"), (sr_feat, spatial_feat))


def reconstruct(params: ParameterSet, f_aligned: FeatureMap, lr_img: Union[Image, torch.Tensor], scale: int) -> torch.Tensor:
    """Unclamped SR output; clamping to [0, 1] happens at evaluation only."""
    cfg = _cfg(params)
    if scale != cfg.scale:
        raise RejectedInputError(f"scale x{scale} does not match the network's x{cfg.scale}")
    lr = _batch(lr_img, params.dtype)
    return functional_call(network_template(cfg).reconstruction, _sub(params, "reconstruction"), (f_aligned, lr))


def forward(
    params: ParameterSet,
    cfg: NetworkConfig,
    lr_img: Union[Image, torch.Tensor],
    emb: Optional[Union[SemanticEmbedding, torch.Tensor]],
    entries: Optional[Mapping[str, torch.Tensor]] = None,
) -> torch.Tensor:
    """
    reconstruct(fuse(backbone(lr), spatial(processor(emb))), lr, scale).
    `entries` substitutes parameter values (e.g. autograd leaves or adapted values)
    while keeping the names of `params`.
    """
    return forward_values(entries if entries is not None else params.entries, cfg, lr_img, emb)


def forward_values(
    values: Mapping[str, torch.Tensor],
    cfg: NetworkConfig,
    lr_img: Union[Image, torch.Tensor],
    emb: Optional[Union[SemanticEmbedding, torch.Tensor]],
) -> torch.Tensor:
    dtype = next(iter(values.values())).dtype
    lr = _batch(lr_img, dtype)
    if min(lr.shape[-2:]) < MIN_LR_SIDE:
        raise RejectedInputError(f"LR input must be at least {MIN_LR_SIDE}x{MIN_LR_SIDE}, got {tuple(lr.shape[-2:])}")
    e = None
    if cfg.use_alignment:
        if emb is None:
            raise RejectedInputError("alignment is enabled but no embedding was given")
        e = _embedding(emb, dtype)
        if e.shape[-1] != cfg.clip_dim:
            raise RejectedInputError(f"embedding has dimension {e.shape[-1]}, network expects {cfg.clip_dim}")
        if e.shape[0] == 1 and lr.shape[0] > 1:
            e = e.expand(lr.shape[0], -1)
    return functional_call(network_template(cfg), dict(values), (lr, e))


def expected_tensor_count(cfg: NetworkConfig) -> int:
    """Closed-form number of named parameter arrays implied by `cfg`."""
    per_conv = 2
    count = per_conv * (2 + 2 * cfg.backbone_blocks)
    if cfg.use_alignment:
        count += 2 * 2 + 2 + 2 * per_conv + per_conv
    count += cfg.upsample_stages * 2 * per_conv
    if cfg.has_inter_stage_blocks:
        count += (cfg.upsample_stages - 1) * cfg.recon_blocks_per_stage * 2 * per_conv
    return count + per_conv


def parameter_count(cfg: NetworkConfig) -> int:
    return sum(p.numel() for p in network_template(cfg).parameters())

