"""
Run configuration models.
Every section has complete defaults; unknown keys are rejected so that typos in
a config file fail loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SUPPORTED_SCALES = (2, 4, 8, 16)


def check_scale(scale: int) -> int:
    if scale not in SUPPORTED_SCALES:
        raise ValueError(f"unsupported scale x{scale}; expected one of {list(SUPPORTED_SCALES)}")
    return scale


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class LossWeights(_Section):
    """Weights of the pixel, perceptual and semantic terms."""
    pixel: float = Field(default=1.0, ge=0, description="λ_pixel")
    perceptual: float = Field(default=0.1, ge=0, description="λ_perc")
    semantic: float = Field(default=0.01, ge=0, description="λ_sem")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.pixel, self.perceptual, self.semantic)


class EncoderSpec(_Section):
    """Frozen semantic encoder selection."""
    backend: Literal["pretrained", "stub"] = Field(default="pretrained")
    input_size: int = Field(default=224, ge=8, description="encoder input resolution (pixels)")
    embed_dim: int = Field(default=512, ge=8, description="embedding dimension c")
    model_name: str = Field(default="ViT-B-32", description="open_clip architecture for the pretrained backend")
    pretrained_tag: str = Field(default="openai", description="open_clip weight tag")

    model_config = ConfigDict(
        extra="forbid",
        frozen=True,
        json_schema_extra={
            "example": {"backend": "stub", "input_size": 32, "embed_dim": 64}
        },
    )

    @property
    def encoder_id(self) -> str:
        if self.backend == "stub":
            return f"stub-{self.input_size}-{self.embed_dim}"
        return f"open_clip/{self.model_name}/{self.pretrained_tag}"

    @classmethod
    def stub(cls, input_size: int = 32, embed_dim: int = 64) -> "EncoderSpec":
        return cls(backend="stub", input_size=input_size, embed_dim=embed_dim)


class NetworkConfig(_Section):
    """Widths and depths of the backbone, alignment and reconstruction modules."""
    scale: int = Field(default=4, description="upscaling factor")
    image_channels: Literal[1, 3] = Field(default=3)
    backbone_channels: int = Field(default=64, ge=1)
    backbone_blocks: int = Field(default=8, ge=1)
    clip_dim: int = Field(default=512, ge=1, description="embedding dimension c")
    mlp_hidden: int = Field(default=1024, ge=1, description="h")
    mlp_out: int = Field(default=512, ge=1, description="s")
    recon_blocks_per_stage: int = Field(default=2, ge=1)
    use_alignment: bool = Field(default=True, description="False reproduces the ablation without semantic alignment")

    @field_validator("scale")
    @classmethod
    def _scale_supported(cls, v: int) -> int:
        return check_scale(v)

    @property
    def upsample_stages(self) -> int:
        return self.scale.bit_length() - 1

    @property
    def has_inter_stage_blocks(self) -> bool:
        return self.scale >= 8


class SchedulerConfig(_Section):
    kind: Literal["none", "halve_every_k"] = Field(default="halve_every_k")
    k: int = Field(default=200, ge=1, description="epochs between halvings")


class TrainConfig(_Section):
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    seed: int = Field(default=0)
    weights: LossWeights = Field(default_factory=LossWeights)
    patch_size: int = Field(default=48, ge=1, description="LR-side patch size")
    steps_per_epoch: Optional[int] = Field(default=None, ge=1, description="default: ceil(|dataset| / batch_size)")
    checkpoint_every: int = Field(default=100, ge=1, description="steps between periodic checkpoints")
    max_grad_norm: Optional[float] = Field(default=None, gt=0, description="global-norm clipping threshold; None disables")
    dtype: Literal["float32", "float64"] = Field(default="float32")
    max_steps: Optional[int] = Field(default=None, ge=0, description="cap on total optimizer steps; 0 leaves parameters untouched")


class AdaptConfig(_Section):
    episodes: int = Field(default=20, ge=0, description="N_episodes; 0 returns the source parameters")
    shots: int = Field(default=5, ge=1)
    query_size: int = Field(default=3, ge=1)
    inner_steps: int = Field(default=1, ge=1)
    alpha_init: float = Field(default=1e-4, ge=0)
    alpha_max: float = Field(default=1e-2, gt=0)
    gamma: float = Field(default=1e-5, ge=0, description="higher-order rate γ")
    mode: Literal["maml_first_order", "reptile"] = Field(default="maml_first_order")
    reptile_step: float = Field(default=0.5, gt=0, le=1)
    batch_size: int = Field(default=4, ge=1)
    patch_size: int = Field(default=48, ge=1)
    seed: int = Field(default=0)
    weights: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def _alpha_within_bound(self) -> "AdaptConfig":
        if self.alpha_init > self.alpha_max:
            raise ValueError(f"alpha_init {self.alpha_init} exceeds alpha_max {self.alpha_max}")
        return self


class DataConfig(_Section):
    hr_dir: Optional[Path] = None
    lr_dir: Optional[Path] = None
    target_dir: Optional[Path] = None
    domain_tag: str = "source"


class RunConfig(_Section):
    """Union of every section; persisted as `config.resolved.json`."""
    data: DataConfig = Field(default_factory=DataConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    output_dir: Path = Field(default=Path("runs/default"))
    protocol: Literal["y_channel_cropped", "rgb_full"] = Field(default="y_channel_cropped")

    @model_validator(mode="after")
    def _encoder_matches_network(self) -> "RunConfig":
        if self.network.clip_dim != self.encoder.embed_dim:
            raise ValueError(
                f"network.clip_dim ({self.network.clip_dim}) must equal encoder.embed_dim ({self.encoder.embed_dim})"
            )
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path
