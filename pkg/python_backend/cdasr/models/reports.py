"""
Report and record models written to CSV / JSON outputs.
"""

from __future__ import annotations

import time
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

Protocol = Literal["y_channel_cropped", "rgb_full"]


class LossReport(BaseModel):
    """Scalar values of one loss evaluation."""
    total: float = Field(description="weighted sum")
    pixel: float = Field(ge=0)
    perceptual: float = Field(ge=0)
    semantic: float = Field(ge=0)


class TrainLogRow(BaseModel):
    step: int = Field(ge=0)
    epoch: int = Field(ge=0)
    lr: float
    total: float
    pixel: float
    perceptual: float
    semantic: float

    @classmethod
    def from_report(cls, step: int, epoch: int, lr: float, report: LossReport) -> "TrainLogRow":
        return cls(step=step, epoch=epoch, lr=lr, **report.model_dump())


class EpisodeRecord(BaseModel):
    """One row of the adaptation episode log."""
    episode: int = Field(ge=0)
    support_loss_pre: float
    support_loss_post: float
    query_loss: float
    mean_alpha: float = Field(ge=0)


class MetricReport(BaseModel):
    psnr_db: float
    ssim: float = Field(ge=-1.0, le=1.0)
    n_images: int = Field(ge=0)
    protocol: Protocol


class ImageScore(BaseModel):
    image: str
    psnr: float
    ssim: float


class DomainGapReport(BaseModel):
    mmd: float = Field(ge=-1e-9)
    kernel: str = Field(description="'linear' or 'rbf(<sigma>)'")
    n_a: int = Field(ge=0)
    n_b: int = Field(ge=0)
    coords_2d: Optional[List[Tuple[float, float, str]]] = None
    mmd_matrix: Optional[Dict[str, Dict[str, float]]] = None
    reduction: Literal["tsne", "pca"] = "tsne"
    fallback_used: bool = False

    @model_validator(mode="after")
    def _coords_cover_both_sets(self) -> "DomainGapReport":
        if self.coords_2d is not None and len(self.coords_2d) != self.n_a + self.n_b:
            raise ValueError("coords count must equal n_a + n_b")
        return self


class DatasetManifest(BaseModel):
    """JSON manifest emitted next to a degraded set."""
    scale: int
    domain_tag: str
    skip_count: int = Field(ge=0)
    skipped: List[str] = Field(default_factory=list)
    pairs: List[Dict[str, Any]] = Field(default_factory=list, description="[{name, hr, lr, hr_size, lr_size}]")


class CheckpointMeta(BaseModel):
    """Metadata record stored inside every checkpoint archive."""
    format_version: int = 1
    cfg: Dict[str, Any]
    encoder_id: str
    seed: int
    step: int = Field(ge=0)
    loss_weights: Dict[str, float]
    kind: Literal["train", "adapt"] = "train"
    extra: Dict[str, Any] = Field(default_factory=dict)
    # 唯一不參與比較的欄位
    created_at: int = Field(default_factory=lambda: int(time.time() * 1000))

    def comparable(self) -> Dict[str, Any]:
        return self.model_dump(exclude={"created_at"})
