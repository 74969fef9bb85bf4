"""
Metrics and domain-gap analysis
PSNR / SSIM under the y_channel_cropped or rgb_full protocol, evaluation of a
parameter set over a paired dataset, and the embedding-space diagnostics:
unbiased MMD between sets of semantic embeddings and a seeded 2-D projection.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.decomposition import PCA
from sklearn.manifold import TSNE
from sklearn.metrics import pairwise_distances, pairwise_kernels

from ..models.reports import DomainGapReport, ImageScore, MetricReport, Protocol
from ..models.run_config import EncoderSpec, NetworkConfig
from ..utils.errors import EmptyDatasetError, RejectedInputError
from ..utils.logger import get_logger
from .data_pipeline import Image, PairedDataset, bicubic_upsample, load_images
from .semantic_encoder import EncoderFactory, SemanticEmbedding
from .sr_network import ParameterSet, forward

logger = get_logger()

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
TSNE_PERPLEXITY = 30.0

# BT.601 luma on [0, 1] input, studio range
_Y_WEIGHTS = np.array([65.481, 128.553, 24.966]) / 255.0
_Y_OFFSET = 16.0 / 255.0

ImageLike = Union[Image, np.ndarray]
EmbeddingLike = Union[SemanticEmbedding, np.ndarray, Sequence[float]]


def _pixels(x: ImageLike) -> np.ndarray:
    arr = x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def to_luma(pixels: np.ndarray) -> np.ndarray:
    if pixels.shape[2] == 1:
        return pixels
    return (pixels @ _Y_WEIGHTS + _Y_OFFSET)[:, :, None]


def prepare(pred: ImageLike, target: ImageLike, protocol: Protocol, crop: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Clamp, convert and crop both inputs the same way."""
    p, t = _pixels(pred), _pixels(target)
    if p.shape != t.shape:
        raise RejectedInputError(f"prediction {p.shape} and target {t.shape} differ in shape")
    if protocol == "y_channel_cropped":
        p, t = to_luma(p), to_luma(t)
        if crop > 0:
            if min(p.shape[:2]) <= 2 * crop:
                raise RejectedInputError(f"image {p.shape[:2]} too small for a {crop}-pixel border crop")
            p, t = p[crop:-crop, crop:-crop], t[crop:-crop, crop:-crop]
    elif protocol != "rgb_full":
        raise RejectedInputError(f"unknown protocol '{protocol}'")
    return p, t


def psnr(pred: ImageLike, target: ImageLike, protocol: Protocol = "y_channel_cropped", crop: int = 0) -> float:
    p, t = prepare(pred, target, protocol, crop)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(pred: ImageLike, target: ImageLike, protocol: Protocol = "y_channel_cropped", crop: int = 0) -> float:
    """Single-scale SSIM, 11×11 Gaussian window, valid positions only, averaged over channels."""
    p, t = prepare(pred, target, protocol, crop)
    if min(p.shape[:2]) < SSIM_WINDOW:
        raise RejectedInputError(f"image {p.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    x = torch.from_numpy(np.ascontiguousarray(p.transpose(2, 0, 1)))[:, None]
    y = torch.from_numpy(np.ascontiguousarray(t.transpose(2, 0, 1)))[:, None]
    window = _gaussian_window()[None, None]
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    mu_x, mu_y = F.conv2d(x, window), F.conv2d(y, window)
    sigma_xx = F.conv2d(x * x, window) - mu_x ** 2
    sigma_yy = F.conv2d(y * y, window) - mu_y ** 2
    sigma_xy = F.conv2d(x * y, window) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_xx + sigma_yy + c2)
    return float((numerator / denominator).mean())


def score_images(
    preds: Sequence[ImageLike],
    targets: Sequence[ImageLike],
    protocol: Protocol = "y_channel_cropped",
    crop: int = 0,
    names: Optional[Sequence[str]] = None,
) -> List[ImageScore]:
    if len(preds) != len(targets):
        raise RejectedInputError(f"{len(preds)} predictions for {len(targets)} targets")
    rows = []
    for i, (pred, target) in enumerate(zip(preds, targets)):
        name = names[i] if names is not None else (target.name if isinstance(target, Image) else str(i))
        rows.append(ImageScore(image=name, psnr=psnr(pred, target, protocol, crop), ssim=ssim(pred, target, protocol, crop)))
    return rows


def summarize(rows: Sequence[ImageScore], protocol: Protocol) -> MetricReport:
    if not rows:
        raise EmptyDatasetError("no image to summarize")
    return MetricReport(
        psnr_db=float(np.mean([r.psnr for r in rows])),
        ssim=float(np.mean([r.ssim for r in rows])),
        n_images=len(rows),
        protocol=protocol,
    )


def _crop_for(protocol: Protocol, scale: int) -> int:
    return scale if protocol == "y_channel_cropped" else 0


def _float64(params: ParameterSet) -> ParameterSet:
    return params if params.dtype == torch.float64 else params.to(torch.float64)


def predict(params: ParameterSet, cfg: NetworkConfig, lr: Image, enc: Optional[EncoderSpec] = None) -> Image:
    """Forward on one LR image in float64, clamped to [0, 1]."""
    params = _float64(params)
    emb = None
    if cfg.use_alignment:
        if enc is None:
            raise RejectedInputError("an encoder spec is needed when semantic alignment is enabled")
        emb = EncoderFactory.create(enc).encode(lr)
    with torch.no_grad():
        out = forward(params, cfg, lr, emb)
    return Image.from_tensor(out, source_path=lr.source_path, clamp=True)


def evaluate_images(
    params: ParameterSet,
    cfg: NetworkConfig,
    ds: PairedDataset,
    protocol: Protocol = "y_channel_cropped",
    enc: Optional[EncoderSpec] = None,
) -> List[ImageScore]:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    params = _float64(params)
    preds = [predict(params, cfg, lr, enc) for lr, _ in ds.pairs]
    targets = [hr for _, hr in ds.pairs]
    return score_images(preds, targets, protocol, _crop_for(protocol, ds.scale))


def evaluate(
    params: ParameterSet,
    cfg: NetworkConfig,
    ds: PairedDataset,
    protocol: Protocol = "y_channel_cropped",
    enc: Optional[EncoderSpec] = None,
) -> MetricReport:
    report = summarize(evaluate_images(params, cfg, ds, protocol, enc), protocol)
    logger.info("evaluation_finished", domain=ds.domain_tag, **report.model_dump())
    return report


def bicubic_images(ds: PairedDataset, protocol: Protocol = "y_channel_cropped") -> List[ImageScore]:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    preds = [bicubic_upsample(lr, ds.scale) for lr, _ in ds.pairs]
    targets = [hr for _, hr in ds.pairs]
    return score_images(preds, targets, protocol, _crop_for(protocol, ds.scale))


def evaluate_bicubic(ds: PairedDataset, protocol: Protocol = "y_channel_cropped") -> MetricReport:
    """Bicubic-upsampling baseline on the same pairs and protocol."""
    return summarize(bicubic_images(ds, protocol), protocol)


# Domain gap ---------------------------------------------------------------

def _matrix(embs: Sequence[EmbeddingLike]) -> np.ndarray:
    rows = [e.values if isinstance(e, SemanticEmbedding) else np.asarray(e) for e in embs]
    return np.vstack([np.asarray(r, dtype=np.float64).reshape(1, -1) for r in rows])


def parse_kernel(kernel: str) -> Tuple[str, Optional[float]]:
    """'linear', 'rbf' (median heuristic) or 'rbf(<sigma>)'."""
    kernel = kernel.strip().lower()
    if kernel == "linear":
        return "linear", None
    if kernel == "rbf":
        return "rbf", None
    if kernel.startswith("rbf(") and kernel.endswith(")"):
        sigma = float(kernel[4:-1])
        if sigma <= 0:
            raise RejectedInputError(f"rbf bandwidth must be positive, got {sigma}")
        return "rbf", sigma
    raise RejectedInputError(f"unknown kernel '{kernel}'")


def median_bandwidth(pooled: np.ndarray) -> float:
    d = pairwise_distances(pooled)
    off = d[np.triu_indices_from(d, k=1)]
    off = off[off > 0]
    return float(np.median(off)) if off.size else 1.0


def kernel_label(kernel: str, pooled: np.ndarray) -> str:
    name, sigma = parse_kernel(kernel)
    if name == "linear":
        return "linear"
    return f"rbf({sigma if sigma is not None else median_bandwidth(pooled):.6g})"


def kernel_matrices(a: np.ndarray, b: np.ndarray, kernel: str = "linear") -> Tuple[np.ndarray, np.ndarray, np.ndarray, str]:
    name, sigma = parse_kernel(kernel)
    if name == "linear":
        params: Dict[str, float] = {}
        label = "linear"
    else:
        sigma = sigma if sigma is not None else median_bandwidth(np.vstack([a, b]))
        params = {"gamma": 1.0 / (2.0 * sigma ** 2)}
        label = f"rbf({sigma:.6g})"
    k_aa = pairwise_kernels(a, a, metric=name, **params)
    k_bb = pairwise_kernels(b, b, metric=name, **params)
    k_ab = pairwise_kernels(a, b, metric=name, **params)
    return k_aa, k_bb, k_ab, label


def _within_mean(k: np.ndarray) -> float:
    n = k.shape[0]
    if n == 1:
        # a singleton has no off-diagonal pair; its only term is k(x, x)
        return float(k[0, 0])
    return float((k.sum() - np.trace(k)) / (n * (n - 1)))


def mmd_squared(embs_a: Sequence[EmbeddingLike], embs_b: Sequence[EmbeddingLike], kernel: str = "linear") -> float:
    """Unbiased (U-statistic) MMD², not floored."""
    if len(embs_a) == 0 or len(embs_b) == 0:
        raise RejectedInputError("MMD needs two non-empty embedding sets")
    a, b = _matrix(embs_a), _matrix(embs_b)
    if a.shape[1] != b.shape[1]:
        raise RejectedInputError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    k_aa, k_bb, k_ab, _ = kernel_matrices(a, b, kernel)
    return _within_mean(k_aa) + _within_mean(k_bb) - 2.0 * float(k_ab.mean())


def mmd(embs_a: Sequence[EmbeddingLike], embs_b: Sequence[EmbeddingLike], kernel: str = "linear") -> float:
    return math.sqrt(max(0.0, mmd_squared(embs_a, embs_b, kernel)))


def mmd_matrix(groups: Mapping[str, Sequence[EmbeddingLike]], kernel: str = "linear") -> Dict[str, Dict[str, float]]:
    tags = list(groups)
    out: Dict[str, Dict[str, float]] = {t: {} for t in tags}
    for i, a in enumerate(tags):
        out[a][a] = mmd(groups[a], groups[a], kernel)
        for b in tags[i + 1:]:
            value = mmd(groups[a], groups[b], kernel)
            out[a][b] = value
            out[b][a] = value
    return out


def project_2d(points: np.ndarray, seed: int, perplexity: float = TSNE_PERPLEXITY) -> Tuple[np.ndarray, str, bool]:
    """t-SNE when there are enough points for the perplexity, principal axes otherwise."""
    n = points.shape[0]
    if n > perplexity:
        tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
        return tsne.fit_transform(points), "tsne", False

    logger.warning("tsne_fallback_pca", points=n, perplexity=perplexity)
    coords = np.zeros((n, 2))
    components = min(2, n, points.shape[1])
    if n > 1 and components > 0:
        projected = PCA(n_components=components, random_state=seed).fit_transform(points)
        coords[:, :components] = projected
    return coords, "pca", True


DatasetSource = Union[str, Path, Sequence[Image]]


def _images_of(source: DatasetSource) -> List[Image]:
    if isinstance(source, (str, Path)):
        images, _ = load_images(source)
    else:
        images = list(source)
    if not images:
        raise EmptyDatasetError(f"no decodable image in {source}")
    return images


def export_embeddings_2d(
    datasets: Sequence[Tuple[str, DatasetSource]],
    spec: EncoderSpec,
    seed: int = 0,
    kernel: str = "linear",
    perplexity: float = TSNE_PERPLEXITY,
) -> DomainGapReport:
    """
    Encodes every image of every dataset, projects the pooled embeddings to
    2-D and attaches the pairwise MMD matrix across tags. `mmd` is the value
    between the first two tags (0 with a single dataset).
    """
    if not datasets:
        raise RejectedInputError("at least one dataset is required")
    encoder = EncoderFactory.create(spec)
    groups: Dict[str, List[SemanticEmbedding]] = {}
    for tag, source in datasets:
        groups.setdefault(tag, []).extend(encoder.encode_batch(_images_of(source)))

    tags = list(groups)
    pooled = np.vstack([_matrix(groups[t]) for t in tags])
    labels = [t for t in tags for _ in groups[t]]
    coords, reduction, fallback = project_2d(pooled, seed, perplexity)

    matrix = mmd_matrix(groups, kernel)
    first = groups[tags[0]]
    n_a = len(first)
    n_b = len(pooled) - n_a
    gap = matrix[tags[0]][tags[1]] if len(tags) > 1 else 0.0
    label = kernel_label(kernel, pooled)

    report = DomainGapReport(
        mmd=gap,
        kernel=label,
        n_a=n_a,
        n_b=n_b,
        coords_2d=[(float(x), float(y), tag) for (x, y), tag in zip(coords, labels)],
        mmd_matrix=matrix,
        reduction=reduction,
        fallback_used=fallback,
    )
    logger.info("domain_gap_exported", tags=tags, points=len(labels), reduction=reduction, mmd=gap)
    return report
