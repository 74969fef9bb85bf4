"""
Few-shot meta-adaptation
Episodic inner updates θ' = θ − α ⊙ ∇L_support(θ) with one learned step-size
array per parameter array, and an outer update of those step sizes from the
query loss. The outer update is first order: ∂L_query(θ')/∂α is estimated as
−g_support ⊙ g_query, dropping the Hessian term. Reptile mode leaves α alone
and moves the base parameters toward θ' instead.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import torch

from ..models.reports import EpisodeRecord
from ..models.run_config import AdaptConfig, EncoderSpec, NetworkConfig
from ..utils.errors import NonFiniteGradientError, RejectedInputError, ScaleMismatchError
from ..utils.logger import get_logger
from .data_pipeline import Pair, PairedDataset, apply_patch_plan, plan_patch_batch, sample_episode, stack_pairs
from .losses import perceptual_extractor, total_loss
from .semantic_encoder import EncoderFactory
from .sr_network import ParameterSet, forward_values
from .trainer import loss_gradients

logger = get_logger()

MetaMode = Literal["maml_first_order", "reptile"]
MODES = ("maml_first_order", "reptile")

# (parameter values, batch) -> scalar loss averaged over the batch. An objective may
# also expose `split(batch) -> [(weight, chunk)]`; losses and gradients are then
# the weighted sums over the chunks.
Objective = Callable[[Mapping[str, torch.Tensor], Sequence[Any]], torch.Tensor]


@dataclass
class MetaLearnerState:
    alphas: "OrderedDict[str, torch.Tensor]"
    gamma: float
    mode: MetaMode = "maml_first_order"
    alpha_max: float = 1e-2
    reptile_step: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise RejectedInputError(f"unknown meta-learning mode '{self.mode}'")
        if self.gamma < 0:
            raise RejectedInputError(f"gamma must be >= 0, got {self.gamma}")
        self.alphas = OrderedDict(self.alphas)

    @classmethod
    def initial(
        cls,
        params: ParameterSet,
        alpha_init: float,
        gamma: float,
        mode: MetaMode = "maml_first_order",
        alpha_max: float = 1e-2,
        reptile_step: float = 0.5,
    ) -> "MetaLearnerState":
        if not 0 <= alpha_init <= alpha_max:
            raise RejectedInputError(f"alpha_init {alpha_init} outside [0, {alpha_max}]")
        alphas = OrderedDict((name, torch.full_like(value, alpha_init)) for name, value in params.items())
        return cls(alphas, gamma, mode, alpha_max, reptile_step)

    @classmethod
    def from_config(cls, params: ParameterSet, cfg: AdaptConfig) -> "MetaLearnerState":
        return cls.initial(params, cfg.alpha_init, cfg.gamma, cfg.mode, cfg.alpha_max, cfg.reptile_step)

    def covers(self, params: ParameterSet) -> bool:
        return tuple(self.alphas) == params.names and all(
            self.alphas[n].shape == params[n].shape for n in params.names
        )

    def mean_alpha(self) -> float:
        total = sum(float(a.sum()) for a in self.alphas.values())
        count = sum(a.numel() for a in self.alphas.values())
        return total / count if count else 0.0

    def with_alphas(self, alphas: Mapping[str, torch.Tensor]) -> "MetaLearnerState":
        return MetaLearnerState(OrderedDict(alphas), self.gamma, self.mode, self.alpha_max, self.reptile_step)


def _check_state(state: MetaLearnerState, params: ParameterSet) -> None:
    if not state.covers(params):
        raise RejectedInputError("meta-learner step sizes do not cover the parameter set")


def _finite_or_raise(grads: Mapping[str, torch.Tensor]) -> None:
    for name, grad in grads.items():
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteGradientError(name)


def _chunks(objective: Objective, batch: Sequence[Any]) -> List[Tuple[float, Any]]:
    split = getattr(objective, "split", None)
    return list(split(batch)) if split is not None else [(1.0, batch)]


def _gradients(objective: Objective, values: Mapping[str, torch.Tensor], batch: Sequence[Any]) -> Tuple[float, "OrderedDict[str, torch.Tensor]"]:
    leaves = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in values.items())
    total = 0.0
    grads: "OrderedDict[str, torch.Tensor]" = OrderedDict((k, torch.zeros_like(v)) for k, v in values.items())
    for weight, chunk in _chunks(objective, batch):
        loss = objective(leaves, chunk)
        for name, grad in loss_gradients(loss, leaves).items():
            grads[name] += weight * grad
        total += weight * float(loss.detach())
    _finite_or_raise(grads)
    return total, grads


def evaluate_loss(objective: Objective, values: Mapping[str, torch.Tensor], batch: Sequence[Any]) -> float:
    with torch.no_grad():
        return sum(weight * float(objective(values, chunk)) for weight, chunk in _chunks(objective, batch))


def inner_adapt(
    params: ParameterSet,
    state: MetaLearnerState,
    support: Sequence[Any],
    objective: Objective,
    inner_steps: int = 1,
) -> ParameterSet:
    """
    Functional update; `params` is left untouched. The returned set's gradient
    slots hold the support gradients summed over the inner steps.
    """
    if not support:
        raise RejectedInputError("support set is empty")
    if inner_steps < 1:
        raise RejectedInputError(f"inner_steps must be >= 1, got {inner_steps}")
    _check_state(state, params)

    current = OrderedDict((k, v.detach().clone()) for k, v in params.items())
    accumulated = OrderedDict((k, torch.zeros_like(v)) for k, v in current.items())
    for _ in range(inner_steps):
        _, grads = _gradients(objective, current, support)
        current = OrderedDict((k, current[k] - state.alphas[k] * grads[k]) for k in current)
        for k in accumulated:
            accumulated[k] += grads[k]
    return params.replace(current, grads=accumulated)


@dataclass
class MetaStep:
    state: MetaLearnerState
    params: ParameterSet
    query_loss: float


def meta_step(
    state: MetaLearnerState,
    params: ParameterSet,
    adapted: ParameterSet,
    query: Sequence[Any],
    objective: Objective,
    mode: Optional[MetaMode] = None,
) -> MetaStep:
    if not query:
        raise RejectedInputError("query set is empty")
    if mode is not None and mode != state.mode:
        raise RejectedInputError(f"meta-learner state is in '{state.mode}' mode, update requested '{mode}'")
    _check_state(state, params)
    if adapted.names != params.names:
        raise RejectedInputError("adapted parameters do not match the base parameter set")

    if state.mode == "reptile":
        loss = evaluate_loss(objective, adapted.entries, query)
        moved = OrderedDict(
            (k, params[k] + state.reptile_step * (adapted[k] - params[k])) for k in params.names
        )
        return MetaStep(state, params.replace(moved), loss)

    loss, query_grads = _gradients(objective, adapted.entries, query)
    if state.gamma == 0:
        return MetaStep(state, params, loss)

    alphas = OrderedDict()
    for name, alpha in state.alphas.items():
        # first-order ∂L_query(θ')/∂α
        meta_grad = -adapted.grads[name] * query_grads[name]
        alphas[name] = torch.clamp(alpha - state.gamma * meta_grad, 0.0, state.alpha_max)
    return MetaStep(state.with_alphas(alphas), params, loss)


def meta_update(
    state: MetaLearnerState,
    params: ParameterSet,
    adapted: ParameterSet,
    query: Sequence[Any],
    objective: Objective,
    mode: Optional[MetaMode] = None,
) -> Tuple[MetaLearnerState, ParameterSet]:
    """New step sizes (maml_first_order) or moved base parameters (reptile)."""
    result = meta_step(state, params, adapted, query, objective, mode)
    return result.state, result.params


@dataclass(frozen=True)
class PairChunk:
    """Rows [start, stop) of the batch built for `pairs`."""
    pairs: Tuple[Pair, ...]
    start: int
    stop: int


class SRObjective:
    """
    Support/query loss of the SR network: one co-located patch per pair, LR
    patch embedded by the frozen encoder, total loss averaged over the batch.
    Sets larger than `cfg.batch_size` are split into chunks of at most that
    many pairs; patches are planned once for the whole set.
    """

    CACHED_BATCHES = 4

    def __init__(
        self,
        net_cfg: NetworkConfig,
        enc: EncoderSpec,
        cfg: AdaptConfig,
        scale: int,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        self.net_cfg = net_cfg
        self.enc = enc
        self.weights = cfg.weights
        self.patch_size = cfg.patch_size
        self.batch_size = cfg.batch_size
        self.seed = cfg.seed
        self.scale = scale
        self.dtype = dtype
        self.encoder = EncoderFactory.create(enc)
        self.extractor = perceptual_extractor(enc)
        self._batches: "OrderedDict[tuple, tuple]" = OrderedDict()

    def batch(self, pairs: Sequence[Pair]) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        key = tuple(id(p) for p in pairs)
        cached = self._batches.get(key)
        if cached is not None:
            return cached[1:]
        ds = PairedDataset(pairs=tuple(pairs), scale=self.scale)
        patch = min(self.patch_size, ds.min_lr_size)
        plans = plan_patch_batch(ds, patch, len(ds), [self.seed, len(ds)], indices=range(len(ds)))
        lr_t, hr_t = stack_pairs([apply_patch_plan(ds, p, patch) for p in plans], self.dtype)
        emb = None
        if self.net_cfg.use_alignment:
            with torch.no_grad():
                emb = self.encoder.embed(lr_t)
        # the pairs ride along so their ids stay unique while cached
        self._batches[key] = (tuple(pairs), lr_t, hr_t, emb)
        while len(self._batches) > self.CACHED_BATCHES:
            self._batches.popitem(last=False)
        return lr_t, hr_t, emb

    def split(self, pairs: Sequence[Pair]) -> List[Tuple[float, Union[Sequence[Pair], PairChunk]]]:
        """(weight, chunk) with weights proportional to chunk length and summing to 1."""
        n = len(pairs)
        if n <= self.batch_size:
            return [(1.0, pairs)]
        pairs = tuple(pairs)
        out = []
        for start in range(0, n, self.batch_size):
            stop = min(start + self.batch_size, n)
            out.append(((stop - start) / n, PairChunk(pairs, start, stop)))
        return out

    def __call__(self, values: Mapping[str, torch.Tensor], pairs: Union[Sequence[Pair], PairChunk]) -> torch.Tensor:
        if isinstance(pairs, PairChunk):
            lr_t, hr_t, emb = self.batch(pairs.pairs)
            rows = slice(pairs.start, pairs.stop)
            lr_t, hr_t, emb = lr_t[rows], hr_t[rows], emb[rows] if emb is not None else None
        else:
            lr_t, hr_t, emb = self.batch(pairs)
        pred = forward_values(values, self.net_cfg, lr_t, emb)
        return total_loss(pred, hr_t, self.weights, self.enc, self.extractor).total


@dataclass
class AdaptResult:
    params: ParameterSet
    state: Optional[MetaLearnerState]
    episode_log: List[EpisodeRecord] = field(default_factory=list)


def run_episodes(
    params: ParameterSet,
    state: MetaLearnerState,
    episodes: Iterable[Tuple[Sequence[Any], Sequence[Any]]],
    objective: Objective,
    inner_steps: int = 1,
) -> Tuple[ParameterSet, MetaLearnerState, List[EpisodeRecord], Optional[Sequence[Any]]]:
    """Sequential support → inner update → query → meta update cycles."""
    base = params.clone()
    log: List[EpisodeRecord] = []
    last_support = None
    for i, (support, query) in enumerate(episodes):
        pre = evaluate_loss(objective, base.entries, support)
        adapted = inner_adapt(base, state, support, objective, inner_steps)
        post = evaluate_loss(objective, adapted.entries, support)
        step = meta_step(state, base, adapted, query, objective)
        state, base = step.state, step.params
        record = EpisodeRecord(
            episode=i,
            support_loss_pre=pre,
            support_loss_post=post,
            query_loss=step.query_loss,
            mean_alpha=state.mean_alpha(),
        )
        log.append(record)
        last_support = support
        logger.info("adapt_episode", **record.model_dump())
    return base, state, log, last_support


def adapt(
    params: ParameterSet,
    target_ds: PairedDataset,
    cfg: AdaptConfig,
    net_cfg: NetworkConfig,
    enc: EncoderSpec,
    objective: Optional[Objective] = None,
    state: Optional[MetaLearnerState] = None,
) -> AdaptResult:
    """
    Runs `cfg.episodes` episodes on the target set, then returns the base
    parameters adapted once more on the last episode's support set.
    """
    if target_ds.scale != net_cfg.scale:
        raise ScaleMismatchError(net_cfg.scale, target_ds.scale, "target dataset scale")
    if len(target_ds) < cfg.shots + cfg.query_size:
        raise RejectedInputError(
            f"adaptation needs {cfg.shots + cfg.query_size} pairs, '{target_ds.domain_tag}' has {len(target_ds)}"
        )
    state = state or MetaLearnerState.from_config(params, cfg)
    if cfg.episodes == 0:
        logger.info("adapt_skipped", reason="zero episodes")
        return AdaptResult(params=params, state=state, episode_log=[])

    objective = objective or SRObjective(net_cfg, enc, cfg, target_ds.scale, params.dtype)
    splits = (sample_episode(target_ds, cfg.shots, cfg.query_size, cfg.seed + ep) for ep in range(cfg.episodes))
    episodes = ((split.support, split.query) for split in splits)

    logger.info("adapt_started", episodes=cfg.episodes, shots=cfg.shots, query_size=cfg.query_size, mode=cfg.mode)
    base, state, log, last_support = run_episodes(params, state, episodes, objective, cfg.inner_steps)
    adapted = inner_adapt(base, state, last_support, objective, cfg.inner_steps)
    logger.info("adapt_finished", episodes=len(log), mean_alpha=state.mean_alpha())
    return AdaptResult(params=adapted, state=state, episode_log=log)
