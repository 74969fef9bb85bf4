"""
Source-domain trainer
Per batch: embed the LR batch with the frozen encoder, run the network,
combine the three loss terms and take one Adam step on every parameter.
Batches are seeded by (seed, epoch, batch) so a resumed run replays exactly
the batches the uninterrupted run would have drawn.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import torch

from ..models.reports import CheckpointMeta, TrainLogRow
from ..models.run_config import EncoderSpec, NetworkConfig, TrainConfig
from ..utils.csv_log import CsvLog
from ..utils.errors import NonFiniteGradientError, RejectedInputError, ScaleMismatchError, TrainingDivergedError
from ..utils.logger import get_logger
from .checkpoint import Checkpoint, OptimizerSnapshot, make_meta, save_checkpoint
from .data_pipeline import PairedDataset, apply_patch_plan, plan_patch_batch, stack_pairs
from .losses import LossTerms, perceptual_extractor, total_loss
from .semantic_encoder import EncoderFactory
from .sr_network import ParameterSet, forward, init_network

logger = get_logger()

TRAIN_LOG_FIELDS = ["step", "epoch", "lr", "total", "pixel", "perceptual", "semantic"]

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class OptimizerState:
    """
    Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) bound to the tensors of one
    ParameterSet. Updates happen in place on those tensors.
    """

    BETAS = (0.9, 0.999)
    EPS = 1e-8

    def __init__(self, params: ParameterSet, lr: float = 1e-4) -> None:
        self.names: Tuple[str, ...] = params.names
        self._tensors: List[torch.Tensor] = [params.entries[name] for name in self.names]
        self.optimizer = torch.optim.Adam(self._tensors, lr=lr, betas=self.BETAS, eps=self.EPS, foreach=False)

    @property
    def step(self) -> int:
        state = self.optimizer.state.get(self._tensors[0])
        if not state:
            return 0
        return int(state["step"])

    def is_bound_to(self, params: ParameterSet) -> bool:
        return params.names == self.names and all(params.entries[n] is t for n, t in zip(self.names, self._tensors))

    def snapshot(self) -> OptimizerSnapshot:
        first, second = OrderedDict(), OrderedDict()
        for name, tensor in zip(self.names, self._tensors):
            state = self.optimizer.state.get(tensor)
            first[name] = state["exp_avg"].clone() if state else torch.zeros_like(tensor)
            second[name] = state["exp_avg_sq"].clone() if state else torch.zeros_like(tensor)
        return OptimizerSnapshot(step=self.step, first_moment=first, second_moment=second)

    def restore(self, snap: OptimizerSnapshot) -> None:
        if snap.step == 0:
            self.optimizer.state.clear()
            return
        for name, tensor in zip(self.names, self._tensors):
            self.optimizer.state[tensor] = {
                "step": torch.tensor(float(snap.step), dtype=torch.float32),
                "exp_avg": snap.first_moment[name].to(tensor.dtype).clone(),
                "exp_avg_sq": snap.second_moment[name].to(tensor.dtype).clone(),
            }


def optimizer_step(
    params: ParameterSet,
    opt: OptimizerState,
    lr: float,
    max_grad_norm: Optional[float] = None,
) -> Tuple[ParameterSet, OptimizerState]:
    """One bias-corrected Adam update from `params.grads`, applied in place."""
    if not opt.is_bound_to(params):
        raise RejectedInputError("optimizer state is bound to a different parameter set")
    for name, tensor in zip(opt.names, opt._tensors):
        grad = params.grads[name]
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteGradientError(name)
        tensor.grad = grad.detach().clone()
    if max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(opt._tensors, max_grad_norm)
    for group in opt.optimizer.param_groups:
        group["lr"] = lr
    opt.optimizer.step()
    for tensor in opt._tensors:
        tensor.grad = None
    return params, opt


def scheduled_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.scheduler.kind == "none":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 ** (epoch // cfg.scheduler.k)


def loss_gradients(loss: torch.Tensor, leaves: "OrderedDict[str, torch.Tensor]") -> "OrderedDict[str, torch.Tensor]":
    """d loss / d leaf for every leaf; parameters off the graph get zeros."""
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    return OrderedDict(
        (name, g if g is not None else torch.zeros_like(leaf))
        for (name, leaf), g in zip(leaves.items(), grads)
    )


@dataclass
class TrainResult:
    params: ParameterSet
    log: List[TrainLogRow]
    optimizer: OptimizerState
    step: int
    checkpoints: List[Path] = field(default_factory=list)


@dataclass
class Trainer:
    """Owns the ParameterSet and the OptimizerState for the duration of a run."""
    ds: PairedDataset
    cfg: TrainConfig
    net_cfg: NetworkConfig
    enc: EncoderSpec
    log_path: Optional[Path] = None
    checkpoint_dir: Optional[Path] = None
    extra_meta: dict = field(default_factory=dict)
    on_step: Optional[Callable[[TrainLogRow], None]] = None

    def __post_init__(self) -> None:
        if len(self.ds) == 0:
            raise RejectedInputError("training dataset is empty")
        if self.ds.scale != self.net_cfg.scale:
            raise ScaleMismatchError(self.net_cfg.scale, self.ds.scale, "dataset scale")
        if self.net_cfg.use_alignment and self.net_cfg.clip_dim != self.enc.embed_dim:
            raise RejectedInputError(f"clip_dim {self.net_cfg.clip_dim} != encoder embed_dim {self.enc.embed_dim}")
        self.dtype = DTYPES[self.cfg.dtype]
        self.encoder = EncoderFactory.create(self.enc)
        self.extractor = perceptual_extractor(self.enc)
        self.steps_per_epoch = self.cfg.steps_per_epoch or math.ceil(len(self.ds) / self.cfg.batch_size)
        total = self.cfg.epochs * self.steps_per_epoch
        self.total_steps = total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)
        self.patch = min(self.cfg.patch_size, self.ds.min_lr_size)
        if self.patch != self.cfg.patch_size:
            logger.warning("patch_size_clipped", requested=self.cfg.patch_size, used=self.patch)

    def meta(self, step: int) -> CheckpointMeta:
        return make_meta(
            self.net_cfg,
            self.enc.encoder_id,
            self.cfg.seed,
            step,
            self.cfg.weights.model_dump(),
            kind="train",
            extra={"encoder": self.enc.model_dump(mode="json"), "train": self.cfg.model_dump(mode="json"), **self.extra_meta},
        )

    def batch_indices(self, step: int) -> Tuple[int, int]:
        return divmod(step, self.steps_per_epoch)

    def step_loss(self, params: ParameterSet, step: int) -> Tuple[LossTerms, "OrderedDict[str, torch.Tensor]", list]:
        epoch, batch = self.batch_indices(step)
        plans = plan_patch_batch(self.ds, self.patch, self.cfg.batch_size, [self.cfg.seed, epoch, batch])
        lr_t, hr_t = stack_pairs([apply_patch_plan(self.ds, p, self.patch) for p in plans], self.dtype)

        emb = None
        if self.net_cfg.use_alignment:
            with torch.no_grad():
                emb = self.encoder.embed(lr_t)

        leaves = params.leaves()
        pred = forward(params, self.net_cfg, lr_t, emb, entries=leaves)
        terms = total_loss(pred, hr_t, self.cfg.weights, self.enc, self.extractor)
        return terms, leaves, [p.index for p in plans]

    def run(self, params: Optional[ParameterSet] = None, resume: Optional[Checkpoint] = None) -> TrainResult:
        start = 0
        if resume is not None:
            params = resume.params.to(self.dtype)
            start = resume.meta.step
            logger.warning("training_resumed", step=start, encoder=resume.meta.encoder_id)
        elif params is None:
            params = init_network(self.net_cfg, self.cfg.seed, self.dtype)
        else:
            params = params.to(self.dtype)

        opt = OptimizerState(params, self.cfg.learning_rate)
        if resume is not None and resume.optimizer is not None:
            opt.restore(resume.optimizer)

        csv = CsvLog(self.log_path, TRAIN_LOG_FIELDS, append=resume is not None) if self.log_path else None
        rows: List[TrainLogRow] = []
        saved: List[Path] = []

        logger.info(
            "training_started",
            start_step=start,
            total_steps=self.total_steps,
            steps_per_epoch=self.steps_per_epoch,
            batch_size=self.cfg.batch_size,
            patch=self.patch,
            pairs=len(self.ds),
        )

        for step in range(start, self.total_steps):
            epoch, _ = self.batch_indices(step)
            lr = scheduled_lr(self.cfg, epoch)
            terms, leaves, indices = self.step_loss(params, step)

            if not terms.is_finite():
                snapshot = {"step": step, "epoch": epoch, "batch_indices": indices, **terms.values()}
                logger.error("training_diverged", **snapshot)
                raise TrainingDivergedError(f"non-finite loss at step {step}", snapshot)

            params.set_grads(loss_gradients(terms.total, leaves))
            optimizer_step(params, opt, lr, self.cfg.max_grad_norm)

            row = TrainLogRow.from_report(step, epoch, lr, terms.report())
            rows.append(row)
            if csv is not None:
                csv.append(row)
            if self.on_step is not None:
                self.on_step(row)
            logger.debug("train_step", step=step, lr=lr, **terms.values())

            done = step + 1
            if self.checkpoint_dir is not None and done % self.cfg.checkpoint_every == 0:
                saved.append(save_checkpoint(params, opt.snapshot(), self.meta(done), self.checkpoint_dir / f"step_{done}"))

        final_step = max(start, self.total_steps)
        if self.checkpoint_dir is not None:
            saved.append(save_checkpoint(params, opt.snapshot(), self.meta(final_step), self.checkpoint_dir / "final"))

        logger.info("training_finished", steps=len(rows), final_step=final_step, last_total=rows[-1].total if rows else None)
        return TrainResult(params=params, log=rows, optimizer=opt, step=final_step, checkpoints=saved)


def train(
    ds: PairedDataset,
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    enc: EncoderSpec,
    params: Optional[ParameterSet] = None,
    resume: Optional[Checkpoint] = None,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> Tuple[ParameterSet, List[TrainLogRow]]:
    trainer = Trainer(
        ds,
        cfg,
        net_cfg,
        enc,
        log_path=Path(log_path) if log_path else None,
        checkpoint_dir=Path(checkpoint_dir) if checkpoint_dir else None,
    )
    result = trainer.run(params=params, resume=resume)
    return result.params, result.log


def smoothed(values: Sequence[float], window: int = 10) -> List[float]:
    """Trailing moving average; entry i averages values[i - window + 1 : i + 1]."""
    out = []
    running = 0.0
    for i, v in enumerate(values):
        running += v
        if i >= window:
            running -= values[i - window]
        out.append(running / min(i + 1, window))
    return out
