"""Two-stage training: backbone first, then frozen-backbone branch distillation.

Stage one jointly optimizes the backbone and the final classifier with
plain cross entropy; exit branches are untouched.  Stage two freezes
the backbone and final classifier and trains every exit head and
internal classifier on the combined distillation objective plus a
per-exit cross entropy that gives label signal to the classifiers the
distillation terms skip.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .checkpoint import save_checkpoint
from .data import LabeledDataset, augment_batch
from .distill import (
    AlignModule,
    DistillationParts,
    FeatureBundle,
    FreezeMask,
    heterogeneous_loss,
    heterogeneous_ordinals,
    homogeneous_gah_loss,
    homogeneous_lph_loss,
    prediction_loss,
    total_loss,
)
from .heads import ExitBranch, ExitPlacement, pooled_token_count
from .losses import cross_entropy
from .metrics import MetricsWriter
from .optim import Optimizer
from .vit import EncoderOutput, ViTModel


class UnfrozenBackboneError(AssertionError):
    """Stage two modified a parameter the freeze mask was protecting."""


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.5
    temperature: float = 4.0
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-2
    epochs_stage1: int = 8
    epochs_stage2: int = 12
    batch_size: int = 32
    seed: int = 0
    # Adam suits the backbone; stage 2 uses plain momentum SGD because the
    # Gram-matrix distillation term diverges under scale-invariant updates.
    optimizer: str = "adam"
    optimizer_stage2: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 1.0  # global gradient-norm clip; 0 disables
    lr_schedule: str = "cosine"  # stage-2 decay: "cosine" or "constant"

    def stage2_lr(self, epoch: int) -> float:
        """Learning rate for a 1-based stage-2 epoch."""
        if self.lr_schedule == "constant" or self.epochs_stage2 <= 1:
            return self.lr_stage2
        progress = (epoch - 1) / self.epochs_stage2
        return self.lr_stage2 * 0.5 * (1.0 + math.cos(math.pi * progress))

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients down so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total**0.5
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def make_optimizer(params, lr: float, cfg: TrainConfig, kind: str | None = None) -> Optimizer:
    return Optimizer(
        params,
        lr=lr,
        kind=kind if kind is not None else cfg.optimizer,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def full_state(model: ViTModel, branches: list[ExitBranch] | None = None) -> dict[str, np.ndarray]:
    state = {f"model.{k}": v for k, v in model.state_dict().items()}
    for i, branch in enumerate(branches or []):
        state.update({f"branch{i}.{k}": v for k, v in branch.state_dict().items()})
    return state


def load_full_state(
    state: dict[str, np.ndarray], model: ViTModel, branches: list[ExitBranch] | None = None
) -> None:
    model.load_state_dict(
        {k[len("model.") :]: v for k, v in state.items() if k.startswith("model.")}
    )
    for i, branch in enumerate(branches or []):
        prefix = f"branch{i}."
        sub = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
        if sub:
            branch.load_state_dict(sub)


def stage1_train(
    model: ViTModel,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    out_dir: str | None = None,
    writer: MetricsWriter | None = None,
    augment: tuple[bool, bool] = (False, False),
) -> list[dict[str, float]]:
    """Cross-entropy training of backbone plus final classifier."""
    model.train()
    opt = make_optimizer(model.parameters(), cfg.lr_stage1, cfg)
    crop, flip = augment
    history = []
    for epoch in range(1, cfg.epochs_stage1 + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch]))
        losses, hits, seen = 0.0, 0, 0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            images = augment_batch(dataset.images[idx], rng, crop, flip)
            labels = dataset.labels[idx]
            logits = model.forward(Tensor(images))
            loss = cross_entropy(logits, labels)
            ag.backward(loss)
            clip_gradients(opt.params, cfg.clip_norm)
            opt.step()
            losses += loss.item() * len(idx)
            hits += int((logits.data.argmax(axis=-1) == labels).sum())
            seen += len(idx)
        record = {"loss_ce": losses / seen, "train_acc": hits / seen}
        history.append(record)
        if writer is not None:
            writer.write("stage1", epoch, record)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"stage1_epoch_{epoch:03d}.ckpt"), full_state(model))
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "stage1_final.ckpt"), full_state(model))
    return history


def collect_taps(
    model: ViTModel, images: Tensor, positions: tuple[int, ...]
) -> tuple[dict[int, EncoderOutput], EncoderOutput]:
    """One incremental pass yielding the encoder output at each exit and at L."""
    state = model.embed(images)
    taps: dict[int, EncoderOutput] = {}
    for position in positions:
        state = model.continue_forward(state, position)
        taps[position] = state
    final_state = model.continue_forward(state, model.config.layers)
    return taps, final_state


def build_align_modules(
    model: ViTModel, placement: ExitPlacement, branches: list[ExitBranch]
) -> dict[int, AlignModule]:
    """One aligning module per heterogeneous-distillation ordinal.

    Targets must match each exit's pre-pool token count: the full grid
    for conv and baseline heads, the window-pooled grid for attention
    heads.  The modules are detached teachers and are never optimized.
    """
    n = model.config.num_patches
    modules: dict[int, AlignModule] = {}
    for ordinal in heterogeneous_ordinals(placement.count):
        branch = branches[ordinal - 1]
        if branch.kind == "gah":
            target = pooled_token_count(n, branch.head.window)
        elif branch.kind == "mlp":
            target = 1
        else:
            target = n
        module = AlignModule(model.config.dim, n, target)
        module.eval()
        for p in module.parameters():
            p.trainable = False
        modules[ordinal] = module
    return modules


def _distillation_supported(placement: ExitPlacement) -> bool:
    count = placement.count
    if count < 2 or count % 2 != 0:
        return False
    kinds = placement.kinds
    half = count // 2
    return all(k == "lph" for k in kinds[:half]) and all(k == "gah" for k in kinds[half:])


def stage2_batch_losses(
    model: ViTModel,
    branches: list[ExitBranch],
    align_modules: dict[int, AlignModule],
    images: Tensor,
    labels: np.ndarray,
    cfg: TrainConfig,
    placement: ExitPlacement,
    use_distillation: bool,
) -> tuple[Tensor, dict[str, float], np.ndarray]:
    """Objective for one batch: distillation terms plus per-exit cross entropy."""
    with no_grad():
        taps, final_state = collect_taps(model, images, placement.positions)
        final_logits = model.final_classifier(final_state).detach()
        final_tokens = final_state.patches().detach()
    branch_logits: list[Tensor] = []
    features: list[Tensor] = []
    ce_sum: Tensor | None = None
    for branch in branches:
        logits, _, fmap = branch(taps[branch.position])
        branch_logits.append(logits)
        features.append(fmap)
        ce = cross_entropy(logits, labels)
        ce_sum = ce if ce_sum is None else ce_sum + ce
    if use_distillation:
        bundle = FeatureBundle(features, final_tokens)
        half = placement.count // 2
        parts = DistillationParts(
            hete=heterogeneous_loss(bundle, align_modules),
            homo_lph=homogeneous_lph_loss(features[:half]),
            homo_gah=homogeneous_gah_loss(features[half:]),
            pred=prediction_loss(branch_logits, final_logits, labels, cfg.gamma, cfg.temperature),
        )
        distill_total = total_loss(parts, cfg.alpha, cfg.beta)
        objective = distill_total + ce_sum
        scalars = {
            "loss_hete": parts.hete.item(),
            "loss_homo_lph": parts.homo_lph.item(),
            "loss_homo_gah": parts.homo_gah.item(),
            "loss_pred": parts.pred.item(),
            "loss_total": distill_total.item(),
            "loss_ce_exits": ce_sum.item(),
            "objective": objective.item(),
        }
    else:
        objective = ce_sum
        scalars = {"loss_ce_exits": ce_sum.item(), "objective": objective.item()}
    preds = np.stack([bl.data.argmax(axis=-1) for bl in branch_logits])
    return objective, scalars, preds


def _epoch_pass(
    model, branches, align_modules, dataset, cfg, placement, use_distillation,
    opt: Optimizer | None, rng: np.random.Generator, augment=(False, False),
) -> dict[str, float]:
    crop, flip = augment
    sums: dict[str, float] = {}
    hits = np.zeros(len(branches), dtype=np.int64)
    seen = 0
    for idx in _batches(len(dataset), cfg.batch_size, rng):
        images = augment_batch(dataset.images[idx], rng, crop, flip)
        labels = dataset.labels[idx]
        objective, scalars, preds = stage2_batch_losses(
            model, branches, align_modules, Tensor(images), labels, cfg, placement, use_distillation
        )
        if opt is not None:
            ag.backward(objective)
            clip_gradients(opt.params, cfg.clip_norm)
            opt.step()
        for key, value in scalars.items():
            sums[key] = sums.get(key, 0.0) + value * len(idx)
        hits += (preds == labels).sum(axis=1)
        seen += len(idx)
    record = {key: value / seen for key, value in sums.items()}
    for i, branch in enumerate(branches):
        record[f"exit{i + 1}_acc"] = hits[i] / seen
    return record


def exit_accuracies(
    model: ViTModel,
    branches: list[ExitBranch],
    dataset: LabeledDataset,
    placement: ExitPlacement,
    batch_size: int = 64,
) -> list[float]:
    """Eval-mode accuracy of every internal classifier over a dataset."""
    model.eval()
    for branch in branches:
        branch.eval()
    hits = np.zeros(len(branches), dtype=np.int64)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            taps, _ = collect_taps(model, Tensor(dataset.images[sl]), placement.positions)
            for i, branch in enumerate(branches):
                logits, _, _ = branch(taps[branch.position])
                hits[i] += int((logits.data.argmax(axis=-1) == dataset.labels[sl]).sum())
    return [h / len(dataset) for h in hits]


def stage2_train(
    model: ViTModel,
    branches: list[ExitBranch],
    dataset: LabeledDataset,
    cfg: TrainConfig,
    placement: ExitPlacement,
    out_dir: str | None = None,
    writer: MetricsWriter | None = None,
    augment: tuple[bool, bool] = (False, False),
) -> list[dict[str, float]]:
    """Distillation training of the exit branches against the frozen backbone.

    The history starts with an epoch-0 record measuring the objective
    before any update.  Raises UnfrozenBackboneError if any backbone or
    final-classifier parameter changed bit for bit.
    """
    use_distillation = _distillation_supported(placement)
    align_modules = build_align_modules(model, placement, branches) if use_distillation else {}
    FreezeMask.freeze_all(model.named_parameters()).apply(model.named_parameters())
    backbone_before = {name: p.data.copy() for name, p in model.named_parameters()}

    model.eval()
    for branch in branches:
        branch.train()
    branch_params = [p for b in branches for p in b.parameters() if p.trainable]
    opt = make_optimizer(branch_params, cfg.lr_stage2, cfg, kind=cfg.optimizer_stage2)

    history = []
    baseline_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, 0]))
    baseline = _epoch_pass(
        model, branches, align_modules, dataset, cfg, placement, use_distillation,
        opt=None, rng=baseline_rng, augment=augment,
    )
    history.append(baseline)
    if writer is not None:
        writer.write("stage2", 0, baseline)

    for epoch in range(1, cfg.epochs_stage2 + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch]))
        opt.lr = cfg.stage2_lr(epoch)
        for branch in branches:
            branch.train()
        record = _epoch_pass(
            model, branches, align_modules, dataset, cfg, placement, use_distillation,
            opt=opt, rng=rng, augment=augment,
        )
        history.append(record)
        if writer is not None:
            writer.write("stage2", epoch, record)

    for name, p in model.named_parameters():
        if not np.array_equal(backbone_before[name], p.data):
            raise UnfrozenBackboneError(f"frozen parameter {name!r} changed during stage 2")
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "stage2_final.ckpt"), full_state(model, branches))
    return history
