"""Confidence-threshold sequential early-exit inference and dataset evaluation.

A sample walks the encoder blocks in order; at every exit the internal
classifier's softmax confidence is compared against the threshold and
the first strict crossing stops the forward pass.  If no exit fires,
the standard full pass decides.  Consumed MACs follow the analytic
path convention of the cost model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, no_grad
from .costs import (
    CostReport,
    ExitHistogram,
    MacProfile,
    cost_report,
    expected_macs,
    path_macs,
    speedup,
)
from .heads import ExitBranch, ExitPlacement
from .losses import InvalidDistributionError
from .vit import ViTModel


class EmptyDatasetError(ValueError):
    """Evaluation was asked to run over zero samples."""


@dataclass(frozen=True)
class ExitPolicy:
    """Exit on the first classifier whose top-class probability exceeds tau.

    The comparison is strict, so tau >= 1 never exits early; tau above
    one is allowed and means the same thing.
    """

    tau: float = 0.9

    def __post_init__(self):
        if self.tau < 0.0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")

    def fires(self, confidence: float) -> bool:
        return confidence > self.tau


def classifier_confidence(probs: np.ndarray) -> float:
    """Probability of the most confident class of one distribution."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise InvalidDistributionError("confidence input is not a probability vector")
    return float(probs.max())


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class InferenceResult:
    exit_layer: int
    predicted_label: int
    confidence: float
    macs: int
    exit_logits: dict[int, np.ndarray]


@dataclass(frozen=True)
class EvaluationSummary:
    tau: float
    accuracy: float
    histogram: ExitHistogram
    speedup: float
    expected_macs: float

    def size(self) -> int:
        return self.histogram.total()


@dataclass(frozen=True)
class _SampleTrace:
    """Per-exit confidences and labels from one full cascade pass."""

    confidences: np.ndarray  # per configured exit, in order
    labels: np.ndarray
    logits: list[np.ndarray]
    final_confidence: float
    final_label: int
    final_logits: np.ndarray


def _set_eval(model: ViTModel, branches: list[ExitBranch]) -> None:
    model.eval()
    for branch in branches:
        branch.eval()


def infer_early_exit(
    model: ViTModel,
    branches: list[ExitBranch],
    image: np.ndarray,
    policy: ExitPolicy,
    profile: MacProfile,
    placement: ExitPlacement,
) -> InferenceResult:
    """Sequential single-sample inference, stopping at the first confident exit."""
    _set_eval(model, branches)
    batch = Tensor(np.asarray(image, dtype=np.float64)[None, ...])
    layers_total = model.config.layers
    visited: dict[int, np.ndarray] = {}
    with no_grad():
        state = model.embed(batch)
        for branch in branches:
            state = model.continue_forward(state, branch.position)
            logits, _, _ = branch(state)
            row = logits.data[0]
            visited[branch.position] = row
            confidence = classifier_confidence(_softmax_np(row))
            if policy.fires(confidence):
                return InferenceResult(
                    exit_layer=branch.position,
                    predicted_label=int(row.argmax()),
                    confidence=confidence,
                    macs=path_macs(profile, placement, branch.position),
                    exit_logits=visited,
                )
        state = model.continue_forward(state, layers_total)
        final_logits = model.final_classifier(state).data[0]
    visited[layers_total] = final_logits
    return InferenceResult(
        exit_layer=layers_total,
        predicted_label=int(final_logits.argmax()),
        confidence=classifier_confidence(_softmax_np(final_logits)),
        macs=path_macs(profile, placement, layers_total),
        exit_logits=visited,
    )


def evaluate_dataset(
    model: ViTModel,
    branches: list[ExitBranch],
    images: np.ndarray,
    labels: np.ndarray,
    policy: ExitPolicy,
    profile: MacProfile,
    placement: ExitPlacement,
) -> EvaluationSummary:
    """Per-sample early-exit inference aggregated over a labeled dataset."""
    if len(images) == 0:
        raise EmptyDatasetError("evaluation needs at least one sample")
    layers_total = model.config.layers
    exit_layers = []
    hits = 0
    for image, label in zip(images, labels):
        result = infer_early_exit(model, branches, image, policy, profile, placement)
        exit_layers.append(result.exit_layer)
        hits += int(result.predicted_label == label)
    hist = ExitHistogram.from_layers(exit_layers, layers_total)
    return EvaluationSummary(
        tau=policy.tau,
        accuracy=hits / len(images),
        histogram=hist,
        speedup=speedup(hist),
        expected_macs=expected_macs(profile, hist, placement),
    )


def trace_sample(
    model: ViTModel,
    branches: list[ExitBranch],
    image: np.ndarray,
    placement: ExitPlacement,
) -> _SampleTrace:
    """Run the full cascade once, caching every exit's confidence and label."""
    _set_eval(model, branches)
    batch = Tensor(np.asarray(image, dtype=np.float64)[None, ...])
    confs, labs, logits_list = [], [], []
    with no_grad():
        state = model.embed(batch)
        for branch in branches:
            state = model.continue_forward(state, branch.position)
            logits, _, _ = branch(state)
            row = logits.data[0]
            logits_list.append(row)
            confs.append(classifier_confidence(_softmax_np(row)))
            labs.append(int(row.argmax()))
        state = model.continue_forward(state, model.config.layers)
        final_row = model.final_classifier(state).data[0]
    return _SampleTrace(
        confidences=np.array(confs),
        labels=np.array(labs, dtype=np.int64),
        logits=logits_list,
        final_confidence=classifier_confidence(_softmax_np(final_row)),
        final_label=int(final_row.argmax()),
        final_logits=final_row,
    )


def _summary_from_traces(
    traces: list[_SampleTrace],
    labels: np.ndarray,
    policy: ExitPolicy,
    profile: MacProfile,
    placement: ExitPlacement,
    layers_total: int,
) -> EvaluationSummary:
    exit_layers = []
    hits = 0
    positions = placement.positions
    for trace, truth in zip(traces, labels):
        fired = np.nonzero(trace.confidences > policy.tau)[0]
        if fired.size:
            first = int(fired[0])
            exit_layers.append(positions[first])
            hits += int(trace.labels[first] == truth)
        else:
            exit_layers.append(layers_total)
            hits += int(trace.final_label == truth)
    hist = ExitHistogram.from_layers(exit_layers, layers_total)
    return EvaluationSummary(
        tau=policy.tau,
        accuracy=hits / len(traces),
        histogram=hist,
        speedup=speedup(hist),
        expected_macs=expected_macs(profile, hist, placement),
    )


def threshold_sweep(
    model: ViTModel,
    branches: list[ExitBranch],
    images: np.ndarray,
    labels: np.ndarray,
    taus: list[float],
    profile: MacProfile,
    placement: ExitPlacement,
) -> list[EvaluationSummary]:
    """One forward pass per sample; the policy replays over cached confidences."""
    if not taus:
        raise ValueError("tau list must not be empty")
    if len(images) == 0:
        raise EmptyDatasetError("sweep needs at least one sample")
    traces = [trace_sample(model, branches, image, placement) for image in images]
    layers_total = model.config.layers
    return [
        _summary_from_traces(traces, labels, ExitPolicy(tau), profile, placement, layers_total)
        for tau in taus
    ]


def summary_cost_report(
    summary: EvaluationSummary, profile: MacProfile, placement: ExitPlacement
) -> CostReport:
    return cost_report(profile, placement, summary.histogram, tau=summary.tau)
