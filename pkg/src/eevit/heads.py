"""Exit branches: placement, kernel/window schedules, and the three heads.

Shallow exits get a convolutional local-perception head, deep exits an
attention-based global-aggregation head, and a pooled-linear head is
available as the baseline.  Every head reduces an encoder tap to a
width-D feature vector that feeds a per-exit linear classifier.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import (
    BatchNorm,
    DepthwiseConv2d,
    Linear,
    Module,
    avg_pool_global,
    grid_to_tokens,
    tokens_to_grid,
)
from .vit import EncoderOutput, MultiHeadSelfAttention, ViTConfig

HEAD_KINDS = ("lph", "gah", "mlp")


class PlacementError(ValueError):
    """Exit positions or head kinds violate the placement rules."""


def default_head_kind(position: int, layers_total: int) -> str:
    """Convolutional head in the lower half of the depth, attention above."""
    return "lph" if 2 * position <= layers_total else "gah"


@dataclass(frozen=True)
class ExitPlacement:
    layers_total: int
    positions: tuple[int, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.positions) != len(self.kinds):
            raise PlacementError("positions and kinds must align")
        if not self.positions:
            raise PlacementError("at least one exit position required")
        if any(k not in HEAD_KINDS for k in self.kinds):
            raise PlacementError(f"head kinds must be in {HEAD_KINDS}")
        if list(self.positions) != sorted(set(self.positions)):
            raise PlacementError("positions must be strictly increasing")
        if self.positions[0] < 1 or self.positions[-1] >= self.layers_total:
            raise PlacementError(
                f"positions must lie in 1..{self.layers_total - 1}, got {self.positions}"
            )

    @property
    def count(self) -> int:
        return len(self.positions)

    def lph_positions(self) -> tuple[int, ...]:
        return tuple(p for p, k in zip(self.positions, self.kinds) if k == "lph")

    def gah_positions(self) -> tuple[int, ...]:
        return tuple(p for p, k in zip(self.positions, self.kinds) if k == "gah")

    @classmethod
    def with_default_kinds(
        cls,
        layers_total: int,
        positions,
        kind_overrides: dict[int, str] | None = None,
    ) -> "ExitPlacement":
        positions = tuple(int(p) for p in positions)
        overrides = kind_overrides or {}
        kinds = tuple(
            overrides.get(p, default_head_kind(p, layers_total)) for p in positions
        )
        return cls(layers_total, positions, kinds)


def place_exits(per_block_macs, num_exits: int) -> ExitPlacement:
    """Choose exit layers so the compute between cuts is as even as possible.

    Exhaustively minimizes the variance of the cumulative backbone MACs
    of the segments delimited by the exits (including the tail from the
    last exit to the final layer); ties resolve to the shallowest
    position tuple.
    """
    blocks = [float(m) for m in per_block_macs]
    layers_total = len(blocks)
    if num_exits >= layers_total:
        raise PlacementError(
            f"cannot place {num_exits} exits in a {layers_total}-layer backbone"
        )
    if num_exits < 1:
        raise PlacementError("need at least one exit")
    prefix = np.concatenate([[0.0], np.cumsum(blocks)])
    best: tuple[int, ...] | None = None
    best_var = np.inf
    for combo in itertools.combinations(range(1, layers_total), num_exits):
        cuts = np.array([0, *combo, layers_total])
        segments = prefix[cuts[1:]] - prefix[cuts[:-1]]
        var = float(np.var(segments))
        if var < best_var - 1e-12:
            best_var = var
            best = combo
    return ExitPlacement.with_default_kinds(layers_total, best)


def _nearest_odd_or_zero(x: float) -> int:
    """Snap to the admissible kernel sizes {0, 3, 5, 7, ...}."""
    if x < 1.5:
        return 0
    return max(3, 2 * round((x - 1.0) / 2.0) + 1)


@dataclass(frozen=True)
class KernelSchedule:
    """Kernel size per convolutional exit position; non-increasing in depth."""

    kernels: dict[int, int]
    k_max: int = 5

    def __post_init__(self):
        positions = sorted(self.kernels)
        sizes = [self.kernels[p] for p in positions]
        if any(k != 0 and (k < 3 or k % 2 == 0) for k in sizes):
            raise ValueError(f"kernels must be odd >= 3 or 0, got {sizes}")
        if any(a < b for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"kernel schedule must be non-increasing, got {sizes}")

    def kernel_for(self, position: int) -> int:
        return self.kernels[position]

    @classmethod
    def linear(cls, lph_positions, layers_total: int, k_max: int = 5) -> "KernelSchedule":
        """Interpolate from k_max at the shallowest exit to zero just past mid-depth."""
        if k_max < 3 or k_max % 2 == 0:
            raise ValueError("k_max must be an odd integer >= 3")
        positions = sorted(lph_positions)
        if not positions:
            return cls({}, k_max)
        zero_at = layers_total / 2.0 + 1.0
        first = positions[0]
        span = zero_at - first
        kernels = {}
        for p in positions:
            raw = k_max if span <= 0 else k_max * (zero_at - p) / span
            kernels[p] = _nearest_odd_or_zero(raw)
        return cls(kernels, k_max)


@dataclass(frozen=True)
class WindowSchedule:
    """Pooling window per attention exit position; non-decreasing, minimum 2."""

    windows: dict[int, int]
    g_max: int = 4

    def __post_init__(self):
        positions = sorted(self.windows)
        sizes = [self.windows[p] for p in positions]
        if any(s < 2 for s in sizes):
            raise ValueError(f"windows must be >= 2, got {sizes}")
        if any(a > b for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"window schedule must be non-decreasing, got {sizes}")

    def window_for(self, position: int) -> int:
        return self.windows[position]

    @classmethod
    def linear(cls, gah_positions, layers_total: int, g_max: int = 4) -> "WindowSchedule":
        """Grow from 2 just past mid-depth to g_max at the last interior layer."""
        if g_max < 2:
            raise ValueError("g_max must be >= 2")
        positions = sorted(gah_positions)
        if not positions:
            return cls({}, g_max)
        start = layers_total / 2.0 + 1.0
        end = layers_total - 1.0
        span = max(end - start, 1.0)
        windows = {}
        for p in positions:
            raw = 2.0 + (g_max - 2.0) * (p - start) / span
            windows[p] = int(min(max(np.floor(raw), 2), g_max))
        return cls(windows, g_max)


def pool_token_grid(x: Tensor, window: int) -> Tensor:
    """Parameter-free token-grid average pooling: [B, N, D] -> [B, N', D].

    Ragged edge windows (grid side not divisible by the window) average
    over their true element count.
    """
    if window < 2:
        raise ValueError(f"pooling window must be >= 2, got {window}")
    return grid_to_tokens(ag.avg_pool2d(tokens_to_grid(x), window))


def pooled_token_count(num_patches: int, window: int) -> int:
    side = int(round(num_patches**0.5))
    if side * side != num_patches:
        raise ValueError(f"token count {num_patches} does not form a square grid")
    return (-(-side // window)) ** 2


class _ConvStage(Module):
    """Convolution followed by GELU and batch norm (bypassed in test mode)."""

    def __init__(self, conv: Module, channels: int):
        super().__init__()
        self.conv = conv
        self.norm = BatchNorm(channels)
        self.test_mode = False

    def __call__(self, x: Tensor) -> Tensor:
        out = self.conv(x)
        if self.test_mode:
            return out
        return self.norm(ag.gelu(out))


class LocalPerceptionHead(Module):
    """Convolutional exit head for shallow taps.

    Expand with a pointwise convolution, mix spatially with a depthwise
    convolution whose kernel comes from the schedule (zero means the
    stage is skipped entirely), project back to width D, then add the
    class token to the pooled token map.
    """

    def __init__(
        self,
        dim: int,
        kernel: int,
        rng: np.random.Generator,
        expansion: int = 1,
    ):
        super().__init__()
        hidden = dim * expansion
        self.kernel = kernel
        self.expand = _ConvStage(Linear(dim, hidden, rng), hidden)
        self.spatial = (
            _ConvStage(DepthwiseConv2d(hidden, kernel, rng), hidden) if kernel > 0 else None
        )
        self.project = _ConvStage(Linear(hidden, dim, rng), dim)

    def set_test_mode(self, on: bool = True) -> None:
        for stage in (self.expand, self.spatial, self.project):
            if stage is not None:
                stage.test_mode = on

    def spatial_mix(self, tokens: Tensor) -> Tensor:
        """Depthwise grid convolution; the zero-kernel schedule entry bypasses it."""
        if self.spatial is None:
            return tokens
        return grid_to_tokens(self.spatial(tokens_to_grid(tokens)))

    def __call__(self, patch_tokens: Tensor, cls_token: Tensor) -> tuple[Tensor, Tensor]:
        t = self.expand(patch_tokens)
        t = self.spatial_mix(t)
        fmap = self.project(t)
        pooled = avg_pool_global(fmap, axis=1)
        return pooled + cls_token, fmap


class GlobalAggregationHead(Module):
    """Attention exit head for deep taps.

    Shrinks the token grid with parameter-free window pooling, runs
    multi-head self-attention over the surviving tokens, and adds the
    class token to the pooled result.
    """

    def __init__(self, dim: int, window: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if window < 2:
            raise ValueError("window must be >= 2")
        self.window = window
        self.attn = MultiHeadSelfAttention(dim, heads, rng)

    def __call__(self, patch_tokens: Tensor, cls_token: Tensor) -> tuple[Tensor, Tensor]:
        pooled_tokens = pool_token_grid(patch_tokens, self.window)
        fmap = self.attn(pooled_tokens)
        pooled = avg_pool_global(fmap, axis=1)
        return pooled + cls_token, fmap


class PooledLinearHead(Module):
    """Baseline head: global average pool over patch tokens, then one linear map."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(dim, dim, rng)

    def __call__(self, patch_tokens: Tensor, cls_token: Tensor) -> tuple[Tensor, Tensor]:
        out = self.fc(avg_pool_global(patch_tokens, axis=1))
        b, d = out.shape
        return out, out.reshape((b, 1, d))


class ExitBranch(Module):
    """One exit: a head bound to a backbone layer plus its internal classifier."""

    def __init__(
        self,
        position: int,
        kind: str,
        head: Module,
        dim: int,
        num_classes: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.position = position
        self.kind = kind
        self.head = head
        self.classifier = Linear(dim, num_classes, rng)

    def __call__(self, state: EncoderOutput) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (logits, head feature vector, pre-pool feature map)."""
        if state.layer_index != self.position:
            raise ValueError(
                f"branch at layer {self.position} fed with layer {state.layer_index}"
            )
        vec, fmap = self.head(state.patches(), state.cls())
        return self.classifier(vec), vec, fmap


def build_exit_branches(
    config: ViTConfig,
    placement: ExitPlacement,
    kernels: KernelSchedule,
    windows: WindowSchedule,
    rng: np.random.Generator,
    expansion: int = 1,
) -> list[ExitBranch]:
    if placement.layers_total != config.layers:
        raise PlacementError("placement depth does not match the backbone")
    branches = []
    for position, kind in zip(placement.positions, placement.kinds):
        if kind == "lph":
            head = LocalPerceptionHead(config.dim, kernels.kernel_for(position), rng, expansion)
        elif kind == "gah":
            head = GlobalAggregationHead(config.dim, windows.window_for(position), config.heads, rng)
        else:
            head = PooledLinearHead(config.dim, rng)
        branches.append(
            ExitBranch(position, kind, head, config.dim, config.num_classes, rng)
        )
    return branches
