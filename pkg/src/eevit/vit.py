"""Plain vision transformer backbone with per-layer feature taps.

Pre-norm encoder blocks (LN -> attention -> residual; LN -> MLP ->
residual), a learned class token and positional embeddings, and a
linear classifier on the class token.  ``forward_to_layer`` and
``continue_forward`` run the block stack incrementally with prefix
semantics identical to a full pass, which is what the early-exit
inference loop and the exit branches rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import LayerNorm, Linear, Module, Parameter, trunc_normal


class WrongLayerError(ValueError):
    """An encoder output from the wrong depth was passed to a consumer."""


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 32
    channels: int = 3
    patch_side: int = 8
    layers: int = 8
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValueError("image_side must be divisible by patch_side")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        for field in ("image_side", "channels", "patch_side", "layers", "dim", "heads", "num_classes"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")

    @property
    def tokens_per_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.tokens_per_side**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1


@dataclass
class EncoderOutput:
    tokens: Tensor  # [batch, N + 1, D]; position 0 is the class token
    layer_index: int

    def cls(self) -> Tensor:
        return self.tokens[:, 0, :]

    def patches(self) -> Tensor:
        return self.tokens[:, 1:, :]


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention with per-head projections and output map.

    The most recent attention weights are kept on ``last_attention`` as
    a detached [batch, heads, T, T] array when ``record`` is set.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.record = False
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor, b: int, t: int) -> Tensor:
        return x.reshape((b, t, self.heads, self.head_dim)).transpose((0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)
        scores = ag.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        attn = ag.softmax(scores, axis=-1)
        if self.record:
            self.last_attention = attn.data.copy()
        mixed = ag.matmul(attn, v)
        merged = mixed.transpose((0, 2, 1, 3)).reshape((b, t, self.dim))
        return self.wo(merged)


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(ag.gelu(self.fc1(self.norm2(x))))


class PatchEmbed(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        patch_dim = config.patch_side**2 * config.channels
        self.proj = Linear(patch_dim, config.dim, rng)
        self.cls_token = Parameter(np.zeros(config.dim))
        self.pos_embed = Parameter(trunc_normal(rng, (config.seq_len, config.dim)))

    def patchify(self, images: Tensor) -> Tensor:
        """Project non-overlapping patches: [B, C, H, W] -> [B, N, D]."""
        cfg = self.config
        b, c, h, w = images.shape
        if (c, h, w) != (cfg.channels, cfg.image_side, cfg.image_side):
            raise ValueError(
                f"image shape {(c, h, w)} does not match config "
                f"{(cfg.channels, cfg.image_side, cfg.image_side)}"
            )
        p, side = cfg.patch_side, cfg.tokens_per_side
        grid = images.reshape((b, c, side, p, side, p))
        patches = grid.transpose((0, 2, 4, 1, 3, 5)).reshape((b, cfg.num_patches, c * p * p))
        return self.proj(patches)

    def __call__(self, images: Tensor) -> Tensor:
        patches = self.patchify(images)
        b = patches.shape[0]
        cls = ag.broadcast_to(self.cls_token.reshape((1, 1, self.config.dim)), (b, 1, self.config.dim))
        tokens = ag.concat([cls, patches], axis=1)
        return tokens + self.pos_embed


class ViTModel(Module):
    def __init__(self, config: ViTConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.patch_embed = PatchEmbed(config, rng)
        self.blocks: list[EncoderBlock] = []
        for i in range(config.layers):
            block = EncoderBlock(config.dim, config.heads, config.mlp_ratio, rng)
            self.add_child(f"block{i + 1}", block)
            self.blocks.append(block)
        self.classifier = Linear(config.dim, config.num_classes, rng)

    # -- feature taps ----------------------------------------------------
    def embed(self, images: Tensor) -> EncoderOutput:
        return EncoderOutput(self.patch_embed(images), layer_index=0)

    def continue_forward(self, state: EncoderOutput, to_layer: int) -> EncoderOutput:
        if not state.layer_index <= to_layer <= self.config.layers:
            raise ValueError(
                f"cannot continue from layer {state.layer_index} to {to_layer}"
            )
        tokens = state.tokens
        for i in range(state.layer_index, to_layer):
            tokens = self.blocks[i](tokens)
        return EncoderOutput(tokens, layer_index=to_layer)

    def forward_to_layer(self, images: Tensor, m: int) -> EncoderOutput:
        if not 1 <= m <= self.config.layers:
            raise ValueError(f"layer index {m} out of range 1..{self.config.layers}")
        return self.continue_forward(self.embed(images), m)

    def final_classifier(self, state: EncoderOutput) -> Tensor:
        if state.layer_index != self.config.layers:
            raise WrongLayerError(
                f"final classifier expects layer {self.config.layers}, got {state.layer_index}"
            )
        return self.classifier(state.cls())

    def forward(self, images: Tensor) -> Tensor:
        return self.final_classifier(self.forward_to_layer(images, self.config.layers))

    def set_attention_recording(self, on: bool) -> None:
        for block in self.blocks:
            block.attn.record = on

    def attention_records(self) -> list[np.ndarray | None]:
        """Per-layer attention weights from the most recent recorded pass."""
        return [block.attn.last_attention for block in self.blocks]

    def backbone_parameters(self):
        """All parameters except the exit branches (which live elsewhere)."""
        return self.named_parameters()
