"""Full SparseDiT: poolingformer bottom, stacked sparse-dense token modules in
the middle, dense blocks on top.

A plain DiT is the special case with no poolingformers and no SDTMs, which is
how dense donor checkpoints are represented.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Callable

import torch
import torch.nn as nn
from torch import Tensor

from .blocks import BLOCK_TYPES, DenseRecBlock, FinalLayer, Merge
from .grid import TokenGrid
from .nn_core import Linear, patchify, silu, sincos_posembed_2d, unpatchify


@dataclass(frozen=True)
class SDTMLayout:
    """One sparse-dense token module: generate, ``n_sparse`` sparse blocks,
    recover, ``n_dense`` dense blocks."""

    n_sparse: int = 3
    n_dense: int = 1

    def __post_init__(self) -> None:
        if self.n_sparse < 0 or self.n_dense < 0:
            raise ValueError(f"SDTM block counts must be non-negative, got {self}")

    @property
    def depth(self) -> int:
        return 2 + self.n_sparse + self.n_dense


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 4
    patch: int = 2
    hidden: int = 1152
    heads: int = 16
    n_bottom: int = 2
    sdtm: tuple[SDTMLayout, ...] = field(default_factory=lambda: (SDTMLayout(3, 1),) * 4)
    n_top: int = 2
    num_classes: int = 1000
    learn_sigma: bool = False
    mlp_ratio: float = 4.0
    reembed_pos: bool = True

    def __post_init__(self) -> None:
        size = self.input_size
        if isinstance(size, int):
            size = (size, size)
        object.__setattr__(self, "input_size", tuple(int(v) for v in size))
        object.__setattr__(self, "sdtm", tuple(
            s if isinstance(s, SDTMLayout) else SDTMLayout(**s) if isinstance(s, dict) else SDTMLayout(*s)
            for s in self.sdtm))
        h, w = self.input_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"input_size {h}x{w} is not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.hidden % 4:
            raise ValueError(f"hidden={self.hidden} must be divisible by 4 for the position embedding")
        if min(self.n_bottom, self.n_top, self.in_channels, self.num_classes) < 0 or self.depth == 0:
            raise ValueError("block counts must be non-negative and the model non-empty")

    @property
    def grid(self) -> TokenGrid:
        h, w = self.input_size
        return TokenGrid(h // self.patch, w // self.patch)

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.learn_sigma else self.in_channels

    @property
    def depth(self) -> int:
        return self.n_bottom + sum(s.depth for s in self.sdtm) + self.n_top

    @property
    def block_kinds(self) -> list[str]:
        kinds = ["pooling"] * self.n_bottom
        for s in self.sdtm:
            kinds += ["generate"] + ["sparse"] * s.n_sparse + ["recover"] + ["dense"] * s.n_dense
        return kinds + ["dense"] * self.n_top

    @property
    def is_dense(self) -> bool:
        return not self.sdtm and self.n_bottom == 0

    def dense_counterpart(self) -> "ModelConfig":
        """Plain DiT of the same depth and width."""
        return replace(self, n_bottom=0, sdtm=(), n_top=self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["sdtm"] = [asdict(s) for s in self.sdtm]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def dit_xl(**kw) -> ModelConfig:
    """DiT-XL/2 at 256x256 (32x32 latent), 28 dense blocks."""
    base = dict(hidden=1152, heads=16, n_bottom=0, sdtm=(), n_top=28, learn_sigma=True)
    return ModelConfig(**{**base, **kw})


def sparse_dit_xl(**kw) -> ModelConfig:
    base = dict(hidden=1152, heads=16, n_bottom=2, sdtm=(SDTMLayout(3, 1),) * 4, n_top=2, learn_sigma=True)
    return ModelConfig(**{**base, **kw})


def dit_b(**kw) -> ModelConfig:
    base = dict(hidden=768, heads=12, n_bottom=0, sdtm=(), n_top=12, learn_sigma=True)
    return ModelConfig(**{**base, **kw})


def sparse_dit_b(**kw) -> ModelConfig:
    base = dict(hidden=768, heads=12, n_bottom=1, sdtm=(SDTMLayout(2, 1),) * 2, n_top=1, learn_sigma=True)
    return ModelConfig(**{**base, **kw})


def toy_config(**kw) -> ModelConfig:
    """16x16x1 images, patch 2 (8x8 tokens), width 64, 4 heads, 6 blocks."""
    base = dict(input_size=(16, 16), in_channels=1, patch=2, hidden=64, heads=4, n_bottom=1,
                sdtm=(SDTMLayout(1, 1),), n_top=1, num_classes=4)
    return ModelConfig(**{**base, **kw})


class TimestepEmbedder(nn.Module):
    """Sinusoidal timestep features followed by a two-layer SiLU MLP."""

    def __init__(self, hidden: int, freq_dim: int = 256, dtype=None):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, hidden, dtype=dtype)
        self.fc2 = Linear(hidden, hidden, dtype=dtype)

    @staticmethod
    def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        args = t.to(torch.float64)[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: Tensor) -> Tensor:
        emb = self.timestep_embedding(t, self.freq_dim).to(self.fc1.weight.dtype)
        return self.fc2(silu(self.fc1(emb)))


class LabelEmbedder(nn.Module):
    """Class embedding table with one extra row for the null (unconditional) label."""

    def __init__(self, num_classes: int, hidden: int, dtype=None):
        super().__init__()
        self.num_classes = num_classes
        self.embedding_table = nn.Parameter(torch.zeros(num_classes + 1, hidden, dtype=dtype))

    @property
    def null_label(self) -> int:
        return self.num_classes

    def forward(self, y: Tensor) -> Tensor:
        return self.embedding_table[y]


@dataclass
class Probe:
    """Per-forward instrumentation.

    ``uniform`` holds block indices whose attention map is forced to uniform;
    ``on_attention(i, attn)`` and ``on_block(i, out)`` observe block ``i``.
    """

    uniform: frozenset[int] = frozenset()
    on_attention: Callable[[int, Tensor], None] | None = None
    on_block: Callable[[int, Tensor], None] | None = None


class SparseDiT(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden
        p = cfg.patch
        self.x_embedder = Linear(p * p * cfg.in_channels, c, dtype=dtype)
        self.t_embedder = TimestepEmbedder(c, dtype=dtype)
        self.y_embedder = LabelEmbedder(cfg.num_classes, c, dtype=dtype)
        self.blocks = nn.ModuleList(
            BLOCK_TYPES[kind](c, cfg.heads, cfg.mlp_ratio, dtype=dtype) for kind in cfg.block_kinds)
        self.final_layer = FinalLayer(c, p * p * cfg.out_channels, dtype=dtype)
        self.register_buffer("pos_embed", sincos_posembed_2d(cfg.grid, c, dtype=dtype), persistent=False)

    @property
    def kinds(self) -> list[str]:
        return self.cfg.block_kinds

    @property
    def null_label(self) -> int:
        return self.y_embedder.null_label

    def embed(self, x: Tensor) -> Tensor:
        return self.x_embedder(patchify(x, self.cfg.patch)) + self.pos_embed

    def condition(self, t: Tensor, y: Tensor) -> Tensor:
        return self.t_embedder(t) + self.y_embedder(y)

    def head(self, tokens: Tensor, c: Tensor) -> Tensor:
        h, w = self.cfg.input_size
        return unpatchify(self.final_layer(tokens, c), self.cfg.patch, h, w)

    def forward(self, x: Tensor, t: Tensor, y: Tensor, grid: TokenGrid | None = None,
                probe: Probe | None = None) -> Tensor:
        """Predict noise (plus variance channels with ``learn_sigma``).

        Args:
            x: ``(B, H, W, in_channels)`` noisy input.
            t: ``(B,)`` integer timesteps.
            y: ``(B,)`` class labels; ``null_label`` for unconditional.
            grid: sparse token grid used by every SDTM in this forward.
        """
        cfg = self.cfg
        dense = cfg.grid
        if grid is None:
            if cfg.sdtm:
                raise ValueError("a sparse grid is required for models with sparse-dense token modules")
            grid = dense
        grid = TokenGrid.parse(grid)
        if not grid.fits_in(dense):
            raise ValueError(f"sparse grid {grid} exceeds dense grid {dense}")
        probe = probe or Probe()
        pos = self.pos_embed if cfg.reembed_pos else None

        tokens = self.embed(x)
        c = self.condition(t, y)
        xs = None
        for i, (kind, block) in enumerate(zip(cfg.block_kinds, self.blocks)):
            kw = dict(uniform=i in probe.uniform,
                      on_attention=partial(probe.on_attention, i) if probe.on_attention else None)
            if kind == "generate":
                xs = block(tokens, c, dense, grid, **kw)
            elif kind == "sparse":
                xs = block(xs, c, **kw)
            elif kind == "recover":
                tokens = block(tokens, xs, c, dense, grid, pos, **kw)
                xs = None
            else:
                tokens = block(tokens, c, **kw)
            if probe.on_block is not None:
                probe.on_block(i, xs if kind in ("generate", "sparse") else tokens)
        return self.head(tokens, c)


def init_weights(model: SparseDiT, seed: int = 0) -> SparseDiT:
    """DiT initialisation: Xavier linears, N(0, 0.02) embeddings, zeroed adaLN
    and output projection, merge ``W1 = 0, W2 = I``."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, Linear):
                nn.init.xavier_uniform_(module.weight, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        nn.init.normal_(model.y_embedder.embedding_table, std=0.02, generator=gen)
        for fc in (model.t_embedder.fc1, model.t_embedder.fc2):
            nn.init.normal_(fc.weight, std=0.02, generator=gen)
        for block in model.blocks:
            block.adaLN.linear.weight.zero_()
            block.adaLN.linear.bias.zero_()
            if isinstance(block, DenseRecBlock):
                block.merge.reset_parameters()
        model.final_layer.adaLN.linear.weight.zero_()
        model.final_layer.adaLN.linear.bias.zero_()
        model.final_layer.linear.weight.zero_()
        model.final_layer.linear.bias.zero_()
    return model


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> SparseDiT:
    """Freshly initialised model: every block is the identity (adaLN-Zero)."""
    return init_weights(SparseDiT(cfg, dtype=dtype), seed)


def merge_modules(model: SparseDiT) -> list[Merge]:
    return [b.merge for b in model.blocks if isinstance(b, DenseRecBlock)]
