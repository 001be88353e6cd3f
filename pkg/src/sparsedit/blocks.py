"""Transformer blocks: dense DiT block, poolingformer, sparse-token generation
and dense-token recovery, plus the grid resampling that links dense and
sparse token sets.

Every block is pre-norm adaLN-Zero:

    x = x + gate_a * attention(modLN_a(x))
    x = x + gate_m * mlp(modLN_m(x))

and keeps the DiT parameter layout (fused ``qkv`` weight of shape ``(3C, C)``,
``proj``, ``mlp.fc1``/``mlp.fc2``, ``adaLN``) so dense weights load unchanged.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .grid import TokenGrid
from .nn_core import (
    AdaLN,
    AttentionHook,
    AttnParams,
    Linear,
    ShapeError,
    gelu,
    layer_norm,
    mha,
    modulate,
    record_op,
)


def _check_grid(x: Tensor, grid: TokenGrid, what: str) -> None:
    if x.shape[-2] != grid.n:
        raise ShapeError(f"{what}: {x.shape[-2]} tokens do not match grid {grid} ({grid.n} tokens)")


def pool_to_grid(x: Tensor, src: TokenGrid, dst: TokenGrid) -> Tensor:
    """Adaptive average pooling of ``(..., src.n, C)`` tokens onto ``dst``.

    Output cell ``i`` along an axis of length ``L -> L'`` averages input rows
    ``[floor(i*L/L'), ceil((i+1)*L/L'))``; bins overlap when ``L'`` does not
    divide ``L``.
    """
    if not dst.fits_in(src):
        raise ValueError(f"pool_to_grid cannot upscale {src} -> {dst}")
    _check_grid(x, src, "pool_to_grid")
    if dst == src:
        return x
    *lead, n, c = x.shape
    record_op("pool", elementwise=x.numel())
    img = x.reshape(-1, src.h, src.w, c).permute(0, 3, 1, 2)
    pooled = F.adaptive_avg_pool2d(img, (dst.h, dst.w))
    return pooled.permute(0, 2, 3, 1).reshape(*lead, dst.n, c)


def upsample_index(src: TokenGrid, dst: TokenGrid) -> Tensor:
    """Flat source index for every destination cell under nearest-neighbour upsampling."""
    rows = torch.arange(dst.h) * src.h // dst.h
    cols = torch.arange(dst.w) * src.w // dst.w
    return (rows[:, None] * src.w + cols[None, :]).reshape(-1)


def upsample_from_grid(xs: Tensor, src: TokenGrid, dst: TokenGrid) -> Tensor:
    """Nearest-neighbour upsampling: destination cell ``(i, j)`` copies source
    ``(floor(i*src.h/dst.h), floor(j*src.w/dst.w))``."""
    if not src.fits_in(dst):
        raise ValueError(f"upsample_from_grid cannot downscale {src} -> {dst}")
    _check_grid(xs, src, "upsample_from_grid")
    if dst == src:
        return xs
    return xs.index_select(-2, upsample_index(src, dst).to(xs.device))


class Mlp(nn.Module):
    def __init__(self, hidden: int, ratio: float = 4.0, dtype=None):
        super().__init__()
        inner = int(hidden * ratio)
        self.fc1 = Linear(hidden, inner, dtype=dtype)
        self.fc2 = Linear(inner, hidden, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Attention(nn.Module):
    """Fused-qkv attention usable as self- or cross-attention."""

    def __init__(self, hidden: int, num_heads: int, dtype=None):
        super().__init__()
        if hidden % num_heads:
            raise ShapeError(f"width {hidden} is not divisible by num_heads={num_heads}")
        self.num_heads = num_heads
        self.qkv = Linear(hidden, 3 * hidden, dtype=dtype)
        self.proj = Linear(hidden, hidden, dtype=dtype)

    def params(self) -> AttnParams:
        wq, wk, wv = self.qkv.weight.chunk(3, dim=0)
        bq, bk, bv = self.qkv.bias.chunk(3, dim=0)
        return AttnParams(wq.t(), bq, wk.t(), bk, wv.t(), bv, self.proj.weight.t(), self.proj.bias, self.num_heads)

    def forward(self, q_in: Tensor, kv_in: Tensor | None = None, *, uniform: bool = False,
                on_attention: AttentionHook | None = None) -> Tensor:
        kv_in = q_in if kv_in is None else kv_in
        return mha(q_in, kv_in, self.params(), uniform=uniform, on_attention=on_attention)


class PoolAttention(nn.Module):
    """Attention with queries and keys removed: the mean value, projected."""

    def __init__(self, hidden: int, num_heads: int, dtype=None):
        super().__init__()
        self.num_heads = num_heads
        self.v = Linear(hidden, hidden, dtype=dtype)
        self.proj = Linear(hidden, hidden, dtype=dtype)

    def forward(self, x: Tensor, *, on_attention: AttentionHook | None = None) -> Tensor:
        v = self.v(x)
        n = x.shape[-2]
        record_op("mean", elementwise=v.numel())
        v_bar = v.mean(dim=-2, keepdim=True)
        if on_attention is not None:
            lead = x.shape[:-2]
            on_attention(torch.full((*lead, self.num_heads, n, n), 1.0 / n, dtype=x.dtype))
        return self.proj(v_bar).expand_as(x)


class DiTBlock(nn.Module):
    """Standard dense (or sparse, when fed sparse tokens) transformer block."""

    kind = "dense"

    def __init__(self, hidden: int, num_heads: int, mlp_ratio: float = 4.0, dtype=None):
        super().__init__()
        self.attn = Attention(hidden, num_heads, dtype=dtype)
        self.mlp = Mlp(hidden, mlp_ratio, dtype=dtype)
        self.adaLN = AdaLN(hidden, 6, dtype=dtype)

    def _mlp_branch(self, x: Tensor, shift: Tensor, scale: Tensor, gate: Tensor) -> Tensor:
        return x + gate.unsqueeze(-2) * self.mlp(modulate(layer_norm(x), shift, scale))

    def forward(self, x: Tensor, c: Tensor, *, uniform: bool = False,
                on_attention: AttentionHook | None = None) -> Tensor:
        sa, ca, ga, sm, cm, gm = self.adaLN(c)
        h = self.attn(modulate(layer_norm(x), sa, ca), uniform=uniform, on_attention=on_attention)
        x = x + ga.unsqueeze(-2) * h
        return self._mlp_branch(x, sm, cm, gm)


class PoolingformerBlock(DiTBlock):
    """Bottom-segment block: attention replaced by global average pooling of
    the values, ``x + gate * proj(mean(v))``.

    Output equals a :class:`DiTBlock` with the same value/output/MLP/adaLN
    weights whose attention map is uniform.
    """

    kind = "pooling"

    def __init__(self, hidden: int, num_heads: int, mlp_ratio: float = 4.0, dtype=None):
        nn.Module.__init__(self)
        self.attn = PoolAttention(hidden, num_heads, dtype=dtype)
        self.mlp = Mlp(hidden, mlp_ratio, dtype=dtype)
        self.adaLN = AdaLN(hidden, 6, dtype=dtype)

    def forward(self, x: Tensor, c: Tensor, *, uniform: bool = False,
                on_attention: AttentionHook | None = None) -> Tensor:
        sa, ca, ga, sm, cm, gm = self.adaLN(c)
        h = self.attn(modulate(layer_norm(x), sa, ca), on_attention=on_attention)
        x = x + ga.unsqueeze(-2) * h
        return self._mlp_branch(x, sm, cm, gm)


class SparseGenBlock(DiTBlock):
    """Pools dense tokens onto the sparse grid, then lets the sparse tokens
    cross-attend to the full dense set before the usual MLP branch."""

    kind = "generate"

    def forward(self, x: Tensor, c: Tensor, dense: TokenGrid, sparse: TokenGrid, *,
                uniform: bool = False, on_attention: AttentionHook | None = None) -> Tensor:
        if sparse.n > dense.n or not sparse.fits_in(dense):
            raise ValueError(f"sparse grid {sparse} exceeds dense grid {dense}")
        xs = pool_to_grid(x, dense, sparse)
        sa, ca, ga, sm, cm, gm = self.adaLN(c)
        q = modulate(layer_norm(xs), sa, ca)
        kv = modulate(layer_norm(x), sa, ca)
        xs = xs + ga.unsqueeze(-2) * self.attn(q, kv, uniform=uniform, on_attention=on_attention)
        return self._mlp_branch(xs, sm, cm, gm)


class Merge(nn.Module):
    """``upsampled @ W1 + dense @ W2``, initialised to ``W1 = 0, W2 = I``."""

    def __init__(self, hidden: int, dtype=None):
        super().__init__()
        self.w1 = Linear(hidden, hidden, bias=False, dtype=dtype)
        self.w2 = Linear(hidden, hidden, bias=False, dtype=dtype)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        with torch.no_grad():
            self.w1.weight.zero_()
            self.w2.weight.copy_(torch.eye(self.w2.weight.shape[0], dtype=self.w2.weight.dtype))

    def forward(self, upsampled: Tensor, dense: Tensor) -> Tensor:
        return self.w1(upsampled) + self.w2(dense)


class DenseRecBlock(DiTBlock):
    """Restores dense tokens: merge the upsampled sparse tokens into the dense
    ones, cross-attend from the merged tokens to the sparse set, run the MLP
    branch, and finally re-add the fixed position embedding (if given)."""

    kind = "recover"

    def __init__(self, hidden: int, num_heads: int, mlp_ratio: float = 4.0, dtype=None):
        super().__init__(hidden, num_heads, mlp_ratio, dtype=dtype)
        self.merge = Merge(hidden, dtype=dtype)

    def forward(self, x: Tensor, xs: Tensor, c: Tensor, dense: TokenGrid, sparse: TokenGrid,
                pos_embed: Tensor | None = None, *, uniform: bool = False,
                on_attention: AttentionHook | None = None) -> Tensor:
        _check_grid(x, dense, "recover (dense)")
        _check_grid(xs, sparse, "recover (sparse)")
        xm = self.merge(upsample_from_grid(xs, sparse, dense), x)
        sa, ca, ga, sm, cm, gm = self.adaLN(c)
        q = modulate(layer_norm(xm), sa, ca)
        kv = modulate(layer_norm(xs), sa, ca)
        x = xm + ga.unsqueeze(-2) * self.attn(q, kv, uniform=uniform, on_attention=on_attention)
        x = self._mlp_branch(x, sm, cm, gm)
        if pos_embed is not None:
            x = x + pos_embed
        return x


class FinalLayer(nn.Module):
    """adaLN-modulated norm followed by the patch-output projection."""

    def __init__(self, hidden: int, out_dim: int, dtype=None):
        super().__init__()
        self.adaLN = AdaLN(hidden, 2, dtype=dtype)
        self.linear = Linear(hidden, out_dim, dtype=dtype)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.adaLN(c)
        return self.linear(modulate(layer_norm(x), shift, scale))


BLOCK_TYPES = {cls.kind: cls for cls in (DiTBlock, PoolingformerBlock, SparseGenBlock, DenseRecBlock)}
BLOCK_TYPES["sparse"] = DiTBlock


def dense_from_pooling(block: PoolingformerBlock, q_weight: Tensor | None = None,
                       k_weight: Tensor | None = None) -> DiTBlock:
    """A :class:`DiTBlock` sharing ``block``'s weights, with zero query (or the
    given q/k weights). Used as the uniform-attention reference."""
    c = block.attn.v.weight.shape[0]
    dtype = block.attn.v.weight.dtype
    dense = DiTBlock(c, block.attn.num_heads, block.mlp.fc1.weight.shape[0] / c, dtype=dtype)
    with torch.no_grad():
        zeros = torch.zeros(c, c, dtype=dtype)
        dense.attn.qkv.weight.copy_(torch.cat([
            zeros if q_weight is None else q_weight,
            zeros if k_weight is None else k_weight,
            block.attn.v.weight,
        ]))
        dense.attn.qkv.bias.copy_(torch.cat([torch.zeros(2 * c, dtype=dtype), block.attn.v.bias]))
        dense.attn.proj.load_state_dict(block.attn.proj.state_dict())
        dense.mlp.load_state_dict(block.mlp.state_dict())
        dense.adaLN.load_state_dict(block.adaLN.state_dict())
    return dense


__all__ = [
    "Attention",
    "BLOCK_TYPES",
    "DenseRecBlock",
    "DiTBlock",
    "FinalLayer",
    "Merge",
    "Mlp",
    "PoolAttention",
    "PoolingformerBlock",
    "SparseGenBlock",
    "dense_from_pooling",
    "pool_to_grid",
    "upsample_from_grid",
]
