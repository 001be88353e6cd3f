"""Neural primitives shared by every block.

Weights follow the row-vector convention ``y = x @ w + b`` with ``w`` shaped
``(c_in, c_out)``. Modules store weights the torch way (``(c_out, c_in)``) so
that parameter names and shapes line up with DiT-style checkpoints; the
:class:`Linear` wrapper transposes on the fly.

All functions accept an arbitrary number of leading batch dimensions. Gradients
come from torch autograd; :func:`grad_check` compares them against central
finite differences.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .grid import TokenGrid

ELEMENTWISE_COST = 5  # FLOPs charged per element of softmax, layernorm, activations


class ShapeError(ValueError):
    """Raised when tensor shapes disagree."""


# --------------------------------------------------------------------------- #
# Operation counting
# --------------------------------------------------------------------------- #


@dataclass
class OpCount:
    """Multiply-accumulates and elementwise FLOPs observed while active."""

    macs: int = 0
    elementwise: int = 0
    ops: list[tuple[str, int, int]] = field(default_factory=list)

    def flops(self, convention: str = "2*MAC") -> int:
        if convention == "MAC":
            return self.macs
        return 2 * self.macs + self.elementwise


_COUNTERS: list[OpCount] = []


@contextmanager
def count_ops() -> Iterator[OpCount]:
    """Record the cost of every primitive executed inside the block."""
    counter = OpCount()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def record_op(name: str, macs: int = 0, elementwise: int = 0) -> None:
    for counter in _COUNTERS:
        counter.macs += macs
        counter.elementwise += elementwise
        counter.ops.append((name, macs, elementwise))


# --------------------------------------------------------------------------- #
# Primitives
# --------------------------------------------------------------------------- #


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(c_in, c_out)``."""
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {tuple(x.shape)} incompatible with weight {tuple(w.shape)}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {tuple(b.shape)} incompatible with weight {tuple(w.shape)}")
    rows = x.numel() // w.shape[0] if x.numel() else 0
    record_op("linear", macs=rows * w.shape[0] * w.shape[1])
    y = x @ w
    return y + b if b is not None else y


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    record_op("softmax", elementwise=ELEMENTWISE_COST * x.numel())
    z = torch.exp(x - x.amax(dim=-1, keepdim=True))
    return z / z.sum(dim=-1, keepdim=True)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Parameter-free layer norm (DiT blocks carry no affine LN weights)."""
    record_op("layernorm", elementwise=ELEMENTWISE_COST * x.numel())
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def gelu(x: Tensor) -> Tensor:
    record_op("gelu", elementwise=ELEMENTWISE_COST * x.numel())
    return F.gelu(x, approximate="tanh")


def silu(x: Tensor) -> Tensor:
    record_op("silu", elementwise=ELEMENTWISE_COST * x.numel())
    return F.silu(x)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``x * (1 + scale) + shift`` with per-sample ``(B, C)`` shift/scale."""
    return x * (1 + scale.unsqueeze(-2)) + shift.unsqueeze(-2)


class Linear(nn.Module):
    """Affine map storing its weight as ``(c_out, c_in)``.

    Parameters start at zero; :func:`sparsedit.network.init_weights` applies
    the model initialisation.
    """

    def __init__(self, c_in: int, c_out: int, bias: bool = True, dtype=None):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(c_out, c_in, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.t(), self.bias)


# --------------------------------------------------------------------------- #
# Attention
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class AttnParams:
    """Projection weights for one attention layer, each ``(c_in, c_out)``.

    ``w_q``/``w_k`` may be ``None`` when the attention map is never computed.
    """

    w_q: Tensor | None
    b_q: Tensor | None
    w_k: Tensor | None
    b_k: Tensor | None
    w_v: Tensor
    b_v: Tensor | None
    w_o: Tensor
    b_o: Tensor | None
    num_heads: int

    def __post_init__(self) -> None:
        c = self.w_v.shape[1]
        if self.num_heads < 1 or c % self.num_heads:
            raise ShapeError(f"width {c} is not divisible by num_heads={self.num_heads}")


AttentionHook = Callable[[Tensor], None]


def mha(
    q_in: Tensor,
    kv_in: Tensor,
    p: AttnParams,
    *,
    uniform: bool = False,
    on_attention: AttentionHook | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention of ``q_in`` over ``kv_in``.

    Args:
        q_in: ``(..., A, C)`` query tokens.
        kv_in: ``(..., B, C)`` key/value tokens.
        p: projection weights.
        uniform: replace the post-softmax map with the constant ``1/B`` map
            (the map produced by equal logits). Queries and keys are skipped.
        on_attention: receives the ``(..., heads, A, B)`` attention map.

    Returns:
        ``(..., A, C)``.
    """
    if q_in.shape[-1] != kv_in.shape[-1]:
        raise ShapeError(f"mha: query width {q_in.shape[-1]} != key/value width {kv_in.shape[-1]}")
    c = p.w_v.shape[1]
    h = p.num_heads
    d = c // h
    a, b = q_in.shape[-2], kv_in.shape[-2]
    lead = q_in.shape[:-2]

    def heads(t: Tensor) -> Tensor:
        return t.reshape(*t.shape[:-1], h, d).transpose(-3, -2)

    v = heads(linear(kv_in, p.w_v, p.b_v))
    n_batch = math.prod(lead)
    if uniform:
        attn = torch.full((*lead, h, a, b), 1.0 / b, dtype=v.dtype, device=v.device)
    else:
        if p.w_q is None or p.w_k is None:
            raise ValueError("mha: query/key projections are required unless uniform=True")
        q = heads(linear(q_in, p.w_q, p.b_q))
        k = heads(linear(kv_in, p.w_k, p.b_k))
        record_op("attn_scores", macs=n_batch * a * b * c)
        attn = softmax_rows((q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(d)))
    if on_attention is not None:
        on_attention(attn)
    record_op("attn_values", macs=n_batch * a * b * c)
    out = (attn @ v).transpose(-3, -2).reshape(*lead, a, c)
    return linear(out, p.w_o, p.b_o)


# --------------------------------------------------------------------------- #
# adaLN-Zero conditioning
# --------------------------------------------------------------------------- #

BRANCHES = ("attention", "mlp")


class AdaLN(nn.Module):
    """SiLU + linear map from the conditioning vector to (shift, scale, gate) pairs."""

    def __init__(self, hidden: int, n_chunks: int = 6, dtype=None):
        super().__init__()
        self.n_chunks = n_chunks
        self.linear = Linear(hidden, n_chunks * hidden, dtype=dtype)

    def forward(self, c: Tensor) -> tuple[Tensor, ...]:
        return self.linear(silu(c)).chunk(self.n_chunks, dim=-1)


def adaln_modulate(x: Tensor, c: Tensor, p: AdaLN, branch: str) -> tuple[Tensor, Tensor]:
    """Modulated layer norm of ``x`` and the residual gate for one branch.

    The residual update is ``x + gate * branch(modulated)``.
    """
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    chunks = p(c)
    shift, scale, gate = chunks[:3] if branch == "attention" else chunks[3:6]
    return modulate(layer_norm(x), shift, scale), gate


# --------------------------------------------------------------------------- #
# Position embedding and patches
# --------------------------------------------------------------------------- #


def sincos_posembed_2d(grid: TokenGrid, dim: int, dtype=torch.float64) -> Tensor:
    """Fixed 2-D sine-cosine table of shape ``(grid.n, dim)``.

    The first half of each row encodes the row index, the second half the
    column index; each half is ``[sin(pos * f_k), cos(pos * f_k)]`` with
    ``f_k = 10000 ** (-k / (dim / 4))``.
    """
    if dim % 4:
        raise ValueError(f"position embedding width must be divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    rows = torch.arange(grid.h, dtype=torch.float64).repeat_interleave(grid.w)
    cols = torch.arange(grid.w, dtype=torch.float64).repeat(grid.h)

    def axis(pos: Tensor) -> Tensor:
        angles = pos[:, None] * freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    return torch.cat([axis(rows), axis(cols)], dim=1).to(dtype)


def patchify(img: Tensor, patch: int) -> Tensor:
    """``(..., H, W, C)`` image to ``(..., N, patch*patch*C)`` row-major patch tokens."""
    *lead, height, width, ch = img.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible by patch size {patch}")
    gh, gw = height // patch, width // patch
    x = img.reshape(*lead, gh, patch, gw, patch, ch)
    x = x.movedim(-4, -3)  # (..., gh, gw, patch, patch, ch)
    return x.reshape(*lead, gh * gw, patch * patch * ch)


def unpatchify(tokens: Tensor, patch: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    *lead, n, dim = tokens.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible by patch size {patch}")
    gh, gw = height // patch, width // patch
    if n != gh * gw or dim % (patch * patch):
        raise ShapeError(f"tokens {tuple(tokens.shape)} do not tile a {height}x{width} image with patch {patch}")
    ch = dim // (patch * patch)
    x = tokens.reshape(*lead, gh, gw, patch, patch, ch).movedim(-3, -4)
    return x.reshape(*lead, height, width, ch)


# --------------------------------------------------------------------------- #
# Gradient checking
# --------------------------------------------------------------------------- #


@dataclass
class GradCheckReport:
    """Per-tensor maximum relative error.

    ``structural_zeros`` counts, per tensor, the entries whose analytic and
    numeric gradients are both below the finite-difference roundoff bound (for
    example a key bias, which softmax's shift invariance makes exactly
    irrelevant). Relative error is meaningless there, so they are excluded from
    ``errors`` and reported separately.
    """

    max_rel_err: float
    errors: dict[str, float]
    structural_zeros: dict[str, int] = field(default_factory=dict)

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        zeros = sum(self.structural_zeros.values())
        return f"max_rel_err={self.max_rel_err:.3e} (worst: {worst}; structural zeros: {zeros})"


def rel_err(analytic: Tensor, numeric: Tensor) -> Tensor:
    return (analytic - numeric).abs() / torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    params: Mapping[str, Tensor] | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``fn(*inputs)`` may return any tensor; non-scalar outputs are reduced with a
    fixed random projection so every output element contributes. When ``fn`` is
    an ``nn.Module`` its parameters are checked too. Every checked tensor must be
    float64.
    """
    if not isinstance(inputs, Mapping):
        inputs = {f"input{i}": x for i, x in enumerate(inputs)}
    if params is None and isinstance(fn, nn.Module):
        params = dict(fn.named_parameters())
    targets = {**{f"input:{k}": v for k, v in inputs.items()}, **dict(params or {})}
    for name, t in targets.items():
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check requires float64 tensors, {name} is {t.dtype}")

    leaves = {k: v.detach().clone() for k, v in inputs.items()}
    args = list(leaves.values())
    proj: list[Tensor] = []
    magnitude: list[float] = []

    def loss() -> Tensor:
        out = fn(*args)
        if not proj:
            gen = torch.Generator().manual_seed(seed)
            proj.append(torch.randn(out.shape, generator=gen, dtype=out.dtype) if out.dim() else torch.ones((), dtype=out.dtype))
            magnitude.append((out * proj[0]).abs().sum().item())
        value = (out * proj[0]).sum()
        if not torch.isfinite(value):
            raise FloatingPointError("grad_check: non-finite loss")
        return value

    for t in args:
        t.requires_grad_(True)
    tensors = {**{f"input:{k}": v for k, v in leaves.items()}, **dict(params or {})}
    for t in tensors.values():
        if t.grad is not None:
            t.grad = None
    analytic = torch.autograd.grad(loss(), list(tensors.values()), allow_unused=True)
    # central differences cannot resolve derivatives below ~ulp(terms) / eps
    noise = 64 * torch.finfo(torch.float64).eps * max(magnitude[0], 1.0) / eps

    errors: dict[str, float] = {}
    zeros: dict[str, int] = {}
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = loss().item()
                flat[i] = orig - eps
                minus = loss().item()
                flat[i] = orig
                numeric[i] = (plus - minus) / (2 * eps)
            g = g.reshape(-1)
            structural = (g.abs() < noise) & (numeric.abs() < noise)
            if structural.any():
                zeros[name] = int(structural.sum())
            checked = ~structural
            errors[name] = rel_err(g[checked], numeric[checked]).max().item() if checked.any() else 0.0
    return GradCheckReport(max(errors.values(), default=0.0), errors, zeros)
