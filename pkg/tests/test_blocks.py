"""Poolingformer, sparse-token generation, dense-token recovery and grid resampling."""

import math
import time

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsedit.blocks import (
    DenseRecBlock,
    DiTBlock,
    FinalLayer,
    Merge,
    PoolingformerBlock,
    SparseGenBlock,
    dense_from_pooling,
    pool_to_grid,
    upsample_from_grid,
)
from sparsedit.grid import TokenGrid
from sparsedit.nn_core import grad_check, sincos_posembed_2d

from conftest import mha_loop_oracle, randn, randomize

f64 = torch.float64
C, HEADS = 8, 2
DENSE, SPARSE = TokenGrid(4, 4), TokenGrid(2, 2)


def block(cls, seed=0, c=C, heads=HEADS):
    return randomize(cls(c, heads, dtype=f64), seed=seed)


def grid_values(grid: TokenGrid, c: int = 1) -> torch.Tensor:
    return torch.arange(grid.n * c, dtype=f64).reshape(grid.n, c)


# --------------------------------------------------------------------------- #
# Independent oracles
# --------------------------------------------------------------------------- #


def pool_oracle(x, src, dst):
    """Average of the floor/ceil bins, one output cell at a time."""
    img = x.reshape(src.h, src.w, -1)
    out = torch.zeros(dst.h, dst.w, img.shape[-1], dtype=x.dtype)
    for i in range(dst.h):
        r0, r1 = (i * src.h) // dst.h, math.ceil((i + 1) * src.h / dst.h)
        for j in range(dst.w):
            c0, c1 = (j * src.w) // dst.w, math.ceil((j + 1) * src.w / dst.w)
            out[i, j] = img[r0:r1, c0:c1].mean(dim=(0, 1))
    return out.reshape(dst.n, -1)


def upsample_oracle(xs, src, dst):
    img = xs.reshape(src.h, src.w, -1)
    rows = []
    for i in range(dst.h):
        for j in range(dst.w):
            rows.append(img[i * src.h // dst.h, j * src.w // dst.w])
    return torch.stack(rows)


def ln(x):
    mu = x.mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(((x - mu) ** 2).mean(-1, keepdim=True) + 1e-6)


def adaln_chunks(blk, c):
    w, b = blk.adaLN.linear.weight, blk.adaLN.linear.bias
    out = (c * torch.sigmoid(c)) @ w.t() + b
    return out.chunk(6, dim=-1)


def mlp_oracle(blk, x):
    h = x @ blk.mlp.fc1.weight.t() + blk.mlp.fc1.bias
    h = 0.5 * h * (1 + torch.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h ** 3)))
    return h @ blk.mlp.fc2.weight.t() + blk.mlp.fc2.bias


def generate_oracle(blk, x, c, dense, sparse):
    """Single-sample composition: pool, cross-attend, MLP."""
    sa, ca, ga, sm, cm, gm = adaln_chunks(blk, c)
    xs = pool_oracle(x, dense, sparse)
    q = ln(xs) * (1 + ca) + sa
    kv = ln(x) * (1 + ca) + sa
    xs = xs + ga * mha_loop_oracle(q, kv, blk.attn.params())
    return xs + gm * mlp_oracle(blk, ln(xs) * (1 + cm) + sm)


def recover_oracle(blk, x, xs, c, dense, sparse, pos):
    sa, ca, ga, sm, cm, gm = adaln_chunks(blk, c)
    xm = upsample_oracle(xs, sparse, dense) @ blk.merge.w1.weight.t() + x @ blk.merge.w2.weight.t()
    q = ln(xm) * (1 + ca) + sa
    kv = ln(xs) * (1 + ca) + sa
    out = xm + ga * mha_loop_oracle(q, kv, blk.attn.params())
    out = out + gm * mlp_oracle(blk, ln(out) * (1 + cm) + sm)
    return out + pos


# --------------------------------------------------------------------------- #
# Grid resampling
# --------------------------------------------------------------------------- #


class TestPoolToGrid:
    def test_quadrant_means(self):
        out = pool_to_grid(grid_values(DENSE), DENSE, SPARSE)
        assert torch.equal(out.reshape(2, 2), torch.tensor([[2.5, 4.5], [10.5, 12.5]], dtype=f64))

    def test_constant_field(self):
        out = pool_to_grid(torch.full((16, 3), 1.75, dtype=f64), DENSE, SPARSE)
        assert torch.equal(out, torch.full((4, 3), 1.75, dtype=f64))

    def test_identity_grid(self):
        x = randn(16, 3)
        assert pool_to_grid(x, DENSE, DENSE) is x

    def test_rejects_upscaling(self):
        with pytest.raises(ValueError):
            pool_to_grid(randn(4, 3), SPARSE, DENSE)

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 999))
    @settings(max_examples=60, deadline=None)
    def test_matches_bin_oracle(self, h, w, dh, dw, seed):
        src, dst = TokenGrid(h, w), TokenGrid(min(h, dh), min(w, dw))
        x = randn(src.n, 2, seed=seed)
        assert torch.allclose(pool_to_grid(x, src, dst), pool_oracle(x, src, dst), atol=1e-13, rtol=0)

    def test_batched(self):
        x = randn(3, 16, 2)
        out = pool_to_grid(x, DENSE, SPARSE)
        for i in range(3):
            assert torch.allclose(out[i], pool_oracle(x[i], DENSE, SPARSE), atol=1e-14, rtol=0)


class TestUpsample:
    def test_block_tiles(self):
        out = upsample_from_grid(grid_values(SPARSE), SPARSE, DENSE).reshape(4, 4)
        expected = torch.tensor([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=f64)
        assert torch.equal(out, expected)

    def test_identity(self):
        xs = randn(4, 3)
        assert torch.equal(upsample_from_grid(xs, SPARSE, SPARSE), xs)

    def test_index_oracle_2x3_to_5x7(self):
        src, dst = TokenGrid(2, 3), TokenGrid(5, 7)
        xs = randn(src.n, 4, seed=3)
        assert torch.equal(upsample_from_grid(xs, src, dst), upsample_oracle(xs, src, dst))

    def test_rejects_downscaling(self):
        with pytest.raises(ValueError):
            upsample_from_grid(randn(16, 2), DENSE, SPARSE)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.floats(-5, 5))
    @settings(max_examples=40, deadline=None)
    def test_pool_after_upsample_preserves_bin_constant_fields(self, h, w, k, value):
        # a field that is constant on every k x k bin survives the round trip exactly,
        # and so does its global mean
        sparse, dense = TokenGrid(h, w), TokenGrid(h * k, w * k)
        xs = randn(sparse.n, 2, seed=h * 10 + w) + value
        up = upsample_from_grid(xs, sparse, dense)
        back = pool_to_grid(up, dense, sparse)
        assert torch.allclose(back, xs, atol=1e-13, rtol=0)
        assert torch.allclose(up.mean(0), xs.mean(0), atol=1e-13, rtol=0)


# --------------------------------------------------------------------------- #
# Blocks
# --------------------------------------------------------------------------- #


class TestPoolingformer:
    def test_zero_value_weights_leave_only_mlp(self):
        blk = block(PoolingformerBlock)
        with torch.no_grad():
            blk.attn.v.weight.zero_()
            blk.attn.v.bias.zero_()
            blk.attn.proj.bias.zero_()
        x, c = randn(1, 16, C, seed=1), randn(1, C, seed=2)
        sm, cm, gm = adaln_chunks(blk, c)[3:]
        expected = x + gm[:, None] * mlp_oracle(blk, ln(x) * (1 + cm[:, None]) + sm[:, None])
        assert (blk(x, c) - expected).abs().max() < 1e-12

    def test_single_token_equals_dense_block(self):
        pool = block(PoolingformerBlock, seed=4)
        dense = dense_from_pooling(pool, q_weight=randn(C, C, seed=5), k_weight=randn(C, C, seed=6))
        x, c = randn(2, 1, C, seed=1), randn(2, C, seed=2)
        assert (pool(x, c) - dense(x, c)).abs().max() < 1e-12

    def test_equals_zero_query_block(self):
        pool = block(PoolingformerBlock, seed=7)
        dense = dense_from_pooling(pool)
        x, c = randn(3, 16, C, seed=1), randn(3, C, seed=2)
        assert (pool(x, c) - dense(x, c)).abs().max() < 1e-12

    def test_equals_uniform_override(self):
        pool = block(PoolingformerBlock, seed=8)
        dense = dense_from_pooling(pool, q_weight=randn(C, C, seed=5), k_weight=randn(C, C, seed=6))
        x, c = randn(2, 16, C, seed=1), randn(2, C, seed=2)
        assert (pool(x, c) - dense(x, c, uniform=True)).abs().max() < 1e-12
        assert (pool(x, c) - dense(x, c)).abs().max() > 1e-3  # the real map does differ

    def test_reports_uniform_map(self):
        maps = []
        block(PoolingformerBlock)(randn(1, 4, C), randn(1, C), on_attention=maps.append)
        assert maps[0].shape == (1, HEADS, 4, 4)
        assert torch.equal(maps[0], torch.full((1, HEADS, 4, 4), 0.25, dtype=f64))


class TestSparseGen:
    def test_zeroed_residuals_return_pooled_tokens(self):
        blk = block(SparseGenBlock)
        with torch.no_grad():
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
            blk.adaLN.linear.weight[5 * C:].zero_()  # MLP gate
            blk.adaLN.linear.bias[5 * C:].zero_()
        x, c = randn(1, 16, C), randn(1, C, seed=1)
        assert torch.equal(blk(x, c, DENSE, SPARSE), pool_to_grid(x, DENSE, SPARSE))

    def test_constant_input_constant_output(self):
        blk = block(SparseGenBlock, seed=3)
        row = randn(C, seed=4)
        out = blk(row.expand(1, 16, C).clone(), randn(1, C, seed=1), DENSE, SPARSE)
        assert (out - out[:, :1]).abs().max() < 1e-12

    def test_shape_256_to_36(self):
        blk = randomize(SparseGenBlock(64, 4, dtype=f64), seed=1)
        out = blk(randn(1, 256, 64), randn(1, 64, seed=1), TokenGrid(16, 16), TokenGrid(6, 6))
        assert out.shape == (1, 36, 64)

    def test_rejects_larger_sparse_grid(self):
        with pytest.raises(ValueError):
            block(SparseGenBlock)(randn(1, 4, C), randn(1, C), SPARSE, DENSE)

    def test_composed_oracle(self):
        blk = block(SparseGenBlock, seed=11)
        x, c = randn(2, 16, C, seed=1), randn(2, C, seed=2)
        out = blk(x, c, DENSE, SPARSE)
        for i in range(2):
            assert (out[i] - generate_oracle(blk, x[i], c[i], DENSE, SPARSE)).abs().max() < 1e-12

    def test_transposition_covariance(self):
        blk = block(SparseGenBlock, seed=12)
        dense, sparse = TokenGrid(4, 6), TokenGrid(2, 3)
        x, c = randn(1, dense.n, C, seed=1), randn(1, C, seed=2)

        def transpose(tokens, grid):
            return tokens.reshape(1, grid.h, grid.w, C).transpose(1, 2).reshape(1, grid.n, C)

        out = blk(x, c, dense, sparse)
        out_t = blk(transpose(x, dense), c, dense.transpose(), sparse.transpose())
        assert (transpose(out, sparse) - out_t).abs().max() < 1e-12


class TestDenseRec:
    def test_init_identity(self):
        blk = block(DenseRecBlock, seed=2)
        with torch.no_grad():
            blk.merge.reset_parameters()
            blk.attn.proj.weight.zero_()
            blk.attn.proj.bias.zero_()
            blk.adaLN.linear.weight[5 * C:].zero_()
            blk.adaLN.linear.bias[5 * C:].zero_()
        x, xs, c = randn(1, 16, C), randn(1, 4, C, seed=1), randn(1, C, seed=2)
        assert torch.equal(blk(x, xs, c, DENSE, SPARSE), x)

    def test_merge_identity_is_bit_exact(self):
        merge = Merge(C, dtype=f64)
        x = randn(3, 16, C, seed=3) * 1e3
        assert torch.equal(merge(randn(3, 16, C, seed=4), x), x)

    def test_swapped_merge_with_constant_sparse_tokens(self):
        merge = Merge(C, dtype=f64)
        with torch.no_grad():
            merge.w1.weight.copy_(torch.eye(C, dtype=f64))
            merge.w2.weight.zero_()
        row = randn(C, seed=5)
        xs = row.expand(4, C)
        out = merge(upsample_from_grid(xs, SPARSE, DENSE), randn(16, C))
        assert torch.equal(out, row.expand(16, C))

    def test_composed_oracle(self):
        blk = block(DenseRecBlock, seed=13)
        pos = sincos_posembed_2d(DENSE, C)
        x, xs, c = randn(2, 16, C, seed=1), randn(2, 4, C, seed=2), randn(2, C, seed=3)
        out = blk(x, xs, c, DENSE, SPARSE, pos)
        for i in range(2):
            expected = recover_oracle(blk, x[i], xs[i], c[i], DENSE, SPARSE, pos)
            assert (out[i] - expected).abs().max() < 1e-12

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            block(DenseRecBlock)(randn(1, 16, C), randn(1, 9, C), randn(1, C), DENSE, SPARSE)


class TestGradients:
    """Finite differences against autograd for every block type (toy dims, f64)."""

    TOL = 1e-4

    def check(self, module, **inputs):
        report = grad_check(module, inputs)
        assert report.max_rel_err < self.TOL, str(report)
        assert all(math.isfinite(v) for v in report.errors.values())
        # only key biases may be unresolvable: softmax ignores them exactly
        for name, count in report.structural_zeros.items():
            assert name.endswith("attn.qkv.bias") and count <= C, report.structural_zeros
        return report

    def test_key_bias_gradient_vanishes(self):
        blk = block(DiTBlock, seed=21)
        x, c = randn(1, 16, C, seed=1), randn(1, C, seed=2)
        (blk(x, c) * randn(1, 16, C, seed=3)).sum().backward()
        grad = blk.attn.qkv.bias.grad
        assert grad[C:2 * C].abs().max() < 1e-15
        assert grad[:C].abs().min() > 1e-6 and grad[2 * C:].abs().min() > 1e-6

    def test_dense(self):
        self.check(block(DiTBlock, seed=21), x=randn(1, 16, C, seed=1), c=randn(1, C, seed=2))

    def test_sparse(self):
        self.check(block(DiTBlock, seed=22), x=randn(1, 4, C, seed=1), c=randn(1, C, seed=2))

    def test_poolingformer(self):
        self.check(block(PoolingformerBlock, seed=23), x=randn(1, 16, C, seed=1), c=randn(1, C, seed=2))

    def test_generate(self):
        blk = block(SparseGenBlock, seed=24)
        self.check(lambda x, c: blk(x, c, DENSE, SPARSE), x=randn(1, 16, C, seed=1), c=randn(1, C, seed=2))
        self.check(_Bound(blk, DENSE, SPARSE), x=randn(1, 16, C, seed=1), c=randn(1, C, seed=2))

    def test_recover(self):
        blk = block(DenseRecBlock, seed=25)
        pos = sincos_posembed_2d(DENSE, C)
        report = self.check(_Bound(blk, DENSE, SPARSE, pos), x=randn(1, 16, C, seed=1),
                            xs=randn(1, 4, C, seed=2), c=randn(1, C, seed=3))
        assert {"blk.merge.w1.weight", "blk.merge.w2.weight"} <= set(report.errors)

    def test_head(self):
        self.check(randomize(FinalLayer(C, 8, dtype=f64), seed=26), x=randn(1, 16, C, seed=1), c=randn(1, C, seed=2))

    def test_full_sdtm(self):
        # generate -> sparse -> recover on N=16, M=4, C=8
        gen, mid, rec = block(SparseGenBlock, seed=31), block(DiTBlock, seed=32), block(DenseRecBlock, seed=33)
        pos = sincos_posembed_2d(DENSE, C)

        class SDTM(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.gen, self.mid, self.rec = gen, mid, rec

            def forward(self, x, c):
                xs = self.mid(self.gen(x, c, DENSE, SPARSE), c)
                return self.rec(x, xs, c, DENSE, SPARSE, pos)

        start = time.perf_counter()
        self.check(SDTM(), x=randn(1, 16, C, seed=1), c=randn(1, C, seed=2))
        assert time.perf_counter() - start < 60


class _Bound(torch.nn.Module):
    """Wrap a grid-taking block so grad_check sees its parameters."""

    def __init__(self, blk, dense, sparse, pos=None):
        super().__init__()
        self.blk, self.dense, self.sparse, self.pos = blk, dense, sparse, pos

    def forward(self, x, *rest):
        if isinstance(self.blk, DenseRecBlock):
            xs, c = rest
            return self.blk(x, xs, c, self.dense, self.sparse, self.pos)
        (c,) = rest
        return self.blk(x, c, self.dense, self.sparse)
