"""Transformer blocks, butterfly attention, token-parallel attention and a small ViT."""

from __future__ import annotations

import math

import numpy as np

from .butterfly import ButterflySchedule
from .errors import DimensionError, ScheduleError
from .patch_mixer import extract_patches
from .tensor import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    concat,
    mac_scope,
    matmul_any,
    mean,
    reshape,
    softmax,
    transpose_axes,
    uniform_init,
)


def _expand_mask(mask, batch: int, heads: int, n: int):
    """Token-wise [B*, n] or full [B*, h, n, n] binary mask -> boolean array broadcastable to scores."""
    if mask is None:
        return None
    m = np.asarray(mask).astype(bool)
    if m.ndim == 2 and m.shape == (batch, n):
        return m[:, None, None, :]
    if m.ndim == 4 and m.shape[2:] == (n, n) and m.shape[0] in (1, batch) and m.shape[1] in (1, heads):
        return m
    raise DimensionError(f"mask shape {m.shape} incompatible with {batch} sequences, {heads} heads, length {n}")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask bias) v over [B*, h, n, d] operands."""
    if q.ndim != 4 or q.shape != k.shape or k.shape != v.shape:
        raise DimensionError(f"attention operands must share a [B*, h, n, d] shape: {q.shape}, {k.shape}, {v.shape}")
    b, h, n, d = q.shape
    m = _expand_mask(mask, b, h, n)
    with mac_scope("attn_score"):
        scores = matmul_any(q, transpose_axes(k, -1, -2)) * (1.0 / math.sqrt(d))
    p = softmax(scores, -1, m)
    with mac_scope("attn_value"):
        return matmul_any(p, v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, D = x.shape
    return transpose_axes(reshape(x, (b, n, heads, D // heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return reshape(transpose_axes(x, 1, 2), (b, n, h * d))


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wout: Tensor | None, heads: int, mask=None) -> Tensor:
    if x.shape[-1] % heads:
        raise DimensionError(f"{heads} heads do not divide width {x.shape[-1]}")
    with mac_scope("qkv"):
        q = _split_heads(matmul_any(x, wq), heads)
        k = _split_heads(matmul_any(x, wk), heads)
        v = _split_heads(matmul_any(x, wv), heads)
    o = _merge_heads(scaled_dot_attention(q, k, v, mask))
    if wout is None:
        return o
    with mac_scope("out_proj"):
        return matmul_any(o, wout)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, use_wout: bool = True):
        if dim % heads:
            raise DimensionError(f"{heads} heads do not divide model width {dim}")
        self.dim, self.heads = dim, heads
        self.wq = uniform_init(rng, (dim, dim), dim)
        self.wk = uniform_init(rng, (dim, dim), dim)
        self.wv = uniform_init(rng, (dim, dim), dim)
        self.wout = uniform_init(rng, (dim, dim), dim) if use_wout else None

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return multi_head_attention(x, self.wq, self.wk, self.wv, self.wout, self.heads, mask)

    def num_params(self) -> int:
        return (3 + (self.wout is not None)) * self.dim * self.dim


class TokenParallelAttention(Module):
    """Channel groups with independent attention; ``use_wout=False`` drops the output projection."""

    def __init__(self, dim: int, groups: int, heads_per_group: int, rng: np.random.Generator, use_wout: bool = True):
        if dim % groups:
            raise DimensionError(f"{groups} groups do not divide width {dim}")
        if (dim // groups) % heads_per_group:
            raise DimensionError(f"{heads_per_group} heads do not divide group width {dim // groups}")
        self.dim, self.groups, self.heads_per_group = dim, groups, heads_per_group
        self.group_attn = [
            MultiHeadAttention(dim // groups, heads_per_group, rng, use_wout) for _ in range(groups)
        ]

    @property
    def use_wout(self) -> bool:
        return self.group_attn[0].wout is not None

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return token_parallel_attention(x, self, mask)

    def num_params(self) -> int:
        return sum(a.num_params() for a in self.group_attn)


def token_parallel_attention(x: Tensor, p: TokenParallelAttention, mask=None) -> Tensor:
    dg = p.dim // p.groups
    if p.groups == 1:
        return p.group_attn[0](x, mask)
    outs = [a(x[..., g * dg:(g + 1) * dg], mask) for g, a in enumerate(p.group_attn)]
    return concat(outs, axis=-1)


def absorb_wout(p: TokenParallelAttention) -> TokenParallelAttention:
    """Fold each group's output projection into its value projection (one head per group)."""
    if p.heads_per_group != 1 or not p.use_wout:
        raise ValueError("W_out absorption needs one head per group and an explicit W_out")
    q = TokenParallelAttention.__new__(TokenParallelAttention)
    q.dim, q.groups, q.heads_per_group = p.dim, p.groups, 1
    q.group_attn = []
    for a in p.group_attn:
        b = MultiHeadAttention.__new__(MultiHeadAttention)
        b.dim, b.heads = a.dim, 1
        b.wq, b.wk = Tensor(a.wq.data.copy(), True), Tensor(a.wk.data.copy(), True)
        b.wv = Tensor(a.wv.data @ a.wout.data, True)
        b.wout = None
        q.group_attn.append(b)
    return q


class TransformerBlock(Module):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, expansion: int = 2, attention: Module | None = None):
        self.dim, self.heads, self.expansion = dim, heads, expansion
        self.ln1 = LayerNorm(dim)
        self.attn = attention if attention is not None else MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP([dim, dim * expansion, dim], rng)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return transformer_block(x, self, mask)

    def num_params(self) -> int:
        return 4 * self.dim + self.attn.num_params() + self.mlp.num_params()

    def macs(self, seqs: int, n: int, attended: int | None = None) -> int:
        """MACs of one block on ``seqs`` sequences of length ``n``, each token attending ``attended`` keys."""
        attended = n if attended is None else attended
        D = self.dim
        proj = self.attn.num_params()  # weight-only, one MAC per weight per token
        return seqs * n * (proj + 2 * attended * D) + self.mlp.macs(seqs * n)


def transformer_block(x: Tensor, p: TransformerBlock, mask=None) -> Tensor:
    if x.ndim != 3 or x.shape[-1] != p.dim:
        raise DimensionError(f"transformer block expects [B*, n, {p.dim}], got {x.shape}")
    x = x + p.attn(p.ln1(x), mask)
    with mac_scope("mlp"):
        return x + p.mlp(p.ln2(x))


def _butterfly_fold(x: Tensor, a: int, stride: int) -> Tensor:
    B, S, D = x.shape
    y = reshape(x, (B, -1, a, stride, D))
    return reshape(transpose_axes(y, 2, 3), (-1, a, D))


def _butterfly_unfold(x: Tensor, B: int, S: int, a: int, stride: int) -> Tensor:
    D = x.shape[-1]
    y = reshape(x, (B, -1, stride, a, D))
    return reshape(transpose_axes(y, 2, 3), (B, S, D))


def _fold_token_mask(mask: np.ndarray, a: int, stride: int, permute: bool) -> np.ndarray:
    B, S = mask.shape
    if not permute:
        return mask.reshape(-1, a)
    return mask.reshape(B, -1, a, stride).transpose(0, 1, 3, 2).reshape(-1, a)


class ButterflyTransformer(Module):
    """Transformer layers applied to butterfly-permuted token blocks of size ``block_size``.

    The block size defaults to sqrt(S) and must be given explicitly otherwise.
    ``permute_mask`` keeps token-wise masks aligned with permuted tokens; with
    False the mask is folded in original order, exactly as the loop-invariant
    reference pseudocode passes it.
    """

    def __init__(
        self,
        seq_len: int,
        dim: int,
        heads: int,
        depth: int,
        rng: np.random.Generator,
        block_size: int | None = None,
        expansion: int = 2,
        permute_mask: bool = True,
    ):
        if block_size is None:
            root = math.isqrt(seq_len)
            if root * root != seq_len:
                raise ScheduleError(f"sequence length {seq_len} is not a perfect square; pass block_size")
            block_size = root
        self.schedule = ButterflySchedule(seq_len, block_size, depth)
        self.layers = [TransformerBlock(dim, heads, rng, expansion) for _ in range(depth)]
        self.permute_mask = permute_mask

    @property
    def block_size(self) -> int:
        return self.schedule.block_size

    def forward(self, x: Tensor, mask=None) -> Tensor:
        return butterfly_attention_forward(x, self, mask)

    def num_params(self) -> int:
        return sum(l.num_params() for l in self.layers)

    def macs(self, batch: int = 1) -> int:
        S, a = self.schedule.input_dim, self.block_size
        return sum(l.macs(batch * S // a, a) for l in self.layers)

    def attention_score_macs(self, batch: int = 1) -> int:
        S, a = self.schedule.input_dim, self.block_size
        return sum(batch * S * a * l.dim for l in self.layers)


def butterfly_attention_forward(x: Tensor, p: ButterflyTransformer, mask=None) -> Tensor:
    B, S, D = x.shape
    if S != p.schedule.input_dim:
        raise ScheduleError(f"butterfly attention built for length {p.schedule.input_dim}, got {S}")
    a = p.block_size
    block_mask = None
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.ndim == 5:
            block_mask = mask.reshape(-1, *mask.shape[2:])
        elif mask.shape != (B, S):
            raise DimensionError(f"mask shape {mask.shape} matches neither [B, S] nor block form")
    for stride, layer in zip(p.schedule.strides, p.layers):
        m = block_mask
        if mask is not None and block_mask is None:
            m = _fold_token_mask(mask, a, stride, p.permute_mask)
        h = _butterfly_fold(x, a, stride)
        h = transformer_block(h, layer, m)
        x = _butterfly_unfold(h, B, S, a, stride)
    return x


class DenseTransformer(Module):
    def __init__(self, dim: int, heads: int, depth: int, rng: np.random.Generator, expansion: int = 2):
        self.layers = [TransformerBlock(dim, heads, rng, expansion) for _ in range(depth)]

    def forward(self, x: Tensor, mask=None) -> Tensor:
        for layer in self.layers:
            x = transformer_block(x, layer, mask)
        return x

    def num_params(self) -> int:
        return sum(l.num_params() for l in self.layers)

    def macs(self, seq_len: int, batch: int = 1) -> int:
        return sum(l.macs(batch, seq_len) for l in self.layers)

    def attention_score_macs(self, seq_len: int, batch: int = 1) -> int:
        return sum(batch * seq_len * seq_len * l.dim for l in self.layers)


class VisionTransformer(Module):
    """Patchify, linear embed, dense or butterfly layers, mean-pool, linear classifier.

    No positional encoding.
    """

    def __init__(
        self,
        image_size: int,
        channels: int,
        patch_size: int,
        dim: int,
        depth: int,
        heads: int,
        num_classes: int,
        rng: np.random.Generator,
        butterfly: bool = False,
        block_size: int | None = None,
        expansion: int = 2,
    ):
        if image_size % patch_size:
            raise ScheduleError(f"patch size {patch_size} does not divide image side {image_size}")
        self.image_size, self.channels, self.patch_size = image_size, channels, patch_size
        self.seq_len = (image_size // patch_size) ** 2
        self.dim, self.num_classes = dim, num_classes
        self.embed = Linear(channels * patch_size * patch_size, dim, rng)
        if butterfly:
            self.body = ButterflyTransformer(self.seq_len, dim, heads, depth, rng, block_size, expansion)
        else:
            self.body = DenseTransformer(dim, heads, depth, rng, expansion)
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, num_classes, rng)

    @property
    def butterfly(self) -> bool:
        return isinstance(self.body, ButterflyTransformer)

    def forward(self, images) -> Tensor:
        return vit_forward(images, self.patch_size, self)

    def num_params(self) -> int:
        return self.embed.num_params() + self.body.num_params() + 2 * self.dim + self.head.num_params()

    def macs(self, batch: int = 1) -> int:
        S = self.seq_len
        body = self.body.macs(batch) if self.butterfly else self.body.macs(S, batch)
        return batch * S * self.embed.weight.size + body + batch * self.head.weight.size

    def attention_score_macs(self, batch: int = 1) -> int:
        if self.butterfly:
            return self.body.attention_score_macs(batch)
        return self.body.attention_score_macs(self.seq_len, batch)


def vit_forward(images, patch_size: int, p: VisionTransformer) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[2] % patch_size or x.shape[3] % patch_size:
        raise ScheduleError(f"image batch {x.shape} not divisible into {patch_size}x{patch_size} patches")
    tokens = extract_patches(x, patch_size)
    with mac_scope("embed"):
        h = p.embed(tokens)
    h = p.body(h)
    h = mean(p.norm(h), axis=1)
    with mac_scope("head"):
        return p.head(h)
