"""Block-sparse linear layers, block MLPs and the Butterfly MLP stack."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .butterfly import ButterflySchedule, butterfly_permute, butterfly_unpermute
from .errors import DimensionError, ScheduleError
from .tensor import (
    MLP,
    Module,
    Tensor,
    batched_matmul,
    gelu,
    reshape,
    transpose_axes,
    uniform_init,
)


class BlockLinear(Module):
    """``num_blocks`` independent affine maps applied to x of shape [num_blocks, batch, in_block]."""

    def __init__(self, num_blocks: int, in_block: int, out_block: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (num_blocks, in_block, out_block), in_block)
        self.bias = uniform_init(rng, (num_blocks, 1, out_block), in_block)

    @property
    def num_blocks(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return block_linear_forward(x, self)

    def num_params(self) -> int:
        nb, i, o = self.weight.shape
        return nb * (i * o + o)

    def macs(self, batch: int = 1) -> int:
        nb, i, o = self.weight.shape
        return batch * nb * i * o


def block_linear_forward(x: Tensor, p: BlockLinear) -> Tensor:
    if x.ndim != 3 or x.shape[0] != p.weight.shape[0]:
        raise DimensionError(
            f"block_linear expects [{p.weight.shape[0]}, batch, {p.weight.shape[1]}], got {x.shape}"
        )
    return batched_matmul(x, p.weight) + p.bias


class BlockMLP(Module):
    """A bank of identical-shape MLPs, one per contiguous block of ``block_dims[0]`` inputs.

    Activation sits between BlockLinears only, never after the last one.
    """

    def __init__(self, input_dim: int, block_dims: Sequence[int], rng: np.random.Generator):
        block_dims = list(block_dims)
        if len(block_dims) < 2:
            raise ValueError("block_dims needs at least an input and an output width")
        if input_dim % block_dims[0]:
            raise ScheduleError(f"block width {block_dims[0]} does not divide input dim {input_dim}")
        self.input_dim = input_dim
        self.block_dims = block_dims
        self.block_dim = block_dims[0]
        nb = input_dim // block_dims[0]
        self.layers = [BlockLinear(nb, a, b, rng) for a, b in zip(block_dims[:-1], block_dims[1:])]

    @property
    def num_blocks(self) -> int:
        return self.input_dim // self.block_dim

    @property
    def output_dim(self) -> int:
        return self.num_blocks * self.block_dims[-1]

    def forward(self, x: Tensor) -> Tensor:
        return block_mlp_forward(x, self)

    def num_params(self) -> int:
        d = self.block_dims
        return self.num_blocks * sum(a * b + b for a, b in zip(d[:-1], d[1:]))

    def macs(self, batch: int = 1) -> int:
        d = self.block_dims
        return batch * self.num_blocks * sum(a * b for a, b in zip(d[:-1], d[1:]))


def block_mlp_forward(x: Tensor, p: BlockMLP) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise DimensionError(f"block_mlp expects [batch, {p.input_dim}], got {x.shape}")
    bs = x.shape[0]
    h = transpose_axes(reshape(x, (bs, -1, p.block_dim)), 0, 1)
    for i, layer in enumerate(p.layers):
        if i:
            h = gelu(h)
        h = block_linear_forward(h, layer)
    return reshape(transpose_axes(h, 1, 0), (bs, -1))


class ButterflyMLP(Module):
    """Block MLPs interleaved with butterfly permutations.

    ``permutation_counter`` counts physical data-movement passes; stride-1
    layers select dimensions as they are and move nothing.
    """

    def __init__(
        self,
        input_dim: int,
        block_size: int,
        rng: np.random.Generator,
        num_layers: int | None = None,
        expansion: int = 2,
        block_dims: Sequence[int] | None = None,
    ):
        self.schedule = ButterflySchedule(input_dim, block_size, num_layers)
        dims = list(block_dims) if block_dims is not None else [block_size, block_size * expansion, block_size]
        if dims[0] != block_size or dims[-1] != block_size:
            raise ScheduleError(f"block dims {dims} must start and end at the radix {block_size}")
        self.block_dims = dims
        self.blocks = [BlockMLP(input_dim, dims, rng) for _ in range(self.schedule.num_layers)]
        self.permutation_counter = 0

    @property
    def input_dim(self) -> int:
        return self.schedule.input_dim

    def forward(self, x: Tensor) -> Tensor:
        return butterfly_mlp_forward(x, self)

    def permutations_per_forward(self) -> int:
        return 2 * sum(1 for s in self.schedule.strides if s > 1)

    def num_params(self) -> int:
        return sum(b.num_params() for b in self.blocks)

    def macs(self, batch: int = 1) -> int:
        return sum(b.macs(batch) for b in self.blocks)


def butterfly_mlp_forward(x: Tensor, p: ButterflyMLP) -> Tensor:
    N = p.schedule.input_dim
    if x.ndim != 2 or x.shape[1] != N:
        raise ScheduleError(f"butterfly MLP over {N} dims got input {x.shape}")
    r = p.schedule.block_size
    for stride, block in zip(p.schedule.strides, p.blocks):
        if stride > 1:
            x = butterfly_permute(x, r, stride)
            p.permutation_counter += 1
        x = block_mlp_forward(x, block)
        if stride > 1:
            x = butterfly_unpermute(x, r, stride)
            p.permutation_counter += 1
    return x


class ButterflyLinear(ButterflyMLP):
    """Butterfly-linear transform: one BlockLinear per butterfly factor, no activation."""

    def __init__(self, input_dim: int, block_size: int, rng: np.random.Generator, num_layers: int | None = None):
        super().__init__(input_dim, block_size, rng, num_layers, block_dims=[block_size, block_size])


class ButterflyLinearMLP(Module):
    """Two stacked butterfly-linear transforms with GELU between (the sparse-linear MLP baseline)."""

    def __init__(self, input_dim: int, block_size: int, rng: np.random.Generator):
        self.first = ButterflyLinear(input_dim, block_size, rng)
        self.second = ButterflyLinear(input_dim, block_size, rng)

    @property
    def permutation_counter(self) -> int:
        return self.first.permutation_counter + self.second.permutation_counter

    def permutations_per_forward(self) -> int:
        return self.first.permutations_per_forward() + self.second.permutations_per_forward()

    def forward(self, x: Tensor) -> Tensor:
        return self.second(gelu(self.first(x)))

    def num_params(self) -> int:
        return self.first.num_params() + self.second.num_params()

    def macs(self, batch: int = 1) -> int:
        return self.first.macs(batch) + self.second.macs(batch)


def dense_mlp(input_dim: int, rng: np.random.Generator, expansion: int = 2) -> MLP:
    return MLP([input_dim, input_dim * expansion, input_dim], rng)


def count_params(model) -> int:
    """Closed-form parameter count of a model from its configuration."""
    return model.num_params()


def count_macs(model, batch: int = 1) -> int:
    """Closed-form multiply-accumulate count of one forward pass."""
    return model.macs(batch)
