"""Patch-Only MLP-Mixer and the standard MLP-Mixer baseline.

Patch layout: non-overlapping K x K tiles in row-major tile order; each tile
is flattened channel-major, then row-major over its K x K pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .block_mlp import ButterflyLinearMLP, ButterflyMLP
from .errors import ScheduleError
from .tensor import MLP, LayerNorm, Linear, Module, Tensor, mac_scope, mean, permute_axes, reshape, transpose_axes


def extract_patches(x: Tensor, K: int) -> Tensor:
    """[B, C, I, I] -> [B, (I/K)^2, K*K*C]."""
    B, C, H, W = x.shape
    if H % K or W % K:
        raise ScheduleError(f"patch size {K} does not divide image {H}x{W}")
    y = reshape(x, (B, C, H // K, K, W // K, K))
    y = permute_axes(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (B, (H // K) * (W // K), C * K * K))


def combine_patches(p: Tensor, K: int, channels: int, image_size: int) -> Tensor:
    """Exact inverse of :func:`extract_patches`."""
    B = p.shape[0]
    g = image_size // K
    if image_size % K or p.shape[1:] != (g * g, channels * K * K):
        raise ScheduleError(f"patch tensor {p.shape} does not tile a {image_size}x{image_size} image at K={K}")
    y = reshape(p, (B, g, g, channels, K, K))
    y = permute_axes(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (B, channels, image_size, image_size))


def effective_mixing_block(patch_sizes: Sequence[int]) -> int:
    """Axis length over which alternating tilings can mix: lcm of the patch sizes."""
    if not patch_sizes:
        raise ValueError("need at least one patch size")
    return math.lcm(*patch_sizes)


@dataclass(frozen=True)
class PatchSchedule:
    image_size: int
    patch_sizes: tuple[int, ...]
    channels: int = 3
    gcds: dict = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "patch_sizes", tuple(int(k) for k in self.patch_sizes))
        if not self.patch_sizes:
            raise ScheduleError("patch schedule needs at least one patch size")
        for k in self.patch_sizes:
            if k <= 0 or self.image_size % k:
                raise ScheduleError(f"patch size {k} does not divide image side {self.image_size}")
        object.__setattr__(
            self, "gcds", {(a, b): math.gcd(a, b) for a, b in combinations(self.patch_sizes, 2)}
        )

    @property
    def effective_block(self) -> int:
        return effective_mixing_block(self.patch_sizes)

    @property
    def coprime(self) -> bool:
        return all(g == 1 for g in self.gcds.values())

    @property
    def product_matches(self) -> bool:
        return math.prod(self.patch_sizes) == self.image_size

    def patch_size(self, layer: int) -> int:
        return self.patch_sizes[layer % len(self.patch_sizes)]


class PatchLayer(Module):
    """Shared MLP over flattened K x K x C patches, pre-norm and residual."""

    def __init__(self, K: int, channels: int, rng: np.random.Generator, expansion: int = 2):
        self.K, self.channels = K, channels
        width = K * K * channels
        self.norm = LayerNorm(width)
        self.mlp = MLP([width, width * expansion, width], rng)

    def forward(self, x: Tensor) -> Tensor:
        I = x.shape[-1]
        p = extract_patches(x, self.K)
        p = p + self.mlp(self.norm(p))
        return combine_patches(p, self.K, self.channels, I)

    def num_params(self) -> int:
        return 2 * self.mlp.dims[0] + self.mlp.num_params()

    def macs(self, image_size: int, batch: int = 1) -> int:
        return self.mlp.macs(batch * (image_size // self.K) ** 2)


class PatchOnlyMixer(Module):
    """Alternates patch sizes round-robin; mean-pooled patch features feed a linear classifier."""

    def __init__(
        self,
        schedule: PatchSchedule,
        depth: int,
        num_classes: int,
        rng: np.random.Generator,
        expansion: int = 2,
    ):
        self.schedule = schedule
        C = schedule.channels
        self.layers = [PatchLayer(schedule.patch_size(i), C, rng, expansion) for i in range(depth)]
        self.head_K = schedule.patch_size(depth - 1)
        width = self.head_K**2 * C
        self.head_norm = LayerNorm(width)
        self.head = Linear(width, num_classes, rng)

    def forward(self, x) -> Tensor:
        return patch_only_mixer_forward(x, self.schedule, self)

    def num_params(self) -> int:
        w = self.head_K**2 * self.schedule.channels
        return sum(l.num_params() for l in self.layers) + 2 * w + self.head.num_params()

    def macs(self, batch: int = 1) -> int:
        I = self.schedule.image_size
        return sum(l.macs(I, batch) for l in self.layers) + batch * self.head.weight.size


def patch_only_mixer_forward(x, schedule: PatchSchedule, p: PatchOnlyMixer) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != schedule.channels or x.shape[2:] != (schedule.image_size,) * 2:
        raise ScheduleError(
            f"expected [B, {schedule.channels}, {schedule.image_size}, {schedule.image_size}], got {x.shape}"
        )
    for layer in p.layers:
        with mac_scope("patch_mlp"):
            x = layer(x)
    h = extract_patches(x, p.head_K)
    h = mean(p.head_norm(h), axis=1)
    with mac_scope("head"):
        return p.head(h)


MIXER_KINDS = ("dense", "butterfly_linear", "butterfly_mlp")


def make_mixer(kind: str, dim: int, rng: np.random.Generator, radix: int | None = None, expansion: int = 2) -> Module:
    if kind == "dense":
        return MLP([dim, dim * expansion, dim], rng)
    if kind == "butterfly_mlp":
        return ButterflyMLP(dim, radix, rng, expansion=expansion)
    if kind == "butterfly_linear":
        if expansion != 1:
            raise ValueError("butterfly_linear mixers support expansion 1 only")
        return ButterflyLinearMLP(dim, radix, rng)
    raise ValueError(f"unknown mixer kind {kind!r}; expected one of {MIXER_KINDS}")


class MixerBlock(Module):
    def __init__(self, tokens: int, channels: int, rng, token_kind="dense", channel_kind="dense",
                 token_radix=None, channel_radix=None, expansion=2):
        self.ln1 = LayerNorm(channels)
        self.token_mlp = make_mixer(token_kind, tokens, rng, token_radix, expansion)
        self.ln2 = LayerNorm(channels)
        self.channel_mlp = make_mixer(channel_kind, channels, rng, channel_radix, expansion)

    def forward(self, x: Tensor) -> Tensor:
        B, T, C = x.shape
        y = transpose_axes(self.ln1(x), 1, 2)
        with mac_scope("token_mix"):
            y = self.token_mlp(reshape(y, (B * C, T)))
        x = x + transpose_axes(reshape(y, (B, C, T)), 1, 2)
        with mac_scope("channel_mix"):
            y = self.channel_mlp(reshape(self.ln2(x), (B * T, C)))
        return x + reshape(y, (B, T, C))

    def num_params(self) -> int:
        C = self.ln1.gain.shape[0]
        return 4 * C + self.token_mlp.num_params() + self.channel_mlp.num_params()

    def macs(self, tokens: int, channels: int, batch: int = 1) -> int:
        return self.token_mlp.macs(batch * channels) + self.channel_mlp.macs(batch * tokens)


class MLPMixer(Module):
    """Patch embed, alternating token- and channel-mixing MLPs, mean-pool, classifier."""

    def __init__(
        self,
        image_size: int,
        channels: int,
        patch_size: int,
        channel_dim: int,
        depth: int,
        num_classes: int,
        rng: np.random.Generator,
        token_kind: str = "dense",
        channel_kind: str = "dense",
        token_radix: int | None = None,
        channel_radix: int | None = None,
        expansion: int = 2,
    ):
        if image_size % patch_size:
            raise ScheduleError(f"patch size {patch_size} does not divide image side {image_size}")
        self.patch_size = patch_size
        self.tokens = (image_size // patch_size) ** 2
        self.channel_dim = channel_dim
        self.embed = Linear(channels * patch_size * patch_size, channel_dim, rng)
        self.blocks = [
            MixerBlock(self.tokens, channel_dim, rng, token_kind, channel_kind, token_radix, channel_radix, expansion)
            for _ in range(depth)
        ]
        self.norm = LayerNorm(channel_dim)
        self.head = Linear(channel_dim, num_classes, rng)

    def forward(self, x) -> Tensor:
        return mlp_mixer_forward(x, self.patch_size, self.channel_dim, self)

    def mixing_params(self) -> int:
        return sum(b.token_mlp.num_params() + b.channel_mlp.num_params() for b in self.blocks)

    def num_params(self) -> int:
        return (
            self.embed.num_params()
            + sum(b.num_params() for b in self.blocks)
            + 2 * self.channel_dim
            + self.head.num_params()
        )

    def macs(self, batch: int = 1) -> int:
        T, C = self.tokens, self.channel_dim
        return (
            batch * T * self.embed.weight.size
            + sum(b.macs(T, C, batch) for b in self.blocks)
            + batch * self.head.weight.size
        )


def mlp_mixer_forward(x, patch_size: int, channel_dim: int, p: MLPMixer) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    with mac_scope("embed"):
        h = p.embed(extract_patches(x, patch_size))
    if h.shape[-1] != channel_dim:
        raise ScheduleError(f"embedding width {h.shape[-1]} != channel dim {channel_dim}")
    for block in p.blocks:
        h = block(h)
    h = mean(p.norm(h), axis=1)
    with mac_scope("head"):
        return p.head(h)
