"""Butterfly index arithmetic: strides, layer counts, permute/unpermute, DeBut products."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IncomposableError, ScheduleError
from .tensor import Tensor, reshape, transpose_axes


def num_butterfly_layers(N: int, r: int) -> int:
    """ceil(log_r N), computed in integers."""
    _check_radix(N, r)
    if r == 1:
        raise ScheduleError("radix 1 never mixes")
    if r == N:
        return 1
    L, reach = 1, r
    while reach < N:
        reach *= r
        L += 1
    return L


def compute_stride(N: int, r: int, i: int) -> int:
    """Stride of butterfly layer ``i``: r**i, clamped to N // r once r**(i+1) exceeds N."""
    _check_radix(N, r)
    if i < 0:
        raise ScheduleError(f"layer index must be non-negative, got {i}")
    return r**i if r ** (i + 1) <= N else N // r


def _check_radix(N: int, r: int) -> None:
    if N <= 0 or r <= 0:
        raise ScheduleError(f"dimension and radix must be positive, got N={N}, r={r}")
    if N % r:
        raise ScheduleError(f"radix {r} does not divide dimension {N}")


def check_block_stride(N: int, block: int, stride: int) -> None:
    if N % (block * stride):
        raise ScheduleError(
            f"block {block} x stride {stride} = {block * stride} does not divide dimension {N}"
        )


@dataclass(frozen=True)
class ButterflySchedule:
    """Radix-r butterfly over N dims.

    ``num_layers`` defaults to ceil(log_r N). Shorter schedules are allowed and
    flagged ``partial``; longer ones cycle through the complete stride pattern.
    """

    input_dim: int
    block_size: int
    num_layers: int | None = None
    strides: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        complete = num_butterfly_layers(self.input_dim, self.block_size)
        L = complete if self.num_layers is None else self.num_layers
        if L <= 0:
            raise ScheduleError(f"num_layers must be positive, got {L}")
        object.__setattr__(self, "num_layers", L)
        strides = tuple(compute_stride(self.input_dim, self.block_size, i % complete) for i in range(L))
        for s in strides:
            check_block_stride(self.input_dim, self.block_size, s)
        object.__setattr__(self, "strides", strides)

    @property
    def complete_layers(self) -> int:
        return num_butterfly_layers(self.input_dim, self.block_size)

    @property
    def partial(self) -> bool:
        return self.num_layers < self.complete_layers

    def stride(self, i: int) -> int:
        return self.strides[i]


def butterfly_permute(x: Tensor, r: int, stride: int) -> Tensor:
    """Gather every ``stride``-th element into contiguous blocks of ``r`` on the last axis."""
    N = x.shape[-1]
    check_block_stride(N, r, stride)
    lead = x.shape[:-1]
    y = reshape(x, (-1, r, stride))
    y = transpose_axes(y, 2, 1)
    return reshape(y, lead + (N,))


def butterfly_unpermute(x: Tensor, r: int, stride: int) -> Tensor:
    """Inverse of :func:`butterfly_permute`."""
    N = x.shape[-1]
    check_block_stride(N, r, stride)
    lead = x.shape[:-1]
    y = reshape(x, (-1, stride, r))
    y = transpose_axes(y, 2, 1)
    return reshape(y, lead + (N,))


def block_groups(N: int, block: int, stride: int) -> np.ndarray:
    """[N // block, block] original indices processed together by one mixer block."""
    check_block_stride(N, block, stride)
    idx = np.arange(N).reshape(-1, block, stride).transpose(0, 2, 1)
    return np.ascontiguousarray(idx.reshape(-1, block))


# ---- DeBut factors ------------------------------------------------------------


@dataclass(frozen=True)
class DebutFactor:
    """Block-diagonal p x q matrix; each block is an r x s grid of t x t diagonal sub-blocks."""

    p: int
    q: int
    r: int
    s: int
    t: int = 1

    def __post_init__(self):
        p, q, r, s, t = self.p, self.q, self.r, self.s, self.t
        if min(p, q, r, s, t) < 1:
            raise ScheduleError(f"DeBut extents must be positive: {self}")
        if p % (r * t) or q % (s * t):
            raise ScheduleError(f"DeBut block {r * t}x{s * t} does not tile {p}x{q}")
        if p // (r * t) != q // (s * t):
            raise ScheduleError(f"DeBut {p}x{q} has unequal row/column block counts")

    @property
    def num_blocks(self) -> int:
        return self.p // (self.r * self.t)

    def support(self) -> np.ndarray:
        """Boolean p x q nonzero pattern."""
        rt, st, t = self.r * self.t, self.s * self.t, self.t
        i = np.arange(self.p)[:, None]
        j = np.arange(self.q)[None, :]
        same_block = (i // rt) == (j // st)
        same_diag = ((i % rt) % t) == ((j % st) % t)
        return same_block & same_diag

    def random_matrix(self, rng: np.random.Generator) -> np.ndarray:
        vals = rng.uniform(0.1, 1.0, (self.p, self.q)) * rng.choice([-1.0, 1.0], (self.p, self.q))
        return np.where(self.support(), vals, 0.0)


@dataclass(frozen=True)
class DebutComposition:
    dense_original_rule: bool
    dense_relaxed_rule: bool
    structural_dense: bool
    numeric_dense: bool
    effective_partition_original: tuple[int, int]
    effective_partition_relaxed: tuple[int, int]

    @property
    def dense_product(self) -> bool:
        return self.structural_dense


def _block_dense(mask: np.ndarray, rows: int, cols: int) -> bool:
    """True iff ``mask`` equals the block-diagonal all-ones pattern with rows x cols blocks."""
    p, q = mask.shape
    if p % rows or q % cols or p // rows != q // cols:
        return False
    i = np.arange(p)[:, None] // rows
    j = np.arange(q)[None, :] // cols
    return bool(np.array_equal(mask, i == j))


def validate_debut_composition(
    f2: DebutFactor, f1: DebutFactor, rng: np.random.Generator | None = None, zero_tol: float = 1e-12
) -> DebutComposition:
    """Decide whether f2 @ f1 densifies into dense blocks.

    Reports the original rule (t2 == r1), the relaxed rule (1 < t2 <= r1), and two
    independent verdicts on the actual product: one from support patterns, one
    from multiplying random-weight matrices with a zero threshold.
    """
    if f2.q != f1.p:
        raise IncomposableError(f"q2={f2.q} must equal p1={f1.p}")
    orig_part = (f2.r * f1.r, f2.s * f1.s)
    relaxed_part = (f2.r * f2.t, f2.s * f2.t)
    dense_original = f2.t > 1 and f1.t == 1 and f2.t == f1.r
    dense_relaxed = f1.t == 1 and 1 < f2.t <= f1.r

    s2, s1 = f2.support().astype(np.int64), f1.support().astype(np.int64)
    structural = (s2 @ s1) > 0
    rng = rng if rng is not None else np.random.default_rng(0)
    numeric = np.abs(f2.random_matrix(rng) @ f1.random_matrix(rng)) > zero_tol
    return DebutComposition(
        dense_original_rule=dense_original,
        dense_relaxed_rule=dense_relaxed,
        structural_dense=_block_dense(structural, *relaxed_part),
        numeric_dense=_block_dense(numeric, *relaxed_part),
        effective_partition_original=orig_part,
        effective_partition_relaxed=relaxed_part,
    )
