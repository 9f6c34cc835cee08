"""Reachability and cost analysis of dimension-mixing schedules.

A schedule is a sequence of stages; each stage is a set of mixer units, and a
unit connects every one of its input dims to every one of its output dims.
Dims untouched by a stage pass through unchanged. A mixer unit may itself be a
nested schedule over its own dims (one level deep).
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .attention import ButterflyTransformer, VisionTransformer
from .block_mlp import BlockMLP, ButterflyLinearMLP, ButterflyMLP
from .butterfly import ButterflySchedule, block_groups
from .errors import NumericError, ScheduleError
from .patch_mixer import MLPMixer, PatchOnlyMixer, PatchSchedule
from .tensor import MLP, Module, Tensor, count_macs, make_rng, no_grad


@dataclass(frozen=True)
class MixerUnit:
    inputs: frozenset
    outputs: frozenset

    @classmethod
    def block(cls, dims: Iterable[int]) -> "MixerUnit":
        s = frozenset(int(d) for d in dims)
        return cls(s, s)


@dataclass(frozen=True)
class NestedUnit:
    """A mixer that is itself a (flat) schedule over ``dims``; local index k means dims[k]."""

    dims: tuple[int, ...]
    schedule: "MixingSchedule"


@dataclass
class MixingSchedule:
    num_dims: int
    stages: list[list] = field(default_factory=list)

    def __post_init__(self):
        for s, stage in enumerate(self.stages):
            for unit in stage:
                if isinstance(unit, NestedUnit):
                    if unit.schedule.num_dims != len(unit.dims):
                        raise ScheduleError(f"stage {s}: nested schedule width != {len(unit.dims)} dims")
                    if any(isinstance(u, NestedUnit) for st in unit.schedule.stages for u in st):
                        raise ScheduleError("only one level of nested mixers is supported")
                    dims = set(unit.dims)
                else:
                    dims = set(unit.inputs) | set(unit.outputs)
                bad = [d for d in dims if not 0 <= d < self.num_dims]
                if bad:
                    raise ScheduleError(f"stage {s}: dims {bad[:5]} outside [0, {self.num_dims})")


@dataclass(frozen=True)
class AttentionMixing:
    """Per-layer (block_size, stride) token grouping over a sequence, as in butterfly attention."""

    seq_len: int
    layers: tuple[tuple[int, int], ...]


@dataclass
class MixingGraph:
    """Layered graph; stage ``l`` holds complete-bipartite edge groups between boundaries l and l+1."""

    num_dims: int
    stages: list[list[tuple[frozenset, frozenset]]]

    @property
    def num_layers(self) -> int:
        return len(self.stages)

    def stage_matrix(self, l: int) -> np.ndarray:
        """Boolean [N, N] adjacency from boundary l to l+1 (pass-through on the diagonal)."""
        N = self.num_dims
        A = np.zeros((N, N), dtype=bool)
        touched = np.zeros(N, dtype=bool)
        for ins, outs in self.stages[l]:
            i = np.fromiter(ins, dtype=np.int64)
            o = np.fromiter(outs, dtype=np.int64)
            A[np.ix_(i, o)] = True
            touched[i] = True
        idle = np.flatnonzero(~touched)
        A[idle, idle] = True
        return A


# ---- lowering ---------------------------------------------------------------------


def _groups_stage(groups: np.ndarray) -> list[tuple[frozenset, frozenset]]:
    out = []
    for g in groups:
        s = frozenset(int(d) for d in g)
        out.append((s, s))
    return out


def _lower_schedule(s: MixingSchedule) -> list[list[tuple[frozenset, frozenset]]]:
    stages = []
    for stage in s.stages:
        groups = []
        for unit in stage:
            if isinstance(unit, NestedUnit):
                inner = build_mixing_graph(unit.schedule)
                reach = boolean_product_reach(inner)
                for a in range(len(unit.dims)):
                    outs = frozenset(unit.dims[b] for b in np.flatnonzero(reach[a]))
                    groups.append((frozenset([unit.dims[a]]), outs))
            else:
                groups.append((frozenset(unit.inputs), frozenset(unit.outputs)))
        stages.append(groups)
    return stages


def _tile_groups(image_size: int, K: int) -> np.ndarray:
    g = image_size // K
    idx = np.arange(image_size * image_size).reshape(g, K, g, K).transpose(0, 2, 1, 3)
    return idx.reshape(g * g, K * K)


def build_mixing_graph(obj, num_layers: int | None = None) -> MixingGraph:
    """Lower a schedule (or a live model) to a layered mixing graph.

    Patch schedules mix pixel positions (channels are mixed inside every
    tile); attention configs mix token positions.
    """
    if isinstance(obj, MixingGraph):
        return obj
    if isinstance(obj, MixingSchedule):
        return MixingGraph(obj.num_dims, _lower_schedule(obj))
    if isinstance(obj, ButterflySchedule):
        N, r = obj.input_dim, obj.block_size
        L = obj.num_layers if num_layers is None else num_layers
        strides = [obj.strides[i % len(obj.strides)] for i in range(L)]
        return MixingGraph(N, [_groups_stage(block_groups(N, r, s)) for s in strides])
    if isinstance(obj, AttentionMixing):
        return MixingGraph(obj.seq_len, [_groups_stage(block_groups(obj.seq_len, a, s)) for a, s in obj.layers])
    if isinstance(obj, PatchSchedule):
        L = len(obj.patch_sizes) if num_layers is None else num_layers
        I = obj.image_size
        return MixingGraph(I * I, [_groups_stage(_tile_groups(I, obj.patch_size(l))) for l in range(L)])
    if isinstance(obj, (ButterflyMLP, ButterflyTransformer)):
        return build_mixing_graph(obj.schedule)
    if isinstance(obj, ButterflyLinearMLP):
        a, b = build_mixing_graph(obj.first), build_mixing_graph(obj.second)
        return MixingGraph(a.num_dims, a.stages + b.stages)
    if isinstance(obj, BlockMLP):
        return MixingGraph(obj.input_dim, [_groups_stage(np.arange(obj.input_dim).reshape(-1, obj.block_dim))])
    if isinstance(obj, PatchOnlyMixer):
        return build_mixing_graph(obj.schedule, len(obj.layers))
    if isinstance(obj, MLP):
        N = obj.dims[0]
        return MixingGraph(N, [_groups_stage(np.arange(N)[None])])
    if isinstance(obj, VisionTransformer):
        if obj.butterfly:
            return build_mixing_graph(obj.body)
        S = obj.seq_len
        return MixingGraph(S, [_groups_stage(np.arange(S)[None])] * len(obj.body.layers))
    raise ScheduleError(f"cannot build a mixing graph from {type(obj).__name__}")


# ---- reachability -------------------------------------------------------------------


@dataclass
class MixingReport:
    complete: bool
    missing_pairs: list[tuple[int, int]]
    per_input_reach_counts: list[int]

    def to_dict(self) -> dict:
        return {
            "complete": self.complete,
            "missing_pairs": [list(p) for p in self.missing_pairs],
            "min_reach": min(self.per_input_reach_counts, default=0),
            "max_reach": max(self.per_input_reach_counts, default=0),
        }


def _mask(dims: Iterable[int]) -> int:
    m = 0
    for d in dims:
        m |= 1 << d
    return m


def reach_masks(g: MixingGraph) -> list[int]:
    """Per-input reachable output set as an int bitmask, propagated stage by stage."""
    N = g.num_dims
    frontier = [1 << i for i in range(N)]
    for stage in g.stages:
        groups = [(_mask(i), _mask(o)) for i, o in stage]
        touched = 0
        for im, _ in groups:
            touched |= im
        idle = ((1 << N) - 1) & ~touched
        step: dict[int, int] = {}
        nxt = []
        for m in frontier:
            if m not in step:
                acc = m & idle
                for im, om in groups:
                    if m & im:
                        acc |= om
                step[m] = acc
            nxt.append(step[m])
        frontier = nxt
    return frontier


def check_complete_mixing(g, max_witnesses: int = 10) -> MixingReport:
    g = build_mixing_graph(g)
    N = g.num_dims
    masks = reach_masks(g)
    full = (1 << N) - 1
    counts = [bin(m).count("1") for m in masks]
    missing: list[tuple[int, int]] = []
    for i, m in enumerate(masks):
        if len(missing) >= max_witnesses:
            break
        gap = full & ~m
        while gap and len(missing) < max_witnesses:
            j = (gap & -gap).bit_length() - 1
            missing.append((i, j))
            gap &= gap - 1
    return MixingReport(all(c == N for c in counts), missing, counts)


def reach_matrix(g) -> np.ndarray:
    """[N, N] boolean: input i reaches output j (via the stage-wise propagation)."""
    g = build_mixing_graph(g)
    N = g.num_dims
    out = np.zeros((N, N), dtype=bool)
    for i, m in enumerate(reach_masks(g)):
        bits = np.frombuffer(m.to_bytes((N + 7) // 8, "little"), dtype=np.uint8)
        out[i] = np.unpackbits(bits, bitorder="little")[:N].astype(bool)
    return out


def boolean_product_reach(g) -> np.ndarray:
    """Independent oracle: support of the product of per-stage boolean matrices."""
    g = build_mixing_graph(g)
    R = np.eye(g.num_dims, dtype=np.float64)
    for l in range(g.num_layers):
        R = ((R @ g.stage_matrix(l).astype(np.float64)) > 0).astype(np.float64)
    return R > 0


# ---- numeric Jacobian -------------------------------------------------------------------


@dataclass
class JacobianDensity:
    density: float
    support: np.ndarray  # [outputs, inputs]


def jacobian_support(
    fn: Callable[[np.ndarray], np.ndarray],
    N: int,
    trials: int = 2,
    threshold: float = 1e-10,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Union over random points of {(j, i): |d y_j / d x_i| > threshold}, by central differences."""
    rng = rng if rng is not None else make_rng(0)
    support = None
    with no_grad():
        for _ in range(trials):
            x0 = rng.uniform(-1.0, 1.0, N)
            cols = []
            for i in range(N):
                xp, xm = x0.copy(), x0.copy()
                xp[i] += h
                xm[i] -= h
                yp = _flat(fn(xp))
                ym = _flat(fn(xm))
                if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
                    raise NumericError(f"non-finite model output while perturbing input {i}")
                cols.append(np.abs(yp - ym) / (2 * h) > threshold)
            s = np.stack(cols, axis=1)
            support = s if support is None else support | s
    return support


def _flat(y) -> np.ndarray:
    if isinstance(y, Tensor):
        y = y.data
    return np.asarray(y, dtype=np.float64).reshape(-1)


def jacobian_density(fn, N: int, trials: int = 2, threshold: float = 1e-10, h: float = 1e-4, rng=None) -> JacobianDensity:
    if N > 4096:
        raise ValueError(f"finite-difference Jacobian over {N} inputs is too large")
    s = jacobian_support(fn, N, trials, threshold, h, rng)
    return JacobianDensity(float(s.mean()), s)


def generic_weights(model: Module, rng: np.random.Generator, low: float = 0.1, high: float = 1.0) -> None:
    """Redraw every parameter with |w| in [low, high] and random sign, so cancellations are measure-zero."""
    for p in model.parameters():
        mag = rng.uniform(low, high, p.shape)
        sign = rng.choice([-1.0, 1.0], p.shape)
        p.data[...] = (mag * sign).astype(p.dtype)


# ---- costs -------------------------------------------------------------------------------


def walk_param_count(obj) -> int:
    """Count scalars by walking the object's stored parameter tensors."""
    seen: set[int] = set()
    total = 0

    def visit(v):
        nonlocal total
        if isinstance(v, Tensor):
            if v.requires_grad and id(v) not in seen:
                seen.add(id(v))
                total += v.data.size
        elif isinstance(v, (list, tuple)):
            for u in v:
                visit(u)
        elif isinstance(v, Module):
            if id(v) in seen:
                return
            seen.add(id(v))
            for u in vars(v).values():
                visit(u)

    visit(obj)
    return total


def example_input(model: Module, batch: int, rng: np.random.Generator):
    if isinstance(model, (ButterflyMLP, ButterflyLinearMLP)):
        n = model.input_dim if isinstance(model, ButterflyMLP) else model.first.input_dim
        return Tensor(rng.standard_normal((batch, n)))
    if isinstance(model, BlockMLP):
        return Tensor(rng.standard_normal((batch, model.input_dim)))
    if isinstance(model, MLP):
        return Tensor(rng.standard_normal((batch, model.dims[0])))
    if isinstance(model, ButterflyTransformer):
        S, D = model.schedule.input_dim, model.layers[0].dim
        return Tensor(rng.standard_normal((batch, S, D)))
    if isinstance(model, VisionTransformer):
        I = model.image_size
        return Tensor(rng.uniform(0, 1, (batch, model.channels, I, I)))
    if isinstance(model, PatchOnlyMixer):
        s = model.schedule
        return Tensor(rng.uniform(0, 1, (batch, s.channels, s.image_size, s.image_size)))
    if isinstance(model, MLPMixer):
        C = model.embed.weight.shape[0] // model.patch_size**2
        I = int(round(model.tokens**0.5)) * model.patch_size
        return Tensor(rng.uniform(0, 1, (batch, C, I, I)))
    inner = getattr(model, "mixer", None)
    if isinstance(inner, Module):
        # wrappers that flatten their input and hand it to a vector mixer
        return example_input(inner, batch, rng)
    raise TypeError(f"no example input for {type(model).__name__}")


def permutation_count(model: Module) -> int:
    """Physical permute/unpermute passes per forward, summed over every butterfly structure."""
    if hasattr(model, "permutations_per_forward"):
        return model.permutations_per_forward()
    total = 0
    for v in vars(model).values():
        items = v if isinstance(v, (list, tuple)) else [v]
        for u in items:
            if isinstance(u, Module):
                total += permutation_count(u)
    return total


def cost_report(model: Module, batch: int = 1, measure: bool = True, seed: int = 0) -> dict:
    """Analytic params/MACs/permutations plus measured MACs, wall time and peak allocation."""
    report = {
        "model": type(model).__name__,
        "params": model.num_params(),
        "params_walk": walk_param_count(model),
        "macs": model.macs(batch),
        "permutation_count": permutation_count(model),
        "per_module": {},
    }
    for name, v in vars(model).items():
        items = v if isinstance(v, (list, tuple)) else [v]
        mods = [u for u in items if isinstance(u, Module)]
        if mods:
            report["per_module"][name] = {"params": sum(walk_param_count(u) for u in mods)}
    if measure:
        x = example_input(model, batch, make_rng(seed))
        tracemalloc.start()
        t0 = time.perf_counter()
        with no_grad(), count_macs() as counter:
            model(x)
        wall = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        report["macs_measured"] = counter.total
        report["macs_by_scope"] = dict(counter.by_scope)
        report["wall_ms"] = 1000.0 * wall
        report["peak_bytes"] = int(peak)
    return report


def attention_score_macs(seq_len: int, block_size: int, dim: int, layers: int, batch: int = 1) -> int:
    """q.k^T MACs: (S / a) blocks x a^2 pairs x D per layer (a = S for dense attention)."""
    return batch * layers * seq_len * block_size * dim


# ---- reference configurations ------------------------------------------------------------

# Block-size / stride panels over an 8x8 grid of 64 patch tokens.
PANEL_SEQ_LEN = 64
ATTENTION_PANELS = {
    "a": (8, 1),   # rows
    "b": (8, 8),   # columns
    "c": (16, 1),  # pairs of rows
    "d": (4, 16),  # same column, every other row
    "e": (4, 2),   # alternate tokens within a row
    "f": (32, 2),  # same column parity
}


def panel_combination(first: str, second: str) -> AttentionMixing:
    return AttentionMixing(PANEL_SEQ_LEN, (ATTENTION_PANELS[first], ATTENTION_PANELS[second]))
