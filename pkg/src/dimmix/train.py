"""Model construction from configs, Adam with cosine decay, training, evaluation and benchmarking."""

from __future__ import annotations

import logging
import math
import time
import tracemalloc
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attention import VisionTransformer
from .block_mlp import BlockMLP, ButterflyLinearMLP, ButterflyMLP, dense_mlp
from .data import (
    Dataset,
    ExperimentConfig,
    append_metrics,
    first_k_per_class,
    load_cifar10,
    load_cifar100,
    resize_bilinear,
    save_checkpoint,
    synthetic_dataset,
)
from .errors import NumericError
from .patch_mixer import MLPMixer, PatchOnlyMixer, PatchSchedule
from .tensor import (
    NARROW,
    WIDE,
    Linear,
    Module,
    Tensor,
    backward,
    cross_entropy,
    make_rng,
    no_grad,
    precision,
    split_rng,
)

log = logging.getLogger(__name__)


class VectorClassifier(Module):
    """Mixer over a flat input followed by a linear read-out."""

    def __init__(self, mixer: Module, dims: int, num_classes: int, rng):
        self.mixer = mixer
        self.head = Linear(dims, num_classes, rng)

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.head(self.mixer(x.reshape(x.shape[0], -1)))

    def num_params(self) -> int:
        return self.mixer.num_params() + self.head.num_params()

    def macs(self, batch: int = 1) -> int:
        return self.mixer.macs(batch) + batch * self.head.weight.size


def dtype_of(cfg: ExperimentConfig):
    return WIDE if cfg.precision == "wide" else NARROW


def build_model(cfg: ExperimentConfig, rng: np.random.Generator) -> Module:
    with precision(dtype_of(cfg)):
        return _build(cfg, rng)


def _build(cfg: ExperimentConfig, rng) -> Module:
    C = cfg.input_channels
    if cfg.family == "mlp":
        N, r = cfg.dims, cfg.radix
        if cfg.mlp_kind == "dense":
            mixer = dense_mlp(N, rng, cfg.expansion)
        elif cfg.mlp_kind == "block":
            mixer = BlockMLP(N, [r, r * cfg.expansion, r], rng)
        elif cfg.mlp_kind == "butterfly_linear":
            mixer = ButterflyLinearMLP(N, r, rng)
        else:
            mixer = ButterflyMLP(N, r, rng, num_layers=cfg.layers, expansion=cfg.expansion)
        return VectorClassifier(mixer, N, cfg.num_classes, rng)
    if cfg.family in ("vit", "butterfly_vit"):
        return VisionTransformer(
            cfg.image_size, C, cfg.patch_size, cfg.dim, cfg.layers, cfg.heads, cfg.num_classes, rng,
            butterfly=cfg.family == "butterfly_vit", block_size=cfg.radix or None, expansion=cfg.expansion,
        )
    if cfg.family == "patch_only":
        sched = PatchSchedule(cfg.image_size, cfg.patch_sizes, C)
        return PatchOnlyMixer(sched, cfg.layers, cfg.num_classes, rng, cfg.expansion)
    return MLPMixer(
        cfg.image_size, C, cfg.patch_size, cfg.channel_dim, cfg.layers, cfg.num_classes, rng,
        cfg.token_mixer, cfg.channel_mixer, cfg.token_radix or None, cfg.channel_radix or None, cfg.expansion,
    )


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset in ("cifar10", "cifar100"):
        loader = load_cifar10 if cfg.dataset == "cifar10" else load_cifar100
        train, test = loader(cfg.data_dir, "train"), loader(cfg.data_dir, "test")
        if cfg.subset_per_class:
            train = first_k_per_class(train, cfg.subset_per_class)
        if cfg.image_size != 32:
            train = Dataset(resize_bilinear(train.images, cfg.image_size), train.labels, "train", train.num_classes)
            test = Dataset(resize_bilinear(test.images, cfg.image_size), test.labels, "test", test.num_classes)
        return train, test
    dims = cfg.image_size if cfg.dataset == "tile_class" else cfg.dims
    block = cfg.radix if cfg.radix > 0 else 8
    train = synthetic_dataset(cfg.dataset, cfg.n_train, dims, cfg.seed, block=block, split="train")
    test = synthetic_dataset(cfg.dataset, cfg.n_test, dims, cfg.seed, block=block, split="test")
    return train, test


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def evaluate(model: Module, ds: Dataset, batch_size: int = 256, dtype=NARROW) -> float:
    if len(ds) == 0:
        return float("nan")
    correct = 0
    with no_grad():
        for s in range(0, len(ds), batch_size):
            x = Tensor(ds.images[s:s + batch_size].astype(dtype))
            pred = model(x).data.argmax(axis=1)
            correct += int((pred == ds.labels[s:s + batch_size]).sum())
    return correct / len(ds)


def train(cfg: ExperimentConfig, out_dir, datasets: tuple[Dataset, Dataset] | None = None) -> dict:
    """Run the configured experiment; writes metrics.csv, final.ckpt and best.ckpt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics_path.unlink()
    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg)
    init_rng, order_rng = split_rng(make_rng(cfg.seed), 2)
    dtype = dtype_of(cfg)
    model = build_model(cfg, init_rng)
    opt = Adam(model.parameters(), cfg.lr)
    steps_per_epoch = max(1, math.ceil(len(train_ds) / cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    ema = None
    best = -1.0
    step = 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(train_ds))
        loss_sum = 0.0
        correct = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = Tensor(train_ds.images[idx].astype(dtype))
            y = train_ds.labels[idx]
            logits = model(x)
            loss = cross_entropy(logits, y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericError(f"non-finite loss {lv} at epoch {epoch}, step {step}")
            ema = lv if ema is None else 0.9 * ema + 0.1 * lv
            if not math.isfinite(ema):
                raise NumericError(f"loss moving average diverged at epoch {epoch}, step {step}")
            opt.zero_grad()
            backward(loss)
            lr = cosine_lr(cfg.lr, step, total) if cfg.cosine else cfg.lr
            opt.step(lr)
            step += 1
            loss_sum += lv * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        test_acc = evaluate(model, test_ds, dtype=dtype)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / max(1, len(train_ds)),
            "train_acc": correct / max(1, len(train_ds)),
            "test_acc": test_acc,
            "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
        }
        append_metrics(metrics_path, row)
        rows.append(row)
        log.info("epoch %d loss %.4f train %.4f test %.4f", epoch, row["train_loss"], row["train_acc"], test_acc)
        if test_acc > best:
            best = test_acc
            save_checkpoint(out / "best.ckpt", model, cfg)
    save_checkpoint(out / "final.ckpt", model, cfg)
    return {"model": model, "rows": rows, "metrics": metrics_path, "best_test_acc": best}


def bench(cfg: ExperimentConfig, steps: int | None = None) -> list[dict]:
    """Per-step training time and peak allocation, dense vs butterfly attention, at matched configs."""
    steps = cfg.bench_steps if steps is None else steps
    rows = []
    for patch in cfg.bench_patch_sizes or (cfg.patch_size,):
        for family in ("vit", "butterfly_vit"):
            c = replace(cfg, family=family, patch_size=patch, radix=0).validate()
            rng = make_rng(c.seed)
            model = build_model(c, rng)
            dtype = dtype_of(c)
            x = rng.uniform(0, 1, (c.batch_size, c.input_channels, c.image_size, c.image_size)).astype(dtype)
            y = rng.integers(0, c.num_classes, c.batch_size)
            opt = Adam(model.parameters(), c.lr)

            def one_step():
                loss = cross_entropy(model(Tensor(x)), y)
                opt.zero_grad()
                backward(loss)
                opt.step()

            one_step()  # warm-up
            t0 = time.perf_counter()
            for _ in range(steps):
                one_step()
            step_ms = 1000.0 * (time.perf_counter() - t0) / max(1, steps)
            tracemalloc.start()
            one_step()
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            rows.append({
                "family": family,
                "patch_size": patch,
                "seq_len": model.seq_len,
                "dim": c.dim,
                "layers": c.layers,
                "params": model.num_params(),
                "attn_score_macs": model.attention_score_macs(c.batch_size),
                "step_ms": round(step_ms, 3),
                "peak_mib": round(peak / 2**20, 3),
            })
    return rows
