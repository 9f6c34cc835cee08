"""Datasets, experiment configuration, checkpoints and metrics files."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataFormatError
from .tensor import Module, make_rng

# ---- datasets ---------------------------------------------------------------------------

CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W], values in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def parse_cifar_bytes(raw: bytes, label_bytes: int = 1, num_classes: int = 10, name: str = "<bytes>"):
    """Decode CIFAR binary records: label byte(s) then 1024 R, 1024 G, 1024 B bytes, row-major."""
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) % rec:
        whole = len(raw) // rec
        raise DataFormatError(
            f"{name}: length {len(raw)} is not a multiple of the {rec}-byte record; "
            f"expected {whole * rec} or {(whole + 1) * rec} bytes, partial record starts at byte offset {whole * rec}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        k = int(bad[0])
        raise DataFormatError(
            f"{name}: label {labels[k]} at byte offset {k * rec + label_bytes - 1} outside [0, {num_classes})"
        )
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _load_cifar(path, files, label_bytes, num_classes, split) -> Dataset:
    path = Path(path)
    imgs, labs = [], []
    for f in files:
        p = path / f
        if not p.is_file():
            raise FileNotFoundError(f"missing CIFAR batch file {p}")
        im, lb = parse_cifar_bytes(p.read_bytes(), label_bytes, num_classes, str(p))
        imgs.append(im)
        labs.append(lb)
    return Dataset(np.concatenate(imgs), np.concatenate(labs), split, num_classes)


def load_cifar10(path, split: str = "train") -> Dataset:
    files = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
    return _load_cifar(path, files, 1, 10, split)


def load_cifar100(path, split: str = "train") -> Dataset:
    """Binary CIFAR-100: coarse then fine label byte; the fine label is used."""
    return _load_cifar(path, ["train.bin" if split == "train" else "test.bin"], 2, 100, split)


def first_k_per_class(ds: Dataset, k: int) -> Dataset:
    """Deterministic subset: the first ``k`` samples of every class, in file order."""
    keep = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        keep[np.flatnonzero(ds.labels == c)[:k]] = True
    return ds.subset(np.flatnonzero(keep))


def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    """Resize [N, C, H, W] spatially to size x size with linear interpolation."""
    n, c, h, w = images.shape
    if (h, w) == (size, size):
        return images
    out = ndimage.zoom(images, (1, 1, size / h, size / w), order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


SYNTHETIC_TASKS = ("permuted_parity", "block_sum", "tile_class")


_SPLIT_CODES = {"train": 0, "test": 1}


def synthetic_dataset(task: str, n: int, dims: int, seed: int, block: int = 8, split: str = "train") -> Dataset:
    """Seeded desk-scale tasks.

    permuted_parity: one hidden bit per contiguous block of ``block`` dims; every
      dim of the block carries that bit (0.1 or 0.9) through a fixed random
      polarity, plus noise; values stay in [0, 1]. Label = XOR of all block
      bits, so no function that is a sum of per-block terms beats chance.
    block_sum: label = whether the mean of all dims exceeds 0.5 (mixing-free control).
    tile_class: ``dims`` is the image side; label = whether the top-left
      quadrant is brighter than the bottom-right one.
    """
    if task not in SYNTHETIC_TASKS:
        raise ValueError(f"unknown synthetic task {task!r}; expected one of {SYNTHETIC_TASKS}")
    if n < 0 or dims <= 0:
        raise ValueError("n must be >= 0 and dims > 0")
    # task structure depends on the seed only; samples also depend on the split
    structure = make_rng(seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _SPLIT_CODES.get(split, 2)])))
    if task == "permuted_parity":
        if dims % block:
            raise ValueError(f"block {block} does not divide dims {dims}")
        nb = dims // block
        polarity = structure.integers(0, 2, (nb, block))
        bits = rng.integers(0, 2, (n, nb))
        carried = bits[:, :, None] ^ polarity[None]
        x = 0.1 + 0.8 * carried + rng.uniform(-0.1, 0.1, (n, nb, block))
        labels = np.bitwise_xor.reduce(bits, axis=1) if nb else np.zeros(n, dtype=np.int64)
        images = x.reshape(n, 1, 1, dims)
    elif task == "block_sum":
        x = rng.uniform(0, 1, (n, dims))
        labels = (x.mean(axis=1) > 0.5).astype(np.int64)
        images = x.reshape(n, 1, 1, dims)
    else:
        I = dims
        x = rng.uniform(0, 1, (n, 1, I, I))
        h = I // 2
        labels = (x[:, 0, :h, :h].mean(axis=(1, 2)) > x[:, 0, h:, h:].mean(axis=(1, 2))).astype(np.int64)
        images = x
    return Dataset(images.astype(np.float32), np.asarray(labels, dtype=np.int64), split, 2)


# ---- configuration ----------------------------------------------------------------------

FAMILIES = ("mlp", "mixer", "patch_only", "vit", "butterfly_vit")
MLP_KINDS = ("dense", "block", "butterfly_mlp", "butterfly_linear")


@dataclass
class ExperimentConfig:
    """Declarative experiment description; ``key = value`` per line in config files."""

    family: str = "mlp"
    # data
    dataset: str = "permuted_parity"   # permuted_parity | block_sum | tile_class | cifar10 | cifar100
    data_dir: str = ""
    n_train: int = 2000
    n_test: int = 500
    dims: int = 64
    subset_per_class: int = 0
    image_size: int = 32
    num_classes: int = 2
    channels: int = 0                  # 0 infers from the dataset
    # architecture
    mlp_kind: str = "butterfly_mlp"
    layers: int = 2
    radix: int = 8
    expansion: int = 2
    dim: int = 64
    heads: int = 8
    patch_size: int = 4
    patch_sizes: tuple = (5, 7)
    channel_dim: int = 64
    token_radix: int = 0
    channel_radix: int = 0
    token_mixer: str = "dense"
    channel_mixer: str = "dense"
    # optimization
    lr: float = 1e-3
    cosine: bool = True
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    precision: str = "narrow"
    # bench
    bench_steps: int = 50
    bench_patch_sizes: tuple = ()

    def validate(self) -> "ExperimentConfig":
        _check(self.family in FAMILIES, f"family must be one of {FAMILIES}, got {self.family!r}")
        _check(self.precision in ("wide", "narrow"), "precision must be wide or narrow")
        for k in ("n_train", "n_test", "dims", "image_size", "num_classes", "layers", "expansion", "dim",
                  "heads", "patch_size", "channel_dim", "epochs", "batch_size", "bench_steps"):
            v = getattr(self, k)
            _check(v > 0 if k not in ("n_train", "n_test", "epochs") else v >= 0, f"{k} must be positive, got {v}")
        _check(self.lr >= 0, f"lr must be non-negative, got {self.lr}")
        cifar = self.dataset in ("cifar10", "cifar100")
        if cifar:
            _check(bool(self.data_dir), "data_dir is required for CIFAR datasets")
        if self.family == "mlp":
            _check(self.mlp_kind in MLP_KINDS, f"mlp_kind must be one of {MLP_KINDS}")
            _check(not cifar and self.dataset != "tile_class", "family mlp needs a vector dataset")
            if self.mlp_kind != "dense":
                _check(self.dims % self.radix == 0, f"constraint radix | dims violated: radix {self.radix} does not divide dims {self.dims}")
        if self.family in ("vit", "butterfly_vit", "mixer"):
            _check(self.image_size % self.patch_size == 0,
                   f"constraint patch_size | image_size violated: {self.patch_size} does not divide {self.image_size}")
        if self.family in ("vit", "butterfly_vit"):
            _check(self.dim % self.heads == 0, f"constraint heads | dim violated: {self.heads} does not divide {self.dim}")
            for p in self.bench_patch_sizes or (self.patch_size,):
                _check(self.image_size % p == 0, f"constraint patch_size | image_size violated for bench patch {p}")
        if self.family == "butterfly_vit":
            S = (self.image_size // self.patch_size) ** 2
            a = self.radix if self.radix > 0 else math.isqrt(S)
            _check(S % a == 0, f"constraint radix | sequence length violated: radix {a} does not divide {S}")
        if self.family == "patch_only":
            for k in self.patch_sizes:
                _check(self.image_size % k == 0,
                       f"constraint patch size | image_size violated: {k} does not divide {self.image_size}")
        if self.family == "mixer":
            T = (self.image_size // self.patch_size) ** 2
            for kind, width, r, name in ((self.token_mixer, T, self.token_radix, "token"),
                                         (self.channel_mixer, self.channel_dim, self.channel_radix, "channel")):
                _check(kind in ("dense", "butterfly_mlp", "butterfly_linear"), f"{name}_mixer kind {kind!r} unknown")
                if kind != "dense":
                    _check(r > 0 and width % r == 0,
                           f"constraint {name}_radix | {name} width violated: {r} does not divide {width}")
        return self

    @property
    def input_channels(self) -> int:
        if self.channels > 0:
            return self.channels
        if self.dataset in ("cifar10", "cifar100"):
            return 3
        return 1


def _check(ok: bool, msg: str) -> None:
    if not ok:
        raise ConfigError(msg)


def _coerce(name: str, raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    known = {f.name: f for f in fields(ExperimentConfig)}
    updates = {}
    for k, v in items.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        updates[k] = _coerce(k, v, getattr(cfg, k))
    return replace(cfg, **updates).validate()


def parse_config_text(text: str) -> ExperimentConfig:
    items: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v
    return apply_overrides(ExperimentConfig(), items)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---- checkpoints -----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DIMMIXCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """magic | u32 version | u32 count | per tensor: u16 name length, name, u8 dtype, u8 rank, u32 extents, raw LE data."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def decode_checkpoint(raw: bytes) -> dict[str, np.ndarray]:
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a checkpoint: bad magic")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, count = struct.unpack_from("<II", raw, pos)
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        pos += 8
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("utf-8")
            pos += ln
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise DataFormatError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise DataFormatError(f"corrupt checkpoint: {e}") from None
    if pos != len(raw):
        raise DataFormatError(f"corrupt checkpoint: {len(raw) - pos} trailing bytes")
    return out


CONFIG_ENTRY = "__config__"


def save_checkpoint(path, model: Module, cfg: ExperimentConfig | None = None) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    if cfg is not None:
        tensors[CONFIG_ENTRY] = np.frombuffer(config_to_text(cfg).encode(), dtype=np.uint8)
    Path(path).write_bytes(encode_checkpoint(tensors))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], ExperimentConfig | None]:
    tensors = decode_checkpoint(Path(path).read_bytes())
    cfg = None
    if CONFIG_ENTRY in tensors:
        cfg = parse_config_text(tensors.pop(CONFIG_ENTRY).tobytes().decode())
    return tensors, cfg


def load_checkpoint(path, model: Module) -> ExperimentConfig | None:
    """Copy stored tensors into ``model``; names and shapes must match exactly."""
    tensors, cfg = read_checkpoint(path)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(params))[:3]
        raise DataFormatError(f"architecture mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if p.shape != tensors[name].shape:
            raise DataFormatError(f"architecture mismatch at {name}: {tensors[name].shape} vs {p.shape}")
        p.data = tensors[name].astype(p.dtype)
    return cfg


# ---- metrics -----------------------------------------------------------------------------

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "wall_ms"]


def append_metrics(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
