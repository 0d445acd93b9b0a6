"""Datasets, the class-conditional Gaussian generator and the mixed
real/generated epoch sampler."""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FitError, FormatError, ProvenanceError, UnsupportedVersionError, ValidationError
from .numerics import as_tensor

REAL = "real"
GENERATED = "generated"
_PROVENANCE_TAGS = {REAL: 0, GENERATED: 1}


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    provenance: str = REAL
    num_classes: int | None = None

    def __post_init__(self):
        x = as_tensor(self.inputs, "inputs")
        if x.ndim != 2:
            raise ValidationError(f"inputs must be a 2-D array, got shape {x.shape}")
        y = np.asarray(self.labels)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValidationError("labels must be integers")
        y = y.astype(np.int64).reshape(-1)
        if len(y) != len(x):
            raise ValidationError(f"{len(x)} inputs but {len(y)} labels")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValidationError("inputs must lie in [0, 1]")
        if self.provenance not in _PROVENANCE_TAGS:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        nc = self.num_classes if self.num_classes is not None else (int(y.max()) + 1 if y.size else 0)
        if y.size and (y.min() < 0 or y.max() >= nc):
            raise ValidationError(f"labels must lie in [0, {nc})")
        for arr in (x, y):
            arr.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", int(nc))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.provenance, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def concat(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    prov = {d.provenance for d in datasets}
    if len(prov) != 1:
        raise ValidationError("cannot concatenate datasets of different provenance")
    return LabeledDataset(
        np.vstack([d.inputs for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        prov.pop(),
        max(d.num_classes for d in datasets),
    )


# ---------------------------------------------------------------- binary format

DATASET_MAGIC = b"LDST"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIII")  # magic, version, n, dim, num_classes


def dataset_bytes(ds: LabeledDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), ds.dim, ds.num_classes))
    buf.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
    buf.write(struct.pack("<B", _PROVENANCE_TAGS[ds.provenance]))
    return buf.getvalue()


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    if len(data) < _DS_HEADER.size:
        raise FormatError(f"truncated dataset header ({len(data)} of {_DS_HEADER.size} bytes)", len(data))
    magic, version, n, dim, nc = _DS_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}", 4)
    offset = _DS_HEADER.size
    sizes = [("inputs", 8 * n * dim), ("labels", 2 * n), ("provenance", 1)]
    chunks = {}
    for name, size in sizes:
        if offset + size > len(data):
            raise FormatError(f"truncated dataset while reading {name}: need {size} bytes, "
                              f"{len(data) - offset} left", offset)
        chunks[name] = (offset, size)
        offset += size
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes", offset)
    x = np.frombuffer(data, "<f8", n * dim, chunks["inputs"][0]).reshape(n, dim)
    y = np.frombuffer(data, "<u2", n, chunks["labels"][0])
    tag = data[chunks["provenance"][0]]
    prov = {v: k for k, v in _PROVENANCE_TAGS.items()}.get(tag)
    if prov is None:
        raise FormatError(f"unknown provenance tag {tag}", chunks["provenance"][0])
    return LabeledDataset(x.astype(np.float64), y.astype(np.int64), prov, nc)


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def load_csv_dataset(path, provenance: str = REAL, num_classes: int | None = None) -> LabeledDataset:
    """Read ``label,feature_0,...`` rows (header line required)."""
    text = Path(path).read_text()
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows or not rows[0].startswith("label"):
        raise FormatError(f"{path}: expected a 'label,feature_0,...' header", 0)
    table = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]], dtype=np.float64)
    if table.size == 0:
        table = table.reshape(0, len(rows[0].split(",")))
    return LabeledDataset(table[:, 1:], table[:, 0], provenance, num_classes)


# ---------------------------------------------------------------- generator stand-in


@dataclass(frozen=True)
class GeneratorModel:
    """Per-class Gaussian with covariance F Fᵀ + diag(D)."""

    means: np.ndarray      # (classes, dim)
    factors: np.ndarray    # (classes, dim, rank)
    diag: np.ndarray       # (classes, dim)
    floor: float
    class_counts: np.ndarray = field(repr=False)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def covariance(self, c: int) -> np.ndarray:
        f = self.factors[c]
        return f @ f.T + np.diag(self.diag[c])


def fit_generator(train: LabeledDataset, rank: int = 4, floor: float = 1e-4, seed: int = 0) -> GeneratorModel:
    """Fit class means, the top ``rank`` principal factors of each class and a
    diagonal residual variance clamped from below at ``floor``.

    Only datasets of ``real`` provenance are accepted, so no generated sample
    can leak back into the generator.
    """
    if train.provenance != REAL:
        raise ProvenanceError(f"generator must be fitted on real data, got provenance {train.provenance!r}")
    if floor <= 0:
        raise FitError("covariance floor must be positive")
    if rank < 0:
        raise FitError("rank must be non-negative")
    c_total, d = train.num_classes, train.dim
    rank = min(rank, d)
    means = np.zeros((c_total, d))
    factors = np.zeros((c_total, d, rank))
    diag = np.zeros((c_total, d))
    counts = train.class_counts()
    for c in range(c_total):
        xc = train.inputs[train.labels == c]
        if len(xc) < 2:
            raise FitError(f"class {c} has {len(xc)} samples; at least 2 are needed")
        mu = xc.mean(axis=0)
        centered = xc - mu
        var = centered.var(axis=0, ddof=1)
        if rank:
            # principal directions from the SVD of the centered class data
            _, s, vt = np.linalg.svd(centered, full_matrices=False)
            k = min(rank, len(s))
            lam = s[:k] ** 2 / (len(xc) - 1)
            # sign convention: largest-magnitude loading positive, for determinism
            vecs = vt[:k].T
            flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(k)])
            vecs = vecs * np.where(flip == 0, 1.0, flip)
            factors[c, :, :k] = vecs * np.sqrt(lam)
            var = var - np.sum(factors[c] ** 2, axis=1)
        means[c] = mu
        diag[c] = np.maximum(var, floor)
    return GeneratorModel(means, factors, diag, float(floor), counts)


def balanced_counts(total: int, num_classes: int) -> np.ndarray:
    base, extra = divmod(int(total), num_classes)
    return np.array([base + (c < extra) for c in range(num_classes)], dtype=np.int64)


def sample_generator(g: GeneratorModel, n_per_class, seed: int = 0) -> LabeledDataset:
    if np.isscalar(n_per_class):
        counts = np.full(g.num_classes, int(n_per_class), dtype=np.int64)
    else:
        counts = np.asarray(n_per_class, dtype=np.int64)
    if counts.shape != (g.num_classes,) or np.any(counts < 0):
        raise ValidationError("n_per_class must be non-negative, one count per class")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    rank = g.factors.shape[2]
    for c, n in enumerate(counts):
        if n == 0:
            continue
        z = rng.standard_normal((n, rank))
        e = rng.standard_normal((n, g.dim))
        x = g.means[c] + z @ g.factors[c].T + e * np.sqrt(g.diag[c])
        xs.append(np.clip(x, 0.0, 1.0))
        ys.append(np.full(n, c, dtype=np.int64))
    if not xs:
        return LabeledDataset(np.zeros((0, g.dim)), np.zeros(0, dtype=np.int64), GENERATED, g.num_classes)
    return LabeledDataset(np.vstack(xs), np.concatenate(ys), GENERATED, g.num_classes)


# ---------------------------------------------------------------- mixed sampling


def round_half_up(x: float) -> int:
    # tolerate float noise such as 0.7 * 50000 = 35000.000000000004
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class MixedDataConfig:
    real: LabeledDataset
    generated: LabeledDataset | None
    ratio: float = 0.7
    epoch_size: int | None = None
    batch_size: int = 128
    seed: int = 0
    # False: walk through the generated pool across epochs without repeats
    replacement_across_epochs: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.real.provenance != REAL:
            raise ProvenanceError("the real split must have real provenance")
        if self.generated is not None and self.generated.provenance != GENERATED:
            raise ProvenanceError("the generated pool must have generated provenance")
        if self.epoch_size is None:
            object.__setattr__(self, "epoch_size", len(self.real))
        if self.epoch_size < 1 or self.batch_size < 1:
            raise ConfigError("epoch_size and batch_size must be positive")
        need = self.generated_count
        have = 0 if self.generated is None else len(self.generated)
        if need > have:
            raise ConfigError(f"generated pool too small: {need} samples needed per epoch, pool has {have}")
        if need < self.epoch_size and len(self.real) == 0:
            raise ConfigError("real split is empty but the ratio requires real samples")

    @property
    def generated_count(self) -> int:
        return round_half_up(self.ratio * self.epoch_size)

    @property
    def real_count(self) -> int:
        return self.epoch_size - self.generated_count


def batch_generated_counts(ratio: float, epoch_size: int, batch_size: int) -> list[int]:
    """Generated samples per batch.

    Cumulative rounding: after n samples, round(ratio * n) of them are
    generated. Each full batch gets floor or ceil of ratio * B (exactly
    round(ratio * B) when that is integral) and the epoch total is exactly
    round(ratio * epoch_size).
    """
    counts, prev, done = [], 0, 0
    while done < epoch_size:
        done = min(done + batch_size, epoch_size)
        cum = round_half_up(ratio * done)
        counts.append(cum - prev)
        prev = cum
    return counts


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    generated: np.ndarray  # bool mask
    source_index: np.ndarray  # row index into the real or generated dataset


def _draw(rng, pool: int, count: int) -> np.ndarray:
    """``count`` indices into a pool, without repeats while the pool lasts."""
    if count <= pool:
        return rng.permutation(pool)[:count]
    reps = -(-count // pool)
    return np.concatenate([rng.permutation(pool) for _ in range(reps)])[:count]


def mixed_epoch(cfg: MixedDataConfig, epoch_index: int) -> list[Batch]:
    rng = np.random.default_rng([cfg.seed, epoch_index])
    n_gen = cfg.generated_count
    n_real = cfg.real_count
    if n_gen and cfg.replacement_across_epochs:
        gen_idx = rng.permutation(len(cfg.generated))[:n_gen]
    elif n_gen:
        order = np.random.default_rng([cfg.seed, 0x9E3779B9]).permutation(len(cfg.generated))
        start = (epoch_index * n_gen) % len(order)
        gen_idx = np.take(order, np.arange(start, start + n_gen), mode="wrap")
    else:
        gen_idx = np.zeros(0, dtype=np.int64)
    real_idx = _draw(rng, len(cfg.real), n_real) if n_real else np.zeros(0, dtype=np.int64)

    batches = []
    gi = ri = 0
    per_batch = batch_generated_counts(cfg.ratio, cfg.epoch_size, cfg.batch_size)
    for b, g_count in enumerate(per_batch):
        size = min(cfg.batch_size, cfg.epoch_size - b * cfg.batch_size)
        r_count = size - g_count
        gsel = gen_idx[gi : gi + g_count]
        rsel = real_idx[ri : ri + r_count]
        gi += g_count
        ri += r_count
        parts_x = [cfg.real.inputs[rsel]]
        parts_y = [cfg.real.labels[rsel]]
        if g_count:
            parts_x.append(cfg.generated.inputs[gsel])
            parts_y.append(cfg.generated.labels[gsel])
        x = np.vstack(parts_x)
        y = np.concatenate(parts_y)
        is_gen = np.concatenate([np.zeros(r_count, bool), np.ones(g_count, bool)])
        src = np.concatenate([rsel, gsel]).astype(np.int64)
        perm = rng.permutation(size)
        batches.append(Batch(x[perm], y[perm], is_gen[perm], src[perm]))
    return batches
