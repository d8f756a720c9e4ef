"""Filter-norm statistics, pre-activation means and procedural corruptions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetHandle, require_nonempty
from .models import Network, accuracy, forward


# ---------------------------------------------------------------- filter norms


@dataclass(frozen=True)
class LayerNorms:
    layer: str
    count: int
    mean_linf: float
    max_linf: float


@dataclass
class FilterNormReport:
    layers: list[LayerNorms]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "count", "mean_linf", "max_linf"])
        for row in self.layers:
            w.writerow([row.layer, row.count, repr(row.mean_linf), repr(row.max_linf)])
        return buf.getvalue()


def filter_norms(net: Network) -> FilterNormReport:
    """Mean and max of ||w||_inf over every 3x3 kernel slice, per conv layer.

    A layer with C_out x C_in kernels contributes C_out * C_in filters.
    """
    layers = []
    for name, kernel in net.conv_layers():
        norms = np.abs(kernel.data).reshape(-1, 9).max(axis=1)
        layers.append(LayerNorms(name.removesuffix(".weight"), norms.size,
                                 float(norms.mean()), float(norms.max())))
    if not layers:
        raise ValueError("network has no conv layers")
    return FilterNormReport(layers)


# ---------------------------------------------------------------- pre-activation means


@dataclass(frozen=True)
class PreActStats:
    tap: str
    mean: float
    count: int


def preact_mean(net: Network, data: DatasetHandle, tap: str | None = None,
                batch_size: int = 256) -> PreActStats:
    """Mean over every element of feature ``tap`` across ``data``.

    ``tap`` defaults to the network's final pre-activation.  Per-batch sums
    go through ``math.fsum`` so the result does not depend on batching.
    """
    tap = tap or net.pre_final_activation_tap
    require_nonempty(data)
    partials, count = [], 0
    with T.no_grad():
        for x, _ in data.batches(batch_size):
            _, feats = forward(net, x)
            if tap not in feats:
                raise KeyError(f"unknown tap {tap!r}; available features are {sorted(feats)}")
            partials.append(math.fsum(feats[tap].data.ravel()))
            count += feats[tap].size
    return PreActStats(tap, math.fsum(partials) / count, count)


# ---------------------------------------------------------------- corruptions

# One row per kind; column s-1 holds the parameter for severity s.  Severity 0
# is the identity for every kind.
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.16, 0.20),   # noise std
    "impulse_noise": (0.01, 0.02, 0.04, 0.07, 0.10),    # salt-and-pepper fraction
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),            # additive shift
    "contrast": (0.75, 0.6, 0.5, 0.4, 0.3),             # factor about the per-image mean
    "pixelate": (2, 2, 3, 4, 4),                        # block edge in pixels
}
CORRUPTIONS = tuple(SEVERITY_TABLE)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLE:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTIONS}")
        if not (isinstance(self.severity, (int, np.integer)) and 0 <= self.severity <= 5):
            raise ValueError(f"severity must be an integer in 0..5, got {self.severity!r}")

    @property
    def parameter(self) -> float | None:
        return None if self.severity == 0 else SEVERITY_TABLE[self.kind][self.severity - 1]


def pixelate(batch: np.ndarray, block: int) -> np.ndarray:
    """Replace each block x block tile by its mean (edge tiles may be smaller)."""
    block = int(block)
    if block < 1:
        raise ValueError("block must be >= 1")
    if block == 1:
        return batch.copy()
    n, c, h, w = batch.shape
    out = np.empty_like(batch)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = batch[:, :, y:y + block, x:x + block]
            out[:, :, y:y + block, x:x + block] = tile.mean(axis=(2, 3), keepdims=True)
    return out


def corrupt(batch: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size and (batch.min() < 0 or batch.max() > 1):
        raise ValueError("corrupt: batch must lie in [0, 1]")
    p = spec.parameter
    if p is None:
        return batch.copy()
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_noise":
        out = batch + rng.normal(0.0, p, size=batch.shape)
    elif spec.kind == "impulse_noise":
        u = rng.random(batch.shape)
        out = batch.copy()
        out[u < p / 2] = 0.0
        out[(u >= p / 2) & (u < p)] = 1.0
    elif spec.kind == "brightness":
        out = batch + p
    elif spec.kind == "contrast":
        mean = batch.mean(axis=(1, 2, 3), keepdims=True)
        out = (batch - mean) * p + mean
    else:
        out = pixelate(batch, int(p))
    return np.clip(out, 0.0, 1.0)


@dataclass
class CorruptionTable:
    model_keys: list
    specs: list[CorruptionSpec]
    accuracy: np.ndarray  # models x specs

    @property
    def average(self) -> np.ndarray:
        return self.accuracy.mean(axis=1)


def corruption_eval(models: dict, specs: Sequence[CorruptionSpec], data: DatasetHandle,
                    batch_size: int = 256) -> CorruptionTable:
    """Accuracy of each model on each corrupted copy of ``data``."""
    if not models or not specs:
        raise ValueError("corruption_eval needs at least one model and one corruption")
    require_nonempty(data)
    corrupted = [corrupt(data.images, s) for s in specs]
    acc = np.array([[accuracy(net, imgs, data.labels) for imgs in corrupted]
                    for net in models.values()])
    return CorruptionTable(list(models), list(specs), acc)


def default_specs(kinds: Iterable[str] = CORRUPTIONS, severities: Iterable[int] = (1, 2, 3, 4, 5),
                  seed: int = 0) -> list[CorruptionSpec]:
    from .seeding import derive_seed
    return [CorruptionSpec(k, s, derive_seed(seed, "corrupt", k, s)) for k in kinds for s in severities]
