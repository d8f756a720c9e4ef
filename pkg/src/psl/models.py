"""Small convolutional classifiers with named blocks and feature taps.

Two desk-scale architectures are provided:

* ``tiny_cnn``: conv0 -> block1 -> block2 -> pool -> head
* ``mini_resnet``: conv0 -> residual block1 -> residual block2 -> pool -> head

Every conv block is conv3x3 -> per-channel affine -> activation.  A
residual block computes ``act(x + affine(conv(act(affine(conv(x))))))``.
Taps intercept the (post-activation) output of conv0, block1 and block2.

Mapping onto the reference ResNet18 labels: conv0 <-> conv0,
block1 <-> layer1, block2 <-> layer2..layer4 collapsed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

TAP_POINTS = ("conv0", "block1", "block2")
ARCHS = ("tiny_cnn", "mini_resnet")
ACTIVATIONS = ("relu", "swish")

INPUT_CENTER = 0.5

MAGIC = b"PSL1"
FORMAT_VERSION = 1

FeatureTransform = Callable[[Tensor], Tensor]


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str  # conv | residual_conv | pool | dense
    channels_in: int
    channels_out: int
    activation: str = "none"


@dataclass
class Network:
    arch: str
    blocks: list[BlockSpec]
    params: dict[str, Tensor]
    activation: str
    num_classes: int
    in_channels: int
    tap_points: tuple[str, ...] = TAP_POINTS
    pre_final_activation_tap: str = "block2.preact"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in {names}")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.channels_out != nxt.channels_in:
                raise ValueError(f"channel mismatch between {prev.name} and {nxt.name}")
        for tap in self.tap_points:
            if tap not in names:
                raise ValueError(f"tap point {tap!r} names no block")

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def conv_layers(self) -> list[tuple[str, Tensor]]:
        """Conv kernels in declaration order."""
        return [(k, v) for k, v in self.params.items() if v.data.ndim == 4]

    def topology(self) -> dict:
        return {
            "arch": self.arch,
            "activation": self.activation,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "blocks": [vars(b) for b in self.blocks],
            "tap_points": list(self.tap_points),
            "pre_final_activation_tap": self.pre_final_activation_tap,
        }

    def frozen(self) -> "Network":
        """A view sharing parameter data but excluded from gradient tracking."""
        params = {k: Tensor(v.data) for k, v in self.params.items()}
        for k, v in params.items():
            v.data = self.params[k].data
        return Network(self.arch, self.blocks, params, self.activation, self.num_classes,
                       self.in_channels, self.tap_points, self.pre_final_activation_tap,
                       self.metadata)

    def copy(self) -> "Network":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return Network(self.arch, list(self.blocks), params, self.activation,
                       self.num_classes, self.in_channels, self.tap_points,
                       self.pre_final_activation_tap, dict(self.metadata))


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build(arch: str = "tiny_cnn", num_classes: int = 2, activation: str = "relu",
          seed: int = 0, in_channels: int = 3, width: int = 8) -> Network:
    """Deterministically initialise a network from ``seed``."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")

    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name, c_in, c_out):
        params[f"{name}.weight"] = Tensor(_he(rng, (c_out, c_in, 3, 3), c_in * 9), requires_grad=True)
        params[f"{name}.scale"] = Tensor(np.ones(c_out), requires_grad=True)
        params[f"{name}.shift"] = Tensor(np.zeros(c_out), requires_grad=True)

    if arch == "tiny_cnn":
        c1, c2 = width, 2 * width
        conv("conv0", in_channels, c1)
        conv("block1", c1, c1)
        conv("block2", c1, c2)
        blocks = [
            BlockSpec("conv0", "conv", in_channels, c1, activation),
            BlockSpec("block1", "conv", c1, c1, activation),
            BlockSpec("block2", "conv", c1, c2, activation),
        ]
        feat = c2
    else:
        c1 = width
        conv("conv0", in_channels, c1)
        for name in ("block1", "block2"):
            conv(f"{name}.conv1", c1, c1)
            conv(f"{name}.conv2", c1, c1)
        blocks = [
            BlockSpec("conv0", "conv", in_channels, c1, activation),
            BlockSpec("block1", "residual_conv", c1, c1, activation),
            BlockSpec("block2", "residual_conv", c1, c1, activation),
        ]
        feat = c1
    blocks += [BlockSpec("pool", "pool", feat, feat), BlockSpec("head", "dense", feat, num_classes)]
    params["head.weight"] = Tensor(_he(rng, (num_classes, feat), feat) * 0.5, requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(num_classes), requires_grad=True)
    return Network(arch, blocks, params, activation, num_classes, in_channels)


def _conv_unit(net: Network, name: str, x: Tensor) -> Tensor:
    p = net.params
    y = T.conv2d(x, p[f"{name}.weight"])
    return T.affine(y, p[f"{name}.scale"], p[f"{name}.shift"])


def forward(net: Network, batch: Tensor | np.ndarray,
            taps: Mapping[str, FeatureTransform] | None = None
            ) -> tuple[Tensor, dict[str, Tensor]]:
    """Run ``net`` on ``batch`` (N x C x H x W).

    Each tap transform replaces its block's output before the next block
    sees it.  The returned feature map holds the *raw* block outputs plus
    the pre-activation of the final activation under
    ``net.pre_final_activation_tap``.
    """
    taps = dict(taps or {})
    for name in taps:
        if name not in net.tap_points:
            raise KeyError(f"unknown tap {name!r}; declared tap points are {list(net.tap_points)}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.shape[1] != net.in_channels:
        raise T.ShapeError(f"forward: expected N x {net.in_channels} x H x W batch, got {x.shape}")

    # fixed centering of [0, 1] pixels; not a learnable layer
    x = T.add(x, Tensor(-INPUT_CENTER))
    features: dict[str, Tensor] = {}
    for block in net.blocks:
        if block.kind == "conv":
            pre = _conv_unit(net, block.name, x)
            x = T.activation(pre, block.activation)
        elif block.kind == "residual_conv":
            h = T.activation(_conv_unit(net, f"{block.name}.conv1", x), block.activation)
            pre = T.add(x, _conv_unit(net, f"{block.name}.conv2", h))
            x = T.activation(pre, block.activation)
        elif block.kind == "pool":
            x = T.global_avg_pool(x)
            continue
        elif block.kind == "dense":
            x = T.dense(x, net.params[f"{block.name}.weight"], net.params[f"{block.name}.bias"])
            continue
        features[f"{block.name}.preact"] = pre
        features[block.name] = x
        if block.name in taps:
            x = taps[block.name](x)
    return x, features


def predict(net: Network, images: np.ndarray, taps=None, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = forward(net, images[i:i + batch_size], taps)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray, taps=None) -> float:
    """Percentage of correctly classified examples."""
    if len(labels) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return 100.0 * float(np.mean(predict(net, images, taps) == labels))


# ---------------------------------------------------------------- checkpoints


def save(net: Network, path: str | Path, metadata: Mapping | None = None) -> None:
    """Write ``net`` as: magic, u64 header length, JSON header, f64 LE payloads."""
    meta = dict(net.metadata)
    meta.update(metadata or {})
    directory, offset, payloads = [], 0, []
    for name in sorted(net.params):
        arr = np.ascontiguousarray(net.params[name].data, dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": arr.nbytes})
        offset += arr.nbytes
        payloads.append(arr.tobytes())
    header = json.dumps({"format_version": FORMAT_VERSION, "topology": net.topology(),
                         "metadata": meta, "tensors": directory}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def load(path: str | Path, expect_topology: Mapping | None = None) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header length field at offset 4 (file is {len(raw)} bytes)")
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: header claims {hlen} bytes at offset 12 but only "
                              f"{len(raw) - 12} remain")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset 12: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    topo = header["topology"]
    if expect_topology is not None and dict(expect_topology) != topo:
        raise CheckpointError(f"{path}: topology mismatch")

    base = 12 + hlen
    params = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != 8 * count:
            raise CheckpointError(f"{path}: tensor {entry['name']} length field {entry['nbytes']} "
                                  f"does not match shape {entry['shape']}")
        if start + entry["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} truncated at offset {len(raw)} "
                                  f"(needs bytes {start}..{start + entry['nbytes']})")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(entry["shape"])
        params[entry["name"]] = Tensor(arr.astype(np.float64), requires_grad=True)

    blocks = [BlockSpec(**b) for b in topo["blocks"]]
    # restore declaration order so conv layers enumerate as built
    ref = build(topo["arch"], topo["num_classes"], topo["activation"], 0, topo["in_channels"],
                width=blocks[0].channels_out)
    if set(ref.params) != set(params):
        raise CheckpointError(f"{path}: parameter set does not match topology {topo['arch']}")
    for k, v in ref.params.items():
        if params[k].shape != v.shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {params[k].shape}, topology expects {v.shape}")
    params = {k: params[k] for k in ref.params}
    return Network(topo["arch"], blocks, params, topo["activation"], topo["num_classes"],
                   topo["in_channels"], tuple(topo["tap_points"]),
                   topo["pre_final_activation_tap"], header.get("metadata", {}))
