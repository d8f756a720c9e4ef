"""Scaled-floor quantization of intermediate features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_BETA = 8.0
BETA_SWEEP = (4.0, 6.0, 8.0, 10.0, 12.0)


def quantize(x, beta: float):
    """Elementwise ``floor(beta * x) / beta``.

    Accepts a ``Tensor`` (returns a recorded ``Tensor`` with identity
    backward) or an array-like (returns an ndarray).
    """
    if not beta > 0:
        raise ValueError(f"quantize: beta must be positive, got {beta}")
    if isinstance(x, Tensor):
        return T.floor_scale(x, beta, backward="identity")
    return np.floor(beta * np.asarray(x, dtype=np.float64)) / beta


@dataclass(frozen=True)
class QuantTap:
    """A feature transform that quantizes the output of ``tap_point``.

    Called directly it is the defense as deployed: the floor has zero
    derivative, so gradients do not flow through it.  ``backward_approximation``
    gives the BPDA version whose backward pass is the identity.
    """

    beta: float = DEFAULT_BETA
    tap_point: str = "conv0"
    backward_mode: str = "identity"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"QuantTap: beta must be positive, got {self.beta}")
        if self.backward_mode != "identity":
            raise ValueError(f"QuantTap: unsupported backward mode {self.backward_mode!r}")

    def __call__(self, x: Tensor) -> Tensor:
        return T.floor_scale(x, self.beta, backward="exact")

    def backward_approximation(self):
        beta = self.beta
        return lambda x: T.floor_scale(x, beta, backward="identity")


def as_tap(beta: float = DEFAULT_BETA, tap_point: str = "conv0") -> dict[str, QuantTap]:
    """Tap map usable by ``models.forward`` and the attacks."""
    return {tap_point: QuantTap(beta, tap_point)}


def identity(x: Tensor) -> Tensor:
    return x
