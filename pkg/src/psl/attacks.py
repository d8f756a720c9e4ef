"""L-infinity PGD and the two adaptive evaluations of quantized models.

A step is ``x <- clip(x + alpha * sign(grad), x0 - eps, x0 + eps)``
followed, when ``clamp_to_pixel_range`` is set, by a clip to [0, 1].
Radii are integers in pixel units: the ball has radius ``epsilon_int / 255``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .models import Network, forward
from .tensor import Tensor


def default_alpha(epsilon_int: float) -> float:
    """Step size (eps / 8) * (2 / 255); equals 2/255 at eps = 8."""
    return (epsilon_int / 8) * (2 / 255)


@dataclass(frozen=True)
class AttackConfig:
    epsilon_int: float = 8
    steps: int = 20
    alpha: float | None = None
    random_start: bool = True
    seed: int = 0
    clamp_to_pixel_range: bool = True

    def __post_init__(self):
        if self.epsilon_int < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon_int}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def radius(self) -> float:
        return self.epsilon_int / 255

    @property
    def step_size(self) -> float:
        return default_alpha(self.epsilon_int) if self.alpha is None else self.alpha

    def resolved(self) -> dict:
        d = dict(vars(self))
        d["alpha"] = self.step_size
        return d


@dataclass
class AttackResult:
    adversarial_batch: np.ndarray
    linf_distances: np.ndarray
    loss_trace: list[float]
    success_mask: np.ndarray
    start_loss: float = float("nan")
    final_loss: float = float("nan")

    @property
    def accuracy(self) -> float:
        return 100.0 * float(np.mean(~self.success_mask))


def project(candidate: np.ndarray, center: np.ndarray, radius: float,
            clamp: bool = True) -> np.ndarray:
    """Per-coordinate clip into the L-inf ball, then optionally into [0, 1]."""
    out = np.clip(candidate, center - radius, center + radius)
    return np.clip(out, 0.0, 1.0) if clamp else out


def _loss_and_grad(net, taps, x: np.ndarray, labels) -> tuple[float, np.ndarray]:
    xt = Tensor(x, requires_grad=True)
    logits, _ = forward(net, xt, taps)
    loss = T.softmax_cross_entropy(logits, labels)
    T.backward(loss)
    return loss.item(), xt.grad


def _loss(net, taps, x, labels) -> float:
    with T.no_grad():
        logits, _ = forward(net, x, taps)
        return T.softmax_cross_entropy(logits, labels).item()


def _mispredicted(net, taps, x, labels) -> np.ndarray:
    with T.no_grad():
        logits, _ = forward(net, x, taps)
    return logits.data.argmax(axis=1) != labels


def _run(grad_net, grad_taps, eval_net, eval_taps, batch, labels, cfg: AttackConfig) -> AttackResult:
    x0 = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x0.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {x0.shape[0]}")
    if len(labels) and (labels.min() < 0 or labels.max() >= grad_net.num_classes):
        raise ValueError("labels out of range")

    grad_net = grad_net.frozen()
    radius = cfg.radius
    if cfg.epsilon_int == 0:
        x = x0.copy()
        return AttackResult(x, np.zeros(len(x0)), [], _mispredicted(eval_net, eval_taps, x, labels))

    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        x = x0 + rng.uniform(-radius, radius, size=x0.shape)
        if cfg.clamp_to_pixel_range:
            x = np.clip(x, 0.0, 1.0)
    else:
        x = x0.copy()

    alpha = cfg.step_size
    trace = []
    start_loss = None
    for _ in range(cfg.steps):
        loss, grad = _loss_and_grad(grad_net, grad_taps, x, labels)
        if start_loss is None:
            start_loss = loss
        trace.append(loss)
        x = project(x + alpha * np.sign(grad), x0, radius, cfg.clamp_to_pixel_range)
    final_loss = _loss(grad_net, grad_taps, x, labels)
    dist = np.abs(x - x0).reshape(len(x0), -1).max(axis=1) if len(x0) else np.zeros(0)
    return AttackResult(x, dist, trace, _mispredicted(eval_net, eval_taps, x, labels),
                        start_loss, final_loss)


def pgd(net: Network, taps: Mapping | None, batch, labels, cfg: AttackConfig) -> AttackResult:
    """White-box PGD through ``taps`` exactly as they differentiate."""
    return _run(net, taps, net, taps, batch, labels, cfg)


def bpda_pgd(net: Network, defense_taps: Mapping, batch, labels, cfg: AttackConfig) -> AttackResult:
    """PGD where each defense tap is differentiated as the identity.

    The forward pass still runs the real transform.  Taps without a
    ``backward_approximation`` are differentiated as they are.
    """
    approx = {name: getattr(tap, "backward_approximation", lambda t=tap: t)()
              for name, tap in (defense_taps or {}).items()}
    return _run(net, approx, net, defense_taps, batch, labels, cfg)


def transfer_pgd(base_net: Network, defended_taps: Mapping, batch, labels,
                 cfg: AttackConfig) -> AttackResult:
    """Craft against the bare network, score on the defended one."""
    return _run(base_net, None, base_net, defended_taps, batch, labels, cfg)


def with_defaults(epsilon_int: float, **overrides) -> AttackConfig:
    return replace(AttackConfig(epsilon_int=epsilon_int), **overrides)
