"""PGD adversarial training, the epsilon spectrum and overdesign selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd
from .data import DatasetHandle, require_nonempty, split_validation
from .models import Network, accuracy, build, forward, predict
from .seeding import derive_seed

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epsilon_int: float = 0
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    decay_epochs: tuple[int, ...] = (10, 13)
    decay_factor: float = 0.1
    attack_steps: int = 7
    attack_alpha: float | None = None
    random_start: bool = True
    clamp_to_pixel_range: bool = True
    val_fraction: float = 0.1
    val_attack_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.epsilon_int < 0:
            raise ValueError("epsilon must be nonnegative")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be increasing")

    def inner_attack(self, seed: int) -> AttackConfig:
        return AttackConfig(epsilon_int=self.epsilon_int, steps=self.attack_steps,
                            alpha=self.attack_alpha, random_start=self.random_start,
                            seed=seed, clamp_to_pixel_range=self.clamp_to_pixel_range)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr * self.decay_factor ** sum(epoch >= d for d in self.decay_epochs)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_robust_err: float


@dataclass
class TrainResult:
    net: Network
    history: list[EpochMetrics]
    best_epoch: int


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch convention)."""

    def __init__(self, params: Sequence[T.Tensor], momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


def robust_error(net: Network, data: DatasetHandle, cfg: AttackConfig, batch_size: int = 200,
                 taps=None) -> float:
    """100 - accuracy under ``pgd`` with one derived seed per batch."""
    require_nonempty(data)
    wrong = 0
    for i, (x, y) in enumerate(data.batches(batch_size)):
        res = pgd(net, taps, x, y, replace(cfg, seed=derive_seed(cfg.seed, "batch", i)))
        wrong += int(res.success_mask.sum())
    return 100.0 * wrong / len(data)


def adversarial_train(net: Network, data: DatasetHandle, cfg: TrainConfig) -> TrainResult:
    """Min-max training: replace each batch by its PGD counterpart, then step.

    The parameters of the epoch with the lowest robust validation error
    (PGD at the training epsilon on a seeded 10% hold-out) are restored at
    the end.
    """
    require_nonempty(data)
    net = net.copy()
    train, val = split_validation(data, cfg.val_fraction, derive_seed(cfg.seed, "val-split"))
    if len(val) == 0:
        val = train
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "order"))
    opt = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
    val_attack = replace(cfg.inner_attack(derive_seed(cfg.seed, "val-attack")),
                         steps=cfg.val_attack_steps)

    history: list[EpochMetrics] = []
    best = (math.inf, -1, None)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(len(train))
        tot_loss, tot_correct = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = train.images[idx], train.labels[idx]
            if cfg.epsilon_int > 0:
                x = pgd(net, None, x, y, cfg.inner_attack(derive_seed(cfg.seed, "inner", step))
                        ).adversarial_batch
            opt.zero_grad()
            logits, _ = forward(net, x)
            loss = T.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch})")
            T.backward(loss)
            opt.step(lr)
            tot_loss += loss.item() * len(idx)
            tot_correct += int((logits.data.argmax(axis=1) == y).sum())
            step += 1
        if cfg.epsilon_int > 0:
            verr = robust_error(net, val, val_attack)
        else:
            verr = 100.0 - accuracy(net, val.images, val.labels)
        history.append(EpochMetrics(epoch, lr, tot_loss / len(train),
                                    100.0 * tot_correct / len(train), verr))
        log.debug("eps=%s epoch=%d loss=%.4f val_err=%.2f", cfg.epsilon_int, epoch,
                  tot_loss / len(train), verr)
        if verr < best[0]:
            best = (verr, epoch, {k: v.data.copy() for k, v in net.params.items()})

    for k, v in best[2].items():
        net.params[k].data = v
    net.metadata.update({"epsilon": cfg.epsilon_int, "epoch": best[1], "seed": cfg.seed,
                         "best_checkpoint_criterion": "min robust validation error at training epsilon"})
    return TrainResult(net, history, best[1])


def train_spectrum(epsilons: Sequence[float], base_cfg: TrainConfig, data: DatasetHandle,
                   arch: str = "tiny_cnn", activation: str = "relu", width: int = 8,
                   jobs: int = 1) -> dict[float, TrainResult]:
    """One adversarially trained model per epsilon.

    Job seeds come from ``derive_seed(base_seed, "eps", eps)``; the same
    seed initialises the network and drives its training.
    """
    eps_list = list(epsilons)
    if not eps_list or any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError(f"epsilons must be non-empty and strictly increasing, got {eps_list}")
    job_args = [(eps, base_cfg, data, arch, activation, width) for eps in eps_list]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_spectrum_job, job_args))
    else:
        results = [_spectrum_job(a) for a in job_args]
    return dict(zip(eps_list, results))


def _spectrum_job(args) -> TrainResult:
    eps, base_cfg, data, arch, activation, width = args
    seed = derive_seed(base_cfg.seed, "eps", eps)
    cfg = replace(base_cfg, epsilon_int=eps, seed=seed)
    net = build(arch, data.num_classes, activation, seed, data.images.shape[1], width)
    return adversarial_train(net, data, cfg)


# ---------------------------------------------------------------- grid + selection


@dataclass
class RobustnessGrid:
    model_epsilons: list[float]
    attack_deltas: list[float]
    errors: np.ndarray
    clean_errors: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if self.errors.shape != (len(self.model_epsilons), len(self.attack_deltas)):
            raise ValueError(f"errors shape {self.errors.shape} does not match "
                             f"{len(self.model_epsilons)} models x {len(self.attack_deltas)} deltas")
        if np.any((self.errors < 0) | (self.errors > 100)):
            raise ValueError("errors must lie in [0, 100]")

    def row(self, delta: float) -> np.ndarray:
        """Errors of every model at attack strength ``delta``."""
        if delta not in self.attack_deltas:
            raise KeyError(f"delta {delta} not in grid deltas {self.attack_deltas}")
        return self.errors[:, self.attack_deltas.index(delta)]


def attack_config_for(delta: float, steps: int, seed: int) -> AttackConfig:
    return AttackConfig(epsilon_int=delta, steps=steps, seed=seed)


def eval_grid(models: dict[float, Network], deltas: Sequence[float], test: DatasetHandle,
              attack_steps: int = 20, seed: int = 0, jobs: int = 1) -> RobustnessGrid:
    """errors[i, j] = 100 - accuracy of model i under PGD_{delta_j}-``attack_steps``."""
    if not models or not deltas:
        raise ValueError("eval_grid needs at least one model and one delta")
    require_nonempty(test)
    eps_list = list(models)
    cells = [(models[e], attack_config_for(d, attack_steps, derive_seed(seed, "grid", e, d)), test)
             for e in eps_list for d in deltas]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_grid_cell, cells))
    else:
        values = [_grid_cell(c) for c in cells]
    errors = np.array(values).reshape(len(eps_list), len(deltas))
    # same count-based formula as robust_error so the delta=0 column matches exactly
    clean = [100.0 * int(np.sum(predict(models[e], test.images) != test.labels)) / len(test)
             for e in eps_list]
    return RobustnessGrid(eps_list, list(deltas), errors, clean)


def _grid_cell(args) -> float:
    net, cfg, test = args
    return robust_error(net, test, cfg)


@dataclass(frozen=True)
class OverdesignChoice:
    delta: float
    epsilon_star: float
    selection_mode: str


def select_overdesign(grid: RobustnessGrid, delta: float, mode: str = "grid_argmin") -> OverdesignChoice:
    """Pick the model epsilon to deploy against attacks of strength ``delta``.

    ``grid_argmin``: smallest epsilon attaining the row minimum.
    ``early_stop``: starting at the smallest epsilon above ``delta``, walk
    upward and stop before the first strict increase in error.
    """
    row = grid.row(delta)
    eps = grid.model_epsilons
    if row.size == 0:
        raise ValueError("empty grid row")
    if mode == "grid_argmin":
        return OverdesignChoice(delta, eps[int(np.argmin(row))], mode)
    if mode == "early_stop":
        above = [i for i, e in enumerate(eps) if e > delta]
        if not above:
            raise ValueError(f"no model epsilon above delta={delta}")
        i = above[0]
        while i + 1 < len(eps) and not row[i + 1] > row[i]:
            i += 1
        return OverdesignChoice(delta, eps[i], mode)
    raise ValueError(f"unknown selection mode {mode!r}")
