"""Minibatch Adam training on the Bayesian (or baseline) loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabeledSample, augment
from .inference import InferenceConfig, mc_predict
from .loss import LossConfig, NonFiniteError, bayesian_loss, class_weights
from .metrics import evaluate_masks
from .network import BFCDenseNet, save_checkpoint
from .tensor import RngStream, backward, make_adam, set_lr

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 2
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_at: int = 2000
    t_train: int = 10
    dropout_rate: float = 0.4
    bayesian: bool = True
    seed: int = 0
    checkpoint_every: int = 500
    augmentation: bool = True

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(iterations=40000, lr=1e-5, lr_decay_at=10000, checkpoint_every=5000)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.iterations and self.lr_decay_at > self.iterations:
            raise ValueError(f"lr_decay_at={self.lr_decay_at} exceeds iterations={self.iterations}")
        if self.t_train < 1:
            raise ValueError(f"t_train must be >= 1, got {self.t_train}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        return self


PROFILES = {"desk": TrainConfig.desk, "paper": TrainConfig.paper}


@dataclass
class TrainLog:
    iters: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)  # (iteration, mean Dice)

    def record(self, it: int, loss: float, lr: float, seconds: float):
        if self.iters and it <= self.iters[-1]:
            raise ValueError("iteration indices must increase")
        self.iters.append(it)
        self.losses.append(loss)
        self.lrs.append(lr)
        self.seconds.append(seconds)

    def to_csv(self, path) -> None:
        lines = ["iter,loss,lr,seconds"]
        lines += [f"{i},{l:.9g},{r:.9g},{s:.6f}" for i, l, r, s in zip(self.iters, self.losses, self.lrs, self.seconds)]
        Path(path).write_text("\n".join(lines) + "\n")


class TrainingDiverged(FloatingPointError):
    pass


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    return cfg.lr if it < cfg.lr_decay_at else cfg.lr * cfg.lr_decay_factor


class _EpochSampler:
    """Sampling without replacement, reshuffled each epoch from the seed."""

    def __init__(self, n: int, seed: int):
        self.n, self.seed = n, seed
        self.epoch, self.order, self.pos = -1, np.empty(0, dtype=np.int64), 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.epoch += 1
                self.order = RngStream(self.seed, "shuffle", self.epoch).numpy.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def validation_dice(model: BFCDenseNet, samples) -> float:
    """Mean Dice of deterministic (dropout-off, single pass) predictions."""
    if not samples:
        return float("nan")
    images = np.stack([s.image for s in samples])
    out = mc_predict(model, images, InferenceConfig(t=1, bayesian=False))
    return evaluate_masks(out.segmentation, [s.mask for s in samples], model.config.num_classes).mean_dice


def train(model: BFCDenseNet, dataset, val_dataset=None, cfg: TrainConfig | None = None,
          checkpoint_path=None, checkpoint_extra: dict | None = None):
    """Train ``model`` in place; returns ``(model, TrainLog)``.

    Sample order, augmentation, dropout masks and logit perturbations each
    come from their own ``(seed, purpose, iteration)`` stream.
    """
    cfg = (cfg or TrainConfig()).validate()
    log = TrainLog()
    if cfg.iterations == 0:
        return model, log
    samples: list[LabeledSample] = [s[0] if isinstance(s, tuple) else s for s in dataset]
    if not samples:
        raise ValueError("training set is empty")
    val = [s[0] if isinstance(s, tuple) else s for s in (val_dataset or [])]
    num_classes = model.config.num_classes
    loss_cfg = LossConfig(cfg.t_train, cfg.bayesian)
    sampler = _EpochSampler(len(samples), cfg.seed)
    optimizer = make_adam(model.parameters(), cfg.lr)
    extra = dict(checkpoint_extra or {})
    extra.setdefault("train.bayesian", cfg.bayesian)
    start = time.perf_counter()
    model.train()

    for it in range(cfg.iterations):
        batch = []
        for j, idx in enumerate(sampler.take(cfg.batch_size)):
            s = samples[idx]
            if cfg.augmentation:
                s = augment(s, RngStream(cfg.seed, "augment", it * cfg.batch_size + j))
            batch.append(s)
        x = torch.from_numpy(np.stack([s.image for s in batch])[:, None])
        y = torch.from_numpy(np.stack([s.mask for s in batch]))

        lr = lr_schedule(it, cfg)
        set_lr(optimizer, lr)
        optimizer.zero_grad(set_to_none=True)
        z, v = model(x, dropout_enabled=True, rng=RngStream(cfg.seed, "dropout", it),
                     dropout_rate=cfg.dropout_rate)
        beta = class_weights(y, num_classes)
        try:
            loss = bayesian_loss(z, v, y, beta, loss_cfg, RngStream(cfg.seed, "perturb", it))
        except NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}; last good checkpoint kept") from exc
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"iteration {it}: loss is {loss.item()}; last good checkpoint kept")
        backward(loss)
        optimizer.step()
        log.record(it, loss.item(), lr, time.perf_counter() - start)

        done = it + 1
        if (cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or done == cfg.iterations:
            if val:
                log.val_dice.append((done, validation_dice(model, val)))
                logger.info("iter %d loss %.4f val dice %.4f", done, loss.item(), log.val_dice[-1][1])
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, extra)
    model.eval()
    return model, log

