"""Class-weighted Monte-Carlo Bayesian segmentation loss and its non-Bayesian baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .tensor import RngStream, ShapeError, log_softmax_channels


_SQRT_FLOOR = 1e-30


class NonFiniteError(FloatingPointError):
    """Network outputs contain NaN or Inf."""


@dataclass
class LossConfig:
    t_train: int = 10
    bayesian: bool = True

    def __post_init__(self):
        if self.t_train < 1:
            raise ValueError(f"t_train must be >= 1, got {self.t_train}")


def _as_labels(Y) -> torch.Tensor:
    if isinstance(Y, np.ndarray):
        Y = torch.from_numpy(Y)
    if Y.dtype.is_floating_point:
        raise TypeError(f"label mask must hold integers, got {Y.dtype}")
    return Y.long()


def class_weights(Y, num_classes: int) -> torch.Tensor:
    """beta_c = 1/|Y_c| over the whole minibatch; 0 for classes absent from it."""
    Y = _as_labels(Y)
    if Y.numel() and (int(Y.min()) < 0 or int(Y.max()) >= num_classes):
        raise ValueError(
            f"labels must lie in 0..{num_classes - 1}, found range {int(Y.min())}..{int(Y.max())}"
        )
    counts = torch.bincount(Y.reshape(-1), minlength=num_classes).double()
    beta = torch.zeros(num_classes, dtype=torch.float64)
    present = counts > 0
    beta[present] = 1.0 / counts[present]
    return beta


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # softplus can underflow to exactly 0 in float32, where d sqrt/dv is infinite
    return torch.sqrt(torch.clamp(v, min=_SQRT_FLOOR)) * (v > 0).to(v.dtype)


def perturb_logits(z: torch.Tensor, v: torch.Tensor, rng: RngStream) -> torch.Tensor:
    """Reparameterised draw z + sqrt(v) * eta, eta ~ N(0, 1) per pixel and class."""
    if v.dim() != 4 or v.shape[1] != 1 or v.shape[0] != z.shape[0] or v.shape[2:] != z.shape[2:]:
        raise ShapeError(f"variance shape {tuple(v.shape)} incompatible with logits {tuple(z.shape)}")
    if bool((v < 0).any()):
        raise ValueError(f"variance must be nonnegative, min is {float(v.min())}")
    eta = torch.randn(z.shape, generator=rng.torch, dtype=z.dtype)
    return z + _safe_sqrt(v) * eta


def _check_finite(name: str, t: torch.Tensor):
    if not bool(torch.isfinite(t).all()):
        bad = int((~torch.isfinite(t)).sum())
        raise NonFiniteError(f"{name} has {bad} non-finite entries out of {t.numel()}")


def _weighted_nll(z: torch.Tensor, Y: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    logp = log_softmax_channels(z)
    true_logp = logp.gather(1, Y.unsqueeze(1)).squeeze(1)
    # per-sample term kept at storage precision: the float64 mean over identical float32 terms is exact
    return -(beta[Y] * true_logp.double()).sum().to(z.dtype)


def bayesian_loss(z: torch.Tensor, v: torch.Tensor | None, Y, beta: torch.Tensor,
                  cfg: LossConfig, rng: RngStream | None = None) -> torch.Tensor:
    """Mean over ``cfg.t_train`` perturbed logit draws of the beta-weighted negative log-likelihood.

    With ``cfg.bayesian`` false this is the class-weighted cross entropy on ``z``
    (one sample, zero variance) and ``v`` / ``rng`` are ignored.
    """
    Y = _as_labels(Y)
    if z.dim() != 4 or Y.shape != (z.shape[0],) + tuple(z.shape[2:]):
        raise ShapeError(f"labels {tuple(Y.shape)} do not match logits {tuple(z.shape)}")
    if beta.shape != (z.shape[1],):
        raise ShapeError(f"class weights {tuple(beta.shape)} do not match C={z.shape[1]}")
    _check_finite("logits z", z)
    if not cfg.bayesian:
        return _weighted_nll(z, Y, beta).double()
    if v is None or rng is None:
        raise ValueError("the Bayesian loss needs the variance map and an RngStream")
    _check_finite("variance v", v)
    total = torch.zeros((), dtype=torch.float64)
    for _ in range(cfg.t_train):
        total = total + _weighted_nll(perturb_logits(z, v, rng), Y, beta).double()
    return total / cfg.t_train
