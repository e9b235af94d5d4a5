"""Finite-difference verification of the autograd path, op by op and end to end."""

from __future__ import annotations

import numpy as np
import torch

from .data import generate_synthetic
from .loss import LossConfig, bayesian_loss, class_weights
from .network import NetworkConfig, build
from .tensor import (
    RngStream,
    avg_pool2,
    concat_channels,
    conv2d,
    dropout,
    finite_difference_check,
    nearest_upsample2,
    softmax_channels,
    softplus,
)


def network_loss_check(config: NetworkConfig | None = None, size: int = 16, n_params: int = 200,
                       seed: int = 0, t_train: int = 10, h: float = 1e-6) -> dict:
    """Central differences of the Bayesian loss of a full network, in float64.

    Dropout masks and logit perturbations are redrawn from the same streams on
    every evaluation, so the loss is a deterministic function of the weights.
    """
    config = config or NetworkConfig()
    model = build(config, seed=seed).double()
    sample, _ = generate_synthetic(1, size, size, config.num_classes, seed=seed)[0]
    x = torch.from_numpy(sample.image[None, None].astype(np.float64))
    y = torch.from_numpy(sample.mask[None])
    beta = class_weights(y, config.num_classes)
    loss_cfg = LossConfig(t_train=t_train, bayesian=True)

    def loss_fn():
        z, v = model(x, dropout_enabled=True, rng=RngStream(seed, "gradcheck-dropout"))
        return bayesian_loss(z, v, y, beta, loss_cfg, RngStream(seed, "gradcheck-perturb"))

    return finite_difference_check(loss_fn, list(model.parameters()), n_samples=n_params, h=h, seed=seed)


def _op_cases(seed: int):
    gen = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(shape, generator=gen, dtype=torch.float64, requires_grad=True)

    weights = {}

    def weighted(name, out):
        if name not in weights:
            weights[name] = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed + 1),
                                        dtype=torch.float64)
        return (out * weights[name]).sum()

    x, k, b = rand(2, 3, 6, 6), rand(4, 3, 3, 3), rand(4)
    yield "conv2d", [x, k, b], lambda: weighted("conv2d", conv2d(x, k, b, padding="same"))
    s = rand(3, 5)
    yield "softplus", [s], lambda: weighted("softplus", softplus(s * 3))
    z = rand(2, 4, 3, 3)
    yield "softmax_channels", [z], lambda: weighted("softmax", softmax_channels(z))
    d = rand(2, 3, 4, 4)
    yield "dropout", [d], lambda: weighted("dropout", dropout(d, 0.4, RngStream(seed, "op-dropout")))
    p = rand(1, 2, 4, 4)
    yield "avg_pool2", [p], lambda: weighted("pool", avg_pool2(p))
    u = rand(1, 2, 3, 3)
    yield "nearest_upsample2", [u], lambda: weighted("up", nearest_upsample2(u))
    a, c = rand(1, 2, 3, 3), rand(1, 1, 3, 3)
    yield "concat_channels", [a, c], lambda: weighted("cat", concat_channels(a, c))


def run_suite(seed: int = 0, n_params: int = 200, size: int = 16) -> dict[str, float]:
    """Max relative error per check (ops plus the full network loss)."""
    results = {}
    for name, params, fn in _op_cases(seed):
        report = finite_difference_check(fn, params, n_samples=64, h=1e-6, seed=seed)
        results[name] = report["max_relative_error"]
    results["bfcdn_bayesian_loss"] = network_loss_check(size=size, n_params=n_params, seed=seed)["max_relative_error"]
    return results
