"""Tensor primitives used by the network, the loss and MC inference.

Storage and reverse-mode differentiation are delegated to ``torch``; this
module fixes the exact semantics (padding rules, overflow-safe softplus,
inverted dropout with explicit RNG streams, pooling preconditions) and adds
the seed-keyed random streams and the finite-difference gradient checker.
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

SOFTPLUS_THRESHOLD = 20.0


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class RngStream:
    """Deterministic random stream keyed by ``(seed, purpose, index)``.

    Two streams with the same key produce identical draws regardless of how
    many other streams were created or consumed in between, which keeps MC
    passes and training iterations reproducible and order-independent.
    """

    def __init__(self, seed: int, purpose: str = "", index: int = 0):
        self.seed = int(seed)
        self.purpose = purpose
        self.index = int(index)
        seq = np.random.SeedSequence(
            [self.seed % (1 << 63), zlib.crc32(purpose.encode("utf-8")), self.index % (1 << 63)]
        )
        state = seq.generate_state(2, dtype=np.uint64)
        self.numpy = np.random.default_rng(seq)
        self.torch = torch.Generator().manual_seed(int(state[0]) & ((1 << 63) - 1))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, purpose={self.purpose!r}, index={self.index})"


def _check_4d(x: torch.Tensor, name: str):
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-D [N,C,H,W], got shape {tuple(x.shape)}")


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           padding: str = "same") -> torch.Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``kernel`` [Cout,Cin,kH,kW]."""
    _check_4d(x, "input")
    _check_4d(kernel, "kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]} "
            f"(input {tuple(x.shape)}, kernel {tuple(kernel.shape)})"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match Cout={kernel.shape[0]}")
    kh, kw = kernel.shape[2:]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding needs odd kernel dims, got {kh}x{kw}")
        pad = (kh // 2, kw // 2)
    elif padding == "valid":
        if kh > x.shape[2] or kw > x.shape[3]:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {tuple(x.shape[2:])}")
        pad = (0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return F.conv2d(x, kernel, bias, padding=pad)


def softplus(x: torch.Tensor) -> torch.Tensor:
    """ln(1 + e^x); returns x unchanged above the overflow threshold."""
    return F.softplus(x, beta=1.0, threshold=SOFTPLUS_THRESHOLD)


def softmax_channels(z: torch.Tensor) -> torch.Tensor:
    _check_4d(z, "logits")
    if z.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs C >= 2, got {z.shape[1]}")
    return torch.softmax(z, dim=1)


def log_softmax_channels(z: torch.Tensor) -> torch.Tensor:
    _check_4d(z, "logits")
    if z.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs C >= 2, got {z.shape[1]}")
    return torch.log_softmax(z, dim=1)


def dropout(x: torch.Tensor, rate: float, rng: RngStream | None, enabled: bool = True,
            shared: bool = False) -> torch.Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    With ``shared`` one mask over the non-batch axes is broadcast to every
    image, so all images of a pass see the same dropped units.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not enabled or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("an RngStream is required when dropout is enabled")
    shape = (1,) + tuple(x.shape[1:]) if shared else tuple(x.shape)
    # numpy's float32 generator is about twice as fast as torch.rand on CPU
    keep = torch.from_numpy(rng.numpy.random(shape, dtype=np.float32) >= rate)
    return x * (keep.to(x.dtype) * (1.0 / (1.0 - rate)))


def concat_channels(*tensors: torch.Tensor) -> torch.Tensor:
    spatial = {tuple(t.shape[:1]) + tuple(t.shape[2:]) for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"cannot concatenate shapes {[tuple(t.shape) for t in tensors]}")
    return torch.cat(tensors, dim=1)


def avg_pool2(x: torch.Tensor) -> torch.Tensor:
    _check_4d(x, "input")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    return F.avg_pool2d(x, 2)


def nearest_upsample2(x: torch.Tensor) -> torch.Tensor:
    _check_4d(x, "input")
    return x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def make_adam(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_samples: int = 200,
    h: float = 1e-6,
    seed: int = 0,
) -> dict:
    """Compare autograd gradients against central differences on sampled entries.

    ``loss_fn`` must be a deterministic closure: every call rebuilds the loss
    from the current parameter values with identical random draws.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    grads = [p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)

    analytic, numeric = [], []
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = int(flat - offsets[which])
            view = params[which].view(-1)
            orig = view[local].item()
            view[local] = orig + h
            plus = loss_fn().item()
            view[local] = orig - h
            minus = loss_fn().item()
            view[local] = orig
            numeric.append((plus - minus) / (2 * h))
            analytic.append(grads[which].view(-1)[local].item())
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    rel = relative_error(analytic, numeric)
    return {
        "analytic": analytic,
        "numeric": numeric,
        "relative_error": rel,
        "max_relative_error": float(rel.max()) if rel.size else 0.0,
        "indices": picks,
    }
