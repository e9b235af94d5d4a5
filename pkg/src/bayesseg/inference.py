"""MC-dropout predictive inference and per-pixel uncertainty maps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .loss import NonFiniteError
from .tensor import RngStream, softmax_channels


@dataclass
class InferenceConfig:
    t: int = 50
    dropout_rate: float = 0.4
    bayesian: bool = True

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"number of MC passes must be >= 1, got {self.t}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class PredictiveOutput:
    """Batched predictive fields; leading axis indexes images."""

    mean_probs: np.ndarray  # [N,C,H,W]
    aleatoric: np.ndarray  # [N,H,W]
    epistemic: np.ndarray  # [N,H,W]
    uncertainty: np.ndarray  # [N,H,W]
    segmentation: np.ndarray  # [N,H,W]

    def channel(self, name: str) -> np.ndarray:
        fields = {"combined": self.uncertainty, "epistemic": self.epistemic, "aleatoric": self.aleatoric}
        if name not in fields:
            raise ValueError(f"unknown uncertainty channel {name!r}; choose from {sorted(fields)}")
        return fields[name]

    def __getitem__(self, i) -> "PredictiveOutput":
        return PredictiveOutput(
            self.mean_probs[i], self.aleatoric[i], self.epistemic[i], self.uncertainty[i], self.segmentation[i]
        )


def entropy(p, axis: int = 0) -> np.ndarray:
    """Shannon entropy in nats along ``axis`` with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def aggregate_passes(probs, variances) -> tuple[np.ndarray, np.ndarray]:
    """Float64 means of per-pass softmax outputs and variance maps."""
    mean_p = np.zeros(probs[0].shape, dtype=np.float64)
    mean_v = np.zeros(variances[0].shape, dtype=np.float64)
    for p, v in zip(probs, variances):
        mean_p += p
        mean_v += v
    return mean_p / len(probs), mean_v / len(variances)


def predictive_output(mean_probs: np.ndarray, aleatoric: np.ndarray) -> PredictiveOutput:
    ent = entropy(mean_probs, axis=1)
    return PredictiveOutput(
        mean_probs=mean_probs.astype(np.float32),
        aleatoric=aleatoric.astype(np.float32),
        epistemic=ent.astype(np.float32),
        uncertainty=(ent + aleatoric).astype(np.float32),
        segmentation=mean_probs.argmax(axis=1).astype(np.int64),
    )


def _as_batch(X) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(X, dtype=np.float32))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x


def _single_pass(model, x, enabled, rng, rate):
    # grad mode is thread-local, so worker threads must disable it themselves
    with torch.no_grad():
        z, v = model(x, dropout_enabled=enabled, rng=rng, dropout_rate=rate, shared_masks=True)
    if not bool(torch.isfinite(z).all() and torch.isfinite(v).all()):
        raise NonFiniteError("network produced non-finite outputs during inference")
    return softmax_channels(z).double().numpy(), v[:, 0].double().numpy()


def mc_predict(model, X, cfg: InferenceConfig | None = None, seed: int = 0,
               threads: int = 1, batch_size: int = 16) -> PredictiveOutput:
    """Average ``cfg.t`` dropout-enabled passes (softmax per pass, then mean).

    ``X`` is one image [H,W], a stack [N,H,W] or a tensor [N,1,H,W]. Pass ``t``
    draws one set of dropout masks from the stream ``(seed, "mc-pass", t)`` and
    applies it to every image, so each image's result is independent of
    ``threads``, ``batch_size`` and its position in ``X``. With ``cfg.bayesian``
    false a single deterministic pass is run and the aleatoric term is zero.
    """
    cfg = cfg or InferenceConfig()
    x = _as_batch(X)
    model.check_input(x)
    outputs = []
    with torch.no_grad(), ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for start in range(0, x.shape[0], batch_size):
            chunk = x[start:start + batch_size]
            if not cfg.bayesian:
                p, _ = _single_pass(model, chunk, False, None, 0.0)
                outputs.append(predictive_output(p, np.zeros((p.shape[0],) + p.shape[2:])))
                continue
            enabled = cfg.dropout_rate > 0
            n_pass = cfg.t

            def run(t, chunk=chunk):
                rng = RngStream(seed, "mc-pass", t)
                return _single_pass(model, chunk, enabled, rng, cfg.dropout_rate)

            if threads > 1:
                results = list(pool.map(run, range(n_pass)))
            else:
                results = [run(t) for t in range(n_pass)]
            mean_p, mean_v = aggregate_passes([r[0] for r in results], [r[1] for r in results])
            outputs.append(predictive_output(mean_p, mean_v))
    return PredictiveOutput(*(np.concatenate(parts) for parts in zip(*(
        (o.mean_probs, o.aleatoric, o.epistemic, o.uncertainty, o.segmentation) for o in outputs
    ))))
