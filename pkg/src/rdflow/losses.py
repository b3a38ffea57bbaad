"""Training objectives: Crank-Nicolson residual loss, supervised step loss, validation loss.

All losses share the ``1 / (4 b H W)`` normalization of a squared Frobenius
norm over ``(b, 2, H, W)``, i.e. half the mean squared entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .solver import Trajectory, laplacian_fd2
from .systems import SystemSpec, reaction, reaction_vjp


@dataclass(frozen=True)
class LossValue:
    value: float
    normalization: tuple[int, int, int]
    components: tuple[float, float] | None = None

    def __float__(self):
        return self.value


def _half_mse(err: np.ndarray) -> LossValue:
    b, _, hh, ww = err.shape
    denom = 4.0 * b * hh * ww
    sq = err * err
    per_channel = sq.sum(axis=(0, 2, 3)) / denom
    return LossValue(float(per_channel.sum()), (b, hh, ww), (float(per_channel[0]), float(per_channel[1])))


def cn_residual(u_next: np.ndarray, u_curr: np.ndarray, sys: SystemSpec, dt: float,
                h: float | None = None) -> np.ndarray:
    """Crank-Nicolson/FD2 residual ``F(U^{n+1}, U^n)``."""
    if u_next.shape != u_curr.shape:
        raise ValueError(f"shape mismatch {u_next.shape} vs {u_curr.shape}")
    if h is None:
        h = 1.0 / u_next.shape[-1]
    d = sys.diffusion
    bracket = (d * laplacian_fd2(u_curr, h) + reaction(u_curr, sys)
               + d * laplacian_fd2(u_next, h) + reaction(u_next, sys))
    return u_next - u_curr - 0.5 * dt * bracket


def nlol_loss(u_next, u_curr, sys: SystemSpec, dt: float, h: float | None = None) -> LossValue:
    return _half_mse(cn_residual(u_next, u_curr, sys, dt, h))


def nlol_loss_and_grad(u_next, u_curr, sys: SystemSpec, dt: float, h: float | None = None):
    """Loss and its gradient with respect to ``u_next`` (``u_curr`` is held fixed).

    The periodic five-point Laplacian is symmetric, so its adjoint is itself.
    """
    if h is None:
        h = 1.0 / u_next.shape[-1]
    res = cn_residual(u_next, u_curr, sys, dt, h)
    b, _, hh, ww = res.shape
    g = res * (2.0 / (4.0 * b * hh * ww))
    grad = g - 0.5 * dt * (sys.diffusion * laplacian_fd2(g, h) + reaction_vjp(u_next, g, sys))
    return _half_mse(res), grad


def ddol_step_loss(prediction: np.ndarray, target: np.ndarray) -> LossValue:
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch {prediction.shape} vs {target.shape}")
    return _half_mse(prediction - target)


def ddol_step_loss_and_grad(prediction: np.ndarray, target: np.ndarray):
    err = prediction - target
    b, _, hh, ww = err.shape
    return _half_mse(err), err * (2.0 / (4.0 * b * hh * ww))


def stack_validation(val_trajectories) -> np.ndarray:
    """Stack validation data to shape ``(M+1, K, 2, H, W)``.

    Accepts an array of that shape, a single :class:`Trajectory`, or a
    sequence of trajectories (concatenated along the sample axis).
    """
    if isinstance(val_trajectories, np.ndarray):
        states = val_trajectories
    elif isinstance(val_trajectories, Trajectory):
        states = val_trajectories.states
    else:
        states = np.concatenate([t.states for t in val_trajectories], axis=1)
    if states.ndim != 5 or states.shape[0] < 2:
        raise ValueError("validation trajectories need at least 2 snapshots")
    return states


def validation_loss(operator: Callable[[np.ndarray], np.ndarray], val_trajectories,
                    reduce: str = "mean", chunk: int = 64) -> LossValue:
    """Worst one-step loss over the validation horizon.

    For every step ``m`` the operator is applied to the true snapshot ``m`` of
    all ``K`` samples and compared with the true snapshot ``m + 1``. With
    ``reduce="mean"`` the ``K`` samples form one batch (``1/(4KHW)``); with
    ``reduce="max"`` each sample is scored on its own and the worst is kept.
    The result is the maximum over ``m``.
    """
    states = stack_validation(val_trajectories)
    n_pairs, k = states.shape[0] - 1, states.shape[1]
    inputs = states[:-1].reshape((n_pairs * k,) + states.shape[2:])
    targets = states[1:].reshape(inputs.shape)
    preds = np.concatenate([operator(inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)])
    err = (preds - targets).reshape(states[1:].shape)
    hh, ww = err.shape[-2:]
    per_sample = (err * err).sum(axis=(2, 3, 4)) / (4.0 * hh * ww)  # (M, K)
    if reduce == "mean":
        per_step = per_sample.mean(axis=1)
        norm = (k, hh, ww)
    elif reduce == "max":
        per_step = per_sample.max(axis=1)
        norm = (1, hh, ww)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    return LossValue(float(per_step.max()), norm)
