"""Core flow mathematics: linear interpolation, time sampling, training loss.

Source and target draws stay plain numpy; only the network output needs to
sit on the gradient tape, so the loss builds its graph from ``v_out`` alone.
The same squared-chord objective covers both the unconditional case and the
conditional one (the condition only changes what the network sees, not the
loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch, Tensor


@dataclass
class FlowBatch:
    """One training batch: endpoints, times, interpolants, and chord targets."""

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    target: np.ndarray


def interpolate(x0, x1, t):
    """Pointwise line t*x1 + (1-t)*x0, with per-sample t broadcast from axis 0."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"interpolate: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=x0.dtype)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"interpolate: t must lie in [0, 1], got range "
                         f"[{t.min():.6g}, {t.max():.6g}]")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return tb * x1 + (1.0 - tb) * x0


def sample_time(batch, rng):
    """i.i.d. uniform times on [0, 1], one per sample."""
    if batch < 1:
        raise ValueError(f"sample_time: batch must be >= 1, got {batch}")
    return rng.random(batch)


def make_flow_batch(x0, x1, rng) -> FlowBatch:
    """Draw times and assemble interpolants and chord targets for a batch."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    t = sample_time(x0.shape[0], rng)
    return FlowBatch(x0=x0, x1=x1, t=t, xt=interpolate(x0, x1, t), target=x1 - x0)


def rectified_flow_loss(v_out: Tensor, x0, x1) -> Tensor:
    """Mean squared gap between the network velocity and the chord x1 - x0.

    Reduction is the mean over every element (batch and feature dims alike),
    so the learning-rate scale is independent of feature size. Zero iff
    ``v_out`` equals the chord elementwise.
    """
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape or v_out.data.shape != x0.shape:
        raise ShapeMismatch(
            f"rectified_flow_loss: shapes v_out {v_out.data.shape}, "
            f"x0 {x0.shape}, x1 {x1.shape} must all match"
        )
    target = Tensor(np.asarray(x1 - x0, dtype=v_out.data.dtype))
    return (target - v_out).square().mean()


def optimal_velocity_oracle(x, t, mu0, sigma0, mu1, sigma1):
    """Conditional mean E[X1 - X0 | t*X1 + (1-t)*X0 = x] for independent
    Gaussian endpoints X0 ~ N(mu0, sigma0^2), X1 ~ N(mu1, sigma1^2).

    This is the exact least-squares minimizer the training loss converges
    to in 1-D, obtained from joint-Gaussian conditioning:

        v(x) = (mu1 - mu0) + cov/var * (x - E[Xt]),
        cov  = t*sigma1^2 - (1-t)*sigma0^2,
        var  = t^2*sigma1^2 + (1-t)^2*sigma0^2.
    """
    if sigma0 <= 0 or sigma1 <= 0:
        raise ValueError(f"optimal_velocity_oracle: degenerate variance "
                         f"(sigma0={sigma0}, sigma1={sigma1})")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"optimal_velocity_oracle: t must lie in [0, 1], got {t}")
    x = np.asarray(x, dtype=np.float64)
    var_t = t * t * sigma1**2 + (1.0 - t) ** 2 * sigma0**2
    cov = t * sigma1**2 - (1.0 - t) * sigma0**2
    mean_t = t * mu1 + (1.0 - t) * mu0
    return (mu1 - mu0) + (cov / var_t) * (x - mean_t)
