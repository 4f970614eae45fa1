"""Evaluation metrics: Fréchet distance on feature statistics, real-time
factor, and mean squared error against known-oracle targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatch

# provenance defaults for mapping frame counts to audio seconds
DEFAULT_HOP = 256
DEFAULT_SAMPLE_RATE = 22050

COV_EIG_FLOOR = 1e-10
COV_REG_EPS = 1e-6


class MetricPreconditionError(ValueError):
    """A metric's statistical preconditions are not met."""


@dataclass
class FeatureSet:
    """Rows of feature vectors, [n_samples, d], plus a source label."""

    x: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise MetricPreconditionError(
                f"feature set '{self.label}' must be a non-empty [n, d] matrix, "
                f"got shape {self.x.shape}"
            )
        if not np.all(np.isfinite(self.x)):
            raise MetricPreconditionError(f"feature set '{self.label}' contains non-finite values")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]


def gaussian_stats(fs: FeatureSet):
    """Sample mean and covariance; needs n >= d + 1 for a full-rank fit."""
    if fs.n < fs.dim + 1:
        raise MetricPreconditionError(
            f"feature set '{fs.label}': need at least d+1={fs.dim + 1} samples "
            f"for a covariance fit, got {fs.n}"
        )
    mu = fs.x.mean(axis=0)
    cov = np.cov(fs.x, rowvar=False).reshape(fs.dim, fs.dim)
    return mu, cov


def _psd_sqrt(cov):
    w, v = np.linalg.eigh((cov + cov.T) / 2.0)
    w = np.maximum(w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b, eps=COV_REG_EPS):
    """FD between two Gaussians: ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2(Sa Sb)^1/2).

    The cross term uses the symmetric form (Sa^1/2 Sb Sa^1/2)^1/2 via
    eigendecomposition, clamping negative eigenvalues to zero. Covariances
    with eigenvalues below 1e-10 get an eps*I ridge first.
    """
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ShapeMismatch(
            f"frechet_distance: stats shapes differ ({mu_a.shape}/{cov_a.shape} "
            f"vs {mu_b.shape}/{cov_b.shape})"
        )
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise MetricPreconditionError("frechet_distance: covariance contains non-finite values")

    def ridge(c):
        w = np.linalg.eigvalsh((c + c.T) / 2.0)
        if w.min() < COV_EIG_FLOOR:
            return c + eps * np.eye(c.shape[0])
        return c

    cov_a = ridge(cov_a)
    cov_b = ridge(cov_b)
    a_half = _psd_sqrt(cov_a)
    inner = a_half @ cov_b @ a_half
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if not np.all(np.isfinite(w)):
        raise MetricPreconditionError(
            "frechet_distance: covariance rank-deficient beyond regularization; "
            "raise the eps ridge"
        )
    trace_sqrt = np.sqrt(np.maximum(w, 0.0)).sum()
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fd, 0.0)


def frechet_distance(a: FeatureSet, b: FeatureSet, eps=COV_REG_EPS):
    """FD between the Gaussian fits of two feature sets."""
    mu_a, cov_a = gaussian_stats(a)
    mu_b, cov_b = gaussian_stats(b)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b, eps=eps)


def rtf(synthesis_seconds, frames, hop=DEFAULT_HOP, sample_rate=DEFAULT_SAMPLE_RATE):
    """Synthesis wall time divided by the audio duration it produced."""
    if synthesis_seconds <= 0 or frames <= 0 or hop <= 0 or sample_rate <= 0:
        raise ValueError(
            f"rtf: all arguments must be positive, got synthesis_seconds={synthesis_seconds}, "
            f"frames={frames}, hop={hop}, sample_rate={sample_rate}"
        )
    return float(synthesis_seconds) / (frames * hop / sample_rate)


def mse_to_oracle(generated, oracle):
    """Mean squared error over all cells of two equal-shape grids."""
    generated = np.asarray(generated, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if generated.shape != oracle.shape:
        raise ShapeMismatch(
            f"mse_to_oracle: shapes {generated.shape} and {oracle.shape} differ"
        )
    return float(np.mean((generated - oracle) ** 2))


@dataclass
class EvalReport:
    """One sampling configuration's metric bundle.

    Stable keys for serialization: fd, mean_nfe, rtf, mse_oracle,
    straightness (the last two optional).
    """

    fd: float
    mean_nfe: float
    rtf: float
    mse_oracle: float | None = None
    straightness: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fd < 0:
            raise ValueError(f"fd must be nonnegative, got {self.fd}")
        for name in ("fd", "mean_nfe", "rtf"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"EvalReport field {name} must be finite")

    def to_dict(self):
        d = {"fd": self.fd, "mean_nfe": self.mean_nfe, "rtf": self.rtf}
        if self.mse_oracle is not None:
            d["mse_oracle"] = self.mse_oracle
        if self.straightness is not None:
            d["straightness"] = self.straightness
        if self.config:
            d["config"] = self.config
        return d

    def to_text(self):
        lines = []
        for key, value in self.to_dict().items():
            if key == "config":
                for ck, cv in value.items():
                    lines.append(f"config.{ck}={cv}")
            else:
                lines.append(f"{key}={value:.10g}")
        return "\n".join(lines) + "\n"
