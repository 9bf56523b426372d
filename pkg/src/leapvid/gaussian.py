"""Diagonal Gaussian latents: reparameterized sampling and closed-form KL."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class GaussianParams:
    """Per-dimension mean and (clamped) log-variance, batched on axis 0."""

    mean: Value
    log_variance: Value

    def __post_init__(self):
        if not isinstance(self.mean, Value):
            self.mean = Value(self.mean)
        if not isinstance(self.log_variance, Value):
            self.log_variance = Value(self.log_variance)
        if self.mean.shape != self.log_variance.shape:
            raise ValueError(f"mean {self.mean.shape} and log-variance {self.log_variance.shape} differ")

    @classmethod
    def from_head(cls, out: Value):
        """Split a ``(batch, 2d)`` network output into mean and clamped log-variance."""
        d = out.shape[-1] // 2
        return cls(out[:, :d], ad.clip(out[:, d:], LOGVAR_MIN, LOGVAR_MAX))

    @property
    def dim(self):
        return self.mean.shape[-1]


def reparam_sample(p: GaussianParams, noise) -> Value:
    """``mean + exp(log_variance / 2) * noise``."""
    noise = noise if isinstance(noise, Value) else Value(noise)
    if noise.shape != p.mean.shape:
        raise ValueError(f"noise shape {noise.shape} does not match mean shape {p.mean.shape}")
    return p.mean + ad.exp(p.log_variance * 0.5) * noise


def kl_diag_gauss(p: GaussianParams, q: GaussianParams, reduce=True) -> Value:
    """KL(p || q) summed over the last axis.

    With ``reduce`` the result is averaged over any leading batch axis,
    otherwise a per-row vector is returned.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError(f"dimension mismatch: {p.mean.shape} vs {q.mean.shape}")
    diff = p.mean - q.mean
    # log(sigma_q / sigma_p) + (var_p + diff^2) / (2 var_q) - 1/2
    # the variance ratio as exp(lv_p - lv_q) makes KL(p || p) exactly zero
    terms = (q.log_variance - p.log_variance) * 0.5 + ad.exp(p.log_variance - q.log_variance) * 0.5 \
        + diff * diff * ad.exp(-q.log_variance) * 0.5 - 0.5
    per_row = ad.sum_(terms, axis=-1)
    if not reduce or per_row.ndim == 0:
        return per_row
    return ad.mean(per_row)


def kl_numpy(mu_p, lv_p, mu_q, lv_q):
    """Plain-numpy KL used for logging and cross-checks; sums the last axis."""
    return np.sum(0.5 * (lv_q - lv_p) + 0.5 * np.exp(lv_p - lv_q) + (mu_p - mu_q) ** 2 / (2 * np.exp(lv_q)) - 0.5,
                  axis=-1)
