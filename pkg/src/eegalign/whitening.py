"""Euclidean alignment: spatial whitening with a subject's average covariance.

Trials are recentered per electrode and rescaled by their average global
field power before covariance estimation, which makes the transform
invariant to a global gain on the subject's recordings. The whitening
operator is the inverse lower-triangular Cholesky factor of the regularized
average covariance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ShapeMismatch, SingularCovariance

# Diagonal loading as a fraction of the mean eigenvalue; the second value is
# the fallback when the first factorization fails.
DEFAULT_REG_SCALE = 1e-6
RETRY_REG_SCALE = 1e-4

_TINY = 1e-12


@dataclass(frozen=True)
class SpatialWhitener:
    """Average spatial covariance of a subject and its whitening factor.

    ``whitening_factor @ sigma @ whitening_factor.T`` is the identity, with
    ``sigma`` the regularized covariance actually factorized.
    """

    sigma: np.ndarray
    whitening_factor: np.ndarray
    regularization: float

    @property
    def n_channels(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def from_covariance(cls, sigma, reg_scale=DEFAULT_REG_SCALE) -> "SpatialWhitener":
        """Build a whitener from an averaged spatial covariance matrix."""
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ShapeMismatch(f"covariance must be square, got {sigma.shape}")
        asym = np.max(np.abs(sigma - sigma.T))
        if asym > 1e-8 * max(1.0, np.max(np.abs(sigma))):
            raise ShapeMismatch(f"covariance is not symmetric (max asymmetry {asym:g})")
        sigma = (sigma + sigma.T) / 2.0
        c = sigma.shape[0]
        mean_eig = np.trace(sigma) / c
        for scale in (reg_scale, RETRY_REG_SCALE):
            reg = scale * mean_eig
            try:
                chol = np.linalg.cholesky(sigma + reg * np.eye(c))
            except np.linalg.LinAlgError:
                continue
            factor = solve_triangular(chol, np.eye(c), lower=True)
            return cls(sigma=sigma + reg * np.eye(c),
                       whitening_factor=factor,
                       regularization=float(reg))
        raise SingularCovariance(
            "covariance not positive definite even after diagonal loading"
        )


def recenter_rescale(trials: np.ndarray) -> np.ndarray:
    """Recenter each electrode and rescale each trial by its average GFP.

    Global field power is the per-time-sample standard deviation across
    electrodes; its average over the trial is the rescaling divisor. All-zero
    trials are left unscaled.
    """
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3:
        raise ShapeMismatch(f"expected [n, c, t] trials, got {trials.shape}")
    centered = trials - trials.mean(axis=2, keepdims=True)
    gfp = centered.std(axis=1).mean(axis=1)
    gfp = np.where(gfp > _TINY, gfp, 1.0)
    return centered / gfp[:, None, None]


def average_spatial_covariance(trials: np.ndarray) -> np.ndarray:
    """Trial-averaged spatial covariance of recentered, rescaled trials."""
    prepared = recenter_rescale(trials)
    t = prepared.shape[2]
    covs = np.einsum("nct,ndt->ncd", prepared, prepared) / max(t - 1, 1)
    sigma = covs.mean(axis=0)
    return (sigma + sigma.T) / 2.0


def fit_whitener(trials: np.ndarray, reg_scale=DEFAULT_REG_SCALE) -> SpatialWhitener:
    """Fit a spatial whitener on one subject's trials [n, c, t].

    Per trial, electrodes are recentered and the trial rescaled by its
    average global field power; spatial covariances are averaged over trials,
    diagonally loaded, and Cholesky-factorized. The whitening factor is the
    inverse of the lower-triangular factor.
    """
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3:
        raise ShapeMismatch(f"expected [n, c, t] trials, got {trials.shape}")
    n, c, t = trials.shape
    if n < 1 or c < 1:
        raise ShapeMismatch("need at least one trial and one channel")
    if t <= c:
        warnings.warn(
            f"trial length {t} <= channel count {c}; covariance estimate "
            "will be rank-deficient and rely on regularization",
            stacklevel=2,
        )
    sigma = average_spatial_covariance(trials)
    return SpatialWhitener.from_covariance(sigma, reg_scale=reg_scale)


def euclidean_align(trials: np.ndarray, whitener: SpatialWhitener) -> np.ndarray:
    """Whiten trials with a fitted :class:`SpatialWhitener`.

    Applies the same recenter/rescale used during fitting, then multiplies
    each trial by the whitening factor. The average spatial covariance of the
    output is the identity (up to regularization).
    """
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3:
        raise ShapeMismatch(f"expected [n, c, t] trials, got {trials.shape}")
    if trials.shape[1] != whitener.n_channels:
        raise ShapeMismatch(
            f"trials have {trials.shape[1]} channels, whitener expects "
            f"{whitener.n_channels}"
        )
    prepared = recenter_rescale(trials)
    return np.einsum("uv,nvt->nut", whitener.whitening_factor, prepared)
