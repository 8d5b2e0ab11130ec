"""Subject-wise alignment: context statistics and normalization layers.

Three alignment flavours share one layer implementation:

* ``plain_bn`` -- ordinary batch normalization: batch statistics during
  training (with running averages tracked), frozen running statistics at
  inference.
* ``adaptive_bn`` -- identical to ``plain_bn`` during training; at inference
  the running statistics are replaced with statistics gathered from a context
  set of the target subject (see :func:`adapt_batchnorm`).
* ``latent`` -- subject-wise standardization applied identically during
  training and inference: statistics always come from the current set of
  trials, never from running averages.

Statistics pool trials and time samples jointly and use the sample (n-1)
variance convention throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import (
    ModeMismatch,
    NonFiniteInput,
    NotTrained,
    ShapeMismatch,
    SingleTrialContext,
)

ALIGNMENT_MODES = ("plain_bn", "adaptive_bn", "latent")

_ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": torch.relu,
    "elu": torch.nn.functional.elu,
    "gelu": torch.nn.functional.gelu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
}


@dataclass(frozen=True)
class ContextStats:
    """Per-feature mean and standard deviation of a context set.

    ``count`` is the number of trials that contributed; the standard
    deviation uses the sample convention with the flattened trial*time axis
    as denominator (n_samples - 1).
    """

    mean: np.ndarray
    std: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise SingleTrialContext("context statistics need at least one trial")
        if np.any(self.std < 0):
            raise ValueError("standard deviation must be non-negative")


def _flatten_time(features):
    """Reshape [n, d] or [n, d, t...] into a flat [n * t..., d] sample matrix."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 2:
        return arr, arr.shape[0]
    if arr.ndim >= 3:
        n, d = arr.shape[0], arr.shape[1]
        flat = np.moveaxis(arr, 1, -1).reshape(-1, d)
        return flat, n
    raise ShapeMismatch(f"expected [n, d] or [n, d, t], got shape {arr.shape}")


def compute_context_stats(features) -> ContextStats:
    """Mean and sample standard deviation per feature over a context set.

    Parameters
    ----------
    features : array-like, shape [n, d] or [n, d, t]
        Trials with per-trial feature vectors; a trailing time axis is
        flattened into the sample axis before statistics are computed.

    Returns
    -------
    ContextStats
        Per-feature mean/std with the (n*t - 1) denominator, plus the number
        of trials that contributed.
    """
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    flat, n_trials = _flatten_time(features)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteInput("context features contain NaN or Inf")
    if flat.shape[0] < 2:
        raise SingleTrialContext(
            f"need at least 2 samples after flattening, got {flat.shape[0]}"
        )
    mean = flat.mean(axis=0)
    std = flat.std(axis=0, ddof=1)
    return ContextStats(mean=mean, std=std, count=n_trials)


class StreamingStats:
    """Numerically stable streaming accumulation of context statistics.

    Uses Chan's parallel variant of the Welford update so that feeding trials
    in chunks of any size reproduces the one-shot batch computation.
    """

    def __init__(self, n_features: int):
        self.n_features = n_features
        self._samples = 0
        self._trials = 0
        self._mean = np.zeros(n_features, dtype=np.float64)
        self._m2 = np.zeros(n_features, dtype=np.float64)

    def update(self, features) -> "StreamingStats":
        if isinstance(features, torch.Tensor):
            features = features.detach().cpu().numpy()
        flat, n_trials = _flatten_time(features)
        if flat.shape[1] != self.n_features:
            raise ShapeMismatch(
                f"expected {self.n_features} features, got {flat.shape[1]}"
            )
        if not np.all(np.isfinite(flat)):
            raise NonFiniteInput("context features contain NaN or Inf")
        m = flat.shape[0]
        if m == 0:
            return self
        chunk_mean = flat.mean(axis=0)
        chunk_m2 = ((flat - chunk_mean) ** 2).sum(axis=0)
        if self._samples == 0:
            self._mean = chunk_mean
            self._m2 = chunk_m2
        else:
            total = self._samples + m
            delta = chunk_mean - self._mean
            self._m2 += chunk_m2 + delta**2 * self._samples * m / total
            self._mean += delta * m / total
        self._samples += m
        self._trials += n_trials
        return self

    @property
    def sample_count(self) -> int:
        return self._samples

    def finalize(self) -> ContextStats:
        if self._samples < 2:
            raise SingleTrialContext(
                f"need at least 2 accumulated samples, got {self._samples}"
            )
        std = np.sqrt(self._m2 / (self._samples - 1))
        return ContextStats(mean=self._mean.copy(), std=std, count=self._trials)


class AlignmentLayer(nn.Module):
    """Normalization layer with plain, adaptive, and latent alignment modes.

    Parameters
    ----------
    num_features : int
        Feature dimensionality d; inputs are [n, d] or [n, d, t...] and
        statistics pool every axis except the feature axis.
    mode : str
        One of ``plain_bn``, ``adaptive_bn``, ``latent``.
    epsilon : float
        Added to the standard deviation (not the variance) in the
        denominator; 0 disables the guard.
    affine : bool
        When False the trainable scale and bias are fixed at 1 and 0
        (used for the input-level per-electrode layer).
    momentum : float
        Exponential update rate of the running statistics in plain mode.
    """

    def __init__(self, num_features, mode="plain_bn", epsilon=1e-5, affine=True,
                 momentum=0.1):
        super().__init__()
        if mode not in ALIGNMENT_MODES:
            raise ModeMismatch(f"unknown alignment mode {mode!r}")
        if epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        self.num_features = num_features
        self.mode = mode
        self.epsilon = float(epsilon)
        self.affine = bool(affine)
        self.momentum = float(momentum)
        if self.affine:
            self.weight = nn.Parameter(torch.ones(num_features))
            self.bias = nn.Parameter(torch.zeros(num_features))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)
        # Running statistics are tracked as (mean, std); unused in latent mode.
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_std", torch.ones(num_features))
        self.register_buffer("trials_tracked", torch.zeros((), dtype=torch.long))
        self._adapting = False

    def extra_repr(self):
        return (f"{self.num_features}, mode={self.mode}, eps={self.epsilon}, "
                f"affine={self.affine}")

    @property
    def running_stats(self) -> ContextStats | None:
        if int(self.trials_tracked) == 0:
            return None
        return ContextStats(
            mean=self.running_mean.detach().cpu().numpy().copy(),
            std=self.running_std.detach().cpu().numpy().copy(),
            count=int(self.trials_tracked),
        )

    def _stat_shape(self, x):
        shape = [1] * x.dim()
        shape[1] = self.num_features
        return shape

    def _batch_stats(self, x):
        dims = (0,) + tuple(range(2, x.dim()))
        mean = x.mean(dim=dims)
        std = x.var(dim=dims, unbiased=True).sqrt()
        return mean, std

    def _normalize(self, x, mean, std):
        shape = self._stat_shape(x)
        y = (x - mean.reshape(shape)) / (std.reshape(shape) + self.epsilon)
        if self.affine:
            y = y * self.weight.reshape(shape) + self.bias.reshape(shape)
        return y

    def forward(self, x):
        if x.dim() < 2:
            raise ShapeMismatch(f"expected at least 2 dims, got {tuple(x.shape)}")
        if x.shape[1] != self.num_features:
            raise ShapeMismatch(
                f"expected {self.num_features} features on axis 1, "
                f"got {x.shape[1]}"
            )
        if self.mode == "latent":
            if x.shape[0] < 2:
                raise SingleTrialContext(
                    "latent alignment needs a context of at least 2 trials"
                )
            mean, std = self._batch_stats(x)
            return self._normalize(x, mean, std)
        if self._adapting:
            if x.shape[0] < 2:
                raise SingleTrialContext(
                    "adaptation needs a context of at least 2 trials"
                )
            mean, std = self._batch_stats(x)
            with torch.no_grad():
                self.running_mean.copy_(mean)
                self.running_std.copy_(std)
                self.trials_tracked.fill_(x.shape[0])
            return self._normalize(x, mean, std)
        if self.training:
            if x.shape[0] < 2:
                raise SingleTrialContext(
                    "batch statistics need at least 2 trials during training"
                )
            mean, std = self._batch_stats(x)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(mean, alpha=m)
                self.running_std.mul_(1 - m).add_(std, alpha=m)
                self.trials_tracked.add_(x.shape[0])
            return self._normalize(x, mean, std)
        if int(self.trials_tracked) == 0:
            raise NotTrained("no running statistics; train or adapt first")
        return self._normalize(x, self.running_mean, self.running_std)


def latent_align(batch_features: torch.Tensor, layer: AlignmentLayer) -> torch.Tensor:
    """Standardize a subject's batch of features with its own statistics.

    ``y = (x - mean) / (std + eps) * scale + bias`` featurewise, where mean
    and std are computed over the batch (trials and time jointly). Gradients
    flow through the statistics.
    """
    if layer.mode != "latent":
        raise ModeMismatch(f"layer mode is {layer.mode!r}, expected 'latent'")
    return layer(batch_features)


class DeepSetBlock(nn.Module):
    """Permutation-equivariant block: standardize the set, then map linearly.

    Computes ``activation(bias + (x - rho(x)) @ W)`` where
    ``rho(x) = x + standardized(x)``, so the linear map consumes the negated
    standardized features. Equivalent to latent alignment followed by a
    linear layer with the sign absorbed into the weights.
    """

    def __init__(self, in_features, out_features, activation="elu", epsilon=1e-5):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.norm = AlignmentLayer(in_features, mode="latent", epsilon=epsilon)
        self.linear = nn.Linear(in_features, out_features)
        self.activation = activation

    def forward(self, x):
        if x.dim() != 2:
            raise ShapeMismatch(f"expected [n, d] input, got {tuple(x.shape)}")
        rho = x + self.norm(x)
        return _ACTIVATIONS[self.activation](self.linear(x - rho))


def deep_set_forward(batch_features: torch.Tensor, block: DeepSetBlock) -> torch.Tensor:
    """Apply a :class:`DeepSetBlock` to one subject's set of trials."""
    return block(batch_features)


def collect_alignment_layers(module: nn.Module) -> list[AlignmentLayer]:
    """All alignment layers of a model, in registration (forward) order."""
    return [m for m in module.modules() if isinstance(m, AlignmentLayer)]


class AdaptationState:
    """Snapshot of running statistics taken before adaptation.

    Call :meth:`restore` to put the original statistics back bit-identically.
    """

    def __init__(self, layers):
        self._saved = [
            (layer,
             layer.running_mean.detach().clone(),
             layer.running_std.detach().clone(),
             layer.trials_tracked.detach().clone())
            for layer in layers
        ]

    def restore(self):
        with torch.no_grad():
            for layer, mean, std, count in self._saved:
                layer.running_mean.copy_(mean)
                layer.running_std.copy_(std)
                layer.trials_tracked.copy_(count)


def adapt_batchnorm(model: nn.Module, context: torch.Tensor) -> AdaptationState:
    """Replace every normalization layer's statistics with context statistics.

    One forward pass over the context is performed; each layer stores the
    statistics of its input and normalizes with them immediately, so later
    layers see context activations that already went through adapted earlier
    layers. Returns the state needed to restore the original statistics.

    The context must hold trials of a single subject; latent-mode layers are
    untouched (they never use running statistics).
    """
    layers = [
        layer for layer in collect_alignment_layers(model)
        if layer.mode in ("plain_bn", "adaptive_bn")
    ]
    if not layers:
        raise NotTrained("model has no plain/adaptive normalization layers")
    for i, layer in enumerate(layers):
        if int(layer.trials_tracked) == 0:
            raise NotTrained(f"layer {i} has no running statistics to replace")
    if context.shape[0] < 2:
        raise SingleTrialContext("adaptation context needs at least 2 trials")
    state = AdaptationState(layers)
    was_training = model.training
    for layer in layers:
        layer._adapting = True
    try:
        model.eval()
        with torch.no_grad():
            model(context)
    finally:
        for layer in layers:
            layer._adapting = False
        model.train(was_training)
    return state
