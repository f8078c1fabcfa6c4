"""Diagonal Gaussian mixtures: exact log-densities, tempered sampling, and
the differentiable evaluation used inside the training loss.

Two density routes are kept deliberately distinct and cross-checked in tests:
``log_prob`` sums component densities under a max-shifted logsumexp, while
``log_prob_affine`` evaluates each component as a standard normal of the
affine-normalized residual plus the affine volume term. With one component
the density is exactly one more affine flow block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, logsumexp as t_logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))
SCALE_FLOOR = 1e-4


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class GmmParams:
    """K-component diagonal Gaussian mixture over ``dims`` variables.

    ``log_weights`` are normalized on construction; ``scales`` must respect
    the global floor (the model heads enforce it, hand-built params should
    too).
    """

    log_weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, dims)
    scales: np.ndarray  # (K, dims)

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64))
        if self.means.shape != self.scales.shape:
            raise ValueError(f"means {self.means.shape} vs scales {self.scales.shape}")
        if self.log_weights.shape != (self.means.shape[0],):
            raise ValueError(f"{self.means.shape[0]} components but weights {self.log_weights.shape}")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        self.log_weights = log_softmax_np(self.log_weights)
        # per-component log normalizer, reused across density evaluations
        self._log_norm = -0.5 * LOG_2PI * self.dims - np.log(self.scales).sum(axis=-1)

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dims(self) -> int:
        return self.means.shape[1]

    def tempered(self, t_pi: float = 1.0, t_sigma: float = 1.0) -> "GmmParams":
        """Weights tempered as exp(log pi / t_pi), scales multiplied by t_sigma.

        Unit temperatures return the mixture itself, so a fully-tempered call
        with T = 1 everywhere is bit-identical to the untempered algorithm.
        """
        if t_pi <= 0:
            raise ValueError("t_pi must be positive")
        if t_sigma <= 0:
            raise ValueError("t_sigma must be positive for a proper density")
        if t_pi == 1.0 and t_sigma == 1.0:
            return self
        return GmmParams(self.log_weights / t_pi, self.means, self.scales * t_sigma)

    def scaled(self, factor: float) -> "GmmParams":
        if factor == 1.0:
            return self
        return GmmParams(self.log_weights, self.means, self.scales * factor)

    def log_prob(self, z: np.ndarray) -> float | np.ndarray:
        """Exact mixture log-density at z of shape (dims,) or (M, dims)."""
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 1
        z2 = np.atleast_2d(z)
        if z2.shape[-1] != self.dims:
            raise ValueError(f"z has {z2.shape[-1]} dims, mixture has {self.dims}")
        resid = (z2[:, None, :] - self.means[None]) / self.scales[None]
        quad = (resid * resid).sum(axis=-1)
        stacked = (self.log_weights + self._log_norm)[None] - 0.5 * quad
        m = stacked.max(axis=-1, keepdims=True)
        out = (m + np.log(np.exp(stacked - m).sum(axis=-1, keepdims=True)))[:, 0]
        return float(out[0]) if squeeze else out

    def log_prob_affine(self, z: np.ndarray) -> float | np.ndarray:
        """Same density via per-component affine normalization + volume term."""
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 1
        z2 = np.atleast_2d(z)
        normed = (z2[:, None, :] - self.means[None]) / self.scales[None]
        std_normal = (-0.5 * LOG_2PI - 0.5 * normed**2).sum(axis=-1)
        volume = np.log(1.0 / self.scales).sum(axis=-1)
        stacked = self.log_weights[None] + std_normal + volume[None]
        m = stacked.max(axis=-1, keepdims=True)
        out = (m + np.log(np.exp(stacked - m).sum(axis=-1, keepdims=True)))[:, 0]
        return float(out[0]) if squeeze else out

    def sample(
        self,
        rng: np.random.Generator,
        t_pi: float = 1.0,
        t_sigma: float = 1.0,
        size: int | None = None,
    ) -> np.ndarray:
        """Draw from the tempered mixture: component via exp(log pi / t_pi),
        then mean + t_sigma * scale * eps. t_sigma = 0 returns component means.
        """
        if t_pi <= 0:
            raise ValueError("t_pi must be positive")
        if t_sigma < 0:
            raise ValueError("t_sigma must be non-negative")
        m = 1 if size is None else size
        probs = np.exp(log_softmax_np(self.log_weights / t_pi))
        comps = rng.choice(self.k, size=m, p=probs)
        eps = rng.standard_normal((m, self.dims))
        out = self.means[comps] + t_sigma * self.scales[comps] * eps
        return out[0] if size is None else out


def standard_gaussian(dims: int) -> GmmParams:
    """The fixed K=1, mean-0, scale-1 mixture (redundant-prior baseline)."""
    return GmmParams(np.zeros(1), np.zeros((1, dims)), np.ones((1, dims)))


def gmm_fields_from_head(raw: Tensor, k: int, dims: int) -> tuple[Tensor, Tensor, Tensor]:
    """Split a head output (..., K*(1+2*dims)) into normalized log-weights,
    means, and floored scales, all as graph tensors."""
    from .tensor import exp as t_exp, maximum as t_maximum, reshape as t_reshape

    lead = raw.shape[:-1]
    logits = raw[..., :k]
    log_w = logits - t_logsumexp(logits, axis=-1).reshape(lead + (1,))
    means = t_reshape(raw[..., k : k + k * dims], lead + (k, dims))
    raw_s = t_reshape(raw[..., k + k * dims :], lead + (k, dims))
    scales = t_maximum(t_exp(raw_s), SCALE_FLOOR)
    return log_w, means, scales


def gmm_log_prob_t(log_w: Tensor, means: Tensor, scales: Tensor, z: Tensor) -> Tensor:
    """Differentiable mixture log-density.

    Shapes: log_w (..., K), means/scales (..., K, D), z broadcastable to
    (..., K, D) after inserting the component axis. Returns (...,).
    """
    from .tensor import log as t_log, reshape as t_reshape, square as t_square

    z_e = t_reshape(z, z.shape[:-1] + (1, z.shape[-1]))
    resid = (z_e - means) / scales
    comp = (-0.5 * LOG_2PI - t_log(scales) - 0.5 * t_square(resid)).sum(axis=-1)
    return t_logsumexp(log_w + comp, axis=-1)
