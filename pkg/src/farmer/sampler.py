"""Resampling-based classifier-free guidance.

Per token: propose candidates from the conditional and unconditional
mixtures, weight them by the guidance ratio (conditional candidates get
w * delta, unconditional get (w+1) * delta, with delta the tempered
conditional/unconditional log-density gap), sharpen by the resampling
temperature, normalize, and draw. The selected-candidate law then matches
p_c^(1+w) / p_u^w up to the self-normalized importance approximation.
Redundant tokens reuse one enlarged pool for all positions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import unpatchify
from .gmm import GmmParams, log_softmax_np


@dataclass(frozen=True)
class CfgConfig:
    """Guidance scale, candidate counts, and the three temperature families."""

    w: float = 1.0
    s_c: int = 5
    s_u: int = 5
    t_pi: float = 1.0
    t_sigma: float = 1.0
    t_pi_v: float = 1.0
    t_sigma_v: float = 1.0
    t_s: float = 1.0
    redundant_multiplier: int = 4
    redundant_scale: float = 1.0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance scale w must be >= 0")
        if self.s_c < 0 or self.s_u < 0 or self.s_c + self.s_u < 1:
            raise ValueError("need at least one candidate (s_c + s_u >= 1)")
        if self.t_pi <= 0 or self.t_pi_v <= 0 or self.t_s <= 0:
            raise ValueError("t_pi, t_pi_v and t_s must be positive")
        if self.t_sigma < 0 or self.t_sigma_v < 0:
            raise ValueError("t_sigma and t_sigma_v must be non-negative")
        if self.redundant_multiplier < 1:
            raise ValueError("redundant_multiplier must be >= 1")
        if self.redundant_scale <= 0:
            raise ValueError("redundant_scale must be positive")


def propose(
    g_c: GmmParams,
    g_u: GmmParams,
    cfg: CfgConfig,
    rng: np.random.Generator,
    count_scale: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw s_c conditional then s_u unconditional candidates (times
    ``count_scale`` for the redundant stage). Returns (candidates,
    conditional-provenance flags)."""
    if g_c.dims != g_u.dims:
        raise ValueError("conditional/unconditional mixtures disagree on dims")
    n_c = cfg.s_c * count_scale
    n_u = cfg.s_u * count_scale
    parts = []
    if n_c:
        parts.append(g_c.sample(rng, t_pi=cfg.t_pi, t_sigma=cfg.t_sigma, size=n_c))
    if n_u:
        parts.append(g_u.sample(rng, t_pi=cfg.t_pi, t_sigma=cfg.t_sigma, size=n_u))
    candidates = np.concatenate(parts, axis=0)
    is_cond = np.zeros(n_c + n_u, dtype=bool)
    is_cond[:n_c] = True
    return candidates, is_cond


def weigh(
    candidates: np.ndarray,
    is_cond: np.ndarray,
    g_c: GmmParams,
    g_u: GmmParams,
    cfg: CfgConfig,
) -> np.ndarray:
    """Normalized log-weights over the joint pool.

    delta_j is evaluated under the weigh-stage tempered mixtures; the
    resampling temperature multiplies the log-weights before the final
    log-softmax.

    Why the two multipliers target the same law: a conditional candidate is
    proposed with density p_c and reweighted by (p_c/p_u)^w, so its selected
    density is proportional to p_c^(1+w) / p_u^w; an unconditional candidate
    is proposed with density p_u and reweighted by (p_c/p_u)^(w+1), giving
    p_u * p_c^(w+1) / p_u^(w+1) = p_c^(1+w) / p_u^w as well. Both provenance
    classes therefore estimate the same guided target, and the joint pool is
    a self-normalized importance sampler for it.
    """
    if len(candidates) == 0:
        raise ValueError("empty candidate pool")
    if cfg.w == 0.0 and is_cond.all():
        # every multiplier is w = 0: uniform pool, no densities needed
        return log_softmax_np(np.zeros(len(candidates)))
    if cfg.t_sigma_v == 0.0:
        raise ValueError("t_sigma_v must be positive to evaluate densities")
    gc_v = g_c.tempered(cfg.t_pi_v, cfg.t_sigma_v)
    gu_v = g_u.tempered(cfg.t_pi_v, cfg.t_sigma_v)
    delta = np.atleast_1d(gc_v.log_prob(candidates)) - np.atleast_1d(gu_v.log_prob(candidates))
    mult = np.where(is_cond, cfg.w, cfg.w + 1.0)
    return log_softmax_np(mult * delta * cfg.t_s)


def resample_informative(
    candidates: np.ndarray, log_weights: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One categorical draw over the pool."""
    probs = _validated_probs(log_weights)
    idx = rng.choice(len(candidates), p=probs)
    return candidates[idx]


def resample_redundant(
    candidates: np.ndarray, log_weights: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n independent draws with replacement from the same pool, one per token."""
    probs = _validated_probs(log_weights)
    idx = rng.choice(len(candidates), size=n, replace=True, p=probs)
    return candidates[idx]


def _validated_probs(log_weights: np.ndarray) -> np.ndarray:
    probs = np.exp(np.asarray(log_weights, dtype=np.float64))
    total = probs.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"weights not normalized (sum {total})")
    return probs / total


def naive_cfg_gmm(g_c: GmmParams, g_u: GmmParams, w: float) -> GmmParams:
    """Reference guidance for the ablation harness: interpolate mixture
    log-weights toward the conditional side, keep conditional components."""
    log_w = g_c.log_weights + w * (g_c.log_weights - g_u.log_weights)
    return GmmParams(log_w, g_c.means, g_c.scales)


def guided_token(
    g_c: GmmParams,
    g_u: GmmParams,
    cfg: CfgConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Propose/weigh/resample one informative token."""
    candidates, is_cond = propose(g_c, g_u, cfg, rng)
    log_w = weigh(candidates, is_cond, g_c, g_u, cfg)
    return resample_informative(candidates, log_w, rng)


def generate_latents(
    ar,
    class_id: int | None,
    cfg: CfgConfig,
    rng: np.random.Generator,
    n_tokens: int,
) -> np.ndarray:
    """Sample a full latent sequence (N, d): informative channels token by
    token under guided resampling, then all redundant tokens from one shared
    enlarged pool."""
    d_inf, d_red = ar.split.d_inf, ar.split.d_red
    prefix = np.zeros((0, d_inf))
    for _ in range(n_tokens):
        g_c = ar.informative_gmm(prefix, class_id)
        g_u = ar.informative_gmm(prefix, None)
        token = guided_token(g_c, g_u, cfg, rng)
        prefix = np.concatenate([prefix, token[None]], axis=0)
    if d_red == 0:
        return prefix
    g_c = ar.redundant_gmm(prefix, class_id).scaled(cfg.redundant_scale)
    g_u = ar.redundant_gmm(prefix, None).scaled(cfg.redundant_scale)
    candidates, is_cond = propose(g_c, g_u, cfg, rng, count_scale=cfg.redundant_multiplier)
    log_w = weigh(candidates, is_cond, g_c, g_u, cfg)
    redundant = resample_redundant(candidates, log_w, n_tokens, rng)
    return np.concatenate([prefix, redundant], axis=1)


def generate(
    ar,
    inverter,
    class_id: int | None,
    cfg: CfgConfig,
    rng: np.random.Generator,
    *,
    n_tokens: int,
    patch: int,
    height: int,
    width: int,
    channels: int,
    final_permute: bool = False,
    return_logdet: bool = False,
):
    """Sample one image: guided latents, optional token-order restore, flow
    (or student) inversion, unpatchify."""
    z = generate_latents(ar, class_id, cfg, rng, n_tokens)
    if final_permute:
        z = z[::-1].copy()
    z = z.astype(inverter.dtype, copy=False)
    if return_logdet:
        tokens, logdet = inverter.inverse(z, return_logdet=True)
        return unpatchify(tokens, patch, height, width, channels), float(logdet[0])
    tokens = inverter.inverse(z)
    return unpatchify(tokens, patch, height, width, channels)


def unguided_config(cfg: CfgConfig) -> CfgConfig:
    """The unguided operating point: no guidance weight, no unconditional pool."""
    return replace(cfg, w=0.0, s_u=0)
