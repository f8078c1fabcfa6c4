"""Autoregressive density over latent token sequences.

A causal transformer consumes a repeated condition embedding followed by the
informative channels of each token. Per-position mixture heads give the
conditional density of each informative token given its predecessors; one
shared mixture, read from the hidden state after the final input, scores
every redundant token given the whole informative sequence and the
condition. The channel split is by fixed contiguous index ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import GmmParams, gmm_fields_from_head, gmm_log_prob_t, standard_gaussian, LOG_2PI
from .nn import Linear, TransformerStack
from .tensor import Tensor, concat, no_grad, reshape, take

NULL_CLASS = -1

REDUNDANT_PRIORS = ("learned", "standard")


@dataclass(frozen=True)
class DimSplit:
    """Fixed channel split: informative channels [0, d_inf), redundant [d_inf, d)."""

    d: int
    d_inf: int

    def __post_init__(self):
        if not 0 <= self.d_inf <= self.d:
            raise ValueError(f"d_inf {self.d_inf} outside [0, {self.d}]")

    @property
    def d_red(self) -> int:
        return self.d - self.d_inf


class ArModel:
    def __init__(
        self,
        split: DimSplit,
        k_inf: int,
        k_red: int,
        width: int,
        n_layers: int,
        n_heads: int,
        class_count: int,
        cond_repeat: int,
        max_tokens: int,
        rng: np.random.Generator,
        dtype=np.float32,
        redundant_prior: str = "learned",
    ):
        if redundant_prior not in REDUNDANT_PRIORS:
            raise ValueError(f"redundant_prior must be one of {REDUNDANT_PRIORS}")
        if cond_repeat < 1:
            raise ValueError("cond_repeat must be >= 1")
        self.split = split
        self.k_inf = k_inf
        self.k_red = k_red
        self.class_count = class_count
        self.cond_repeat = cond_repeat
        self.redundant_prior = redundant_prior
        self.dtype = dtype
        # one extra row holds the learned null-condition embedding
        self.cond_emb = Tensor(
            (0.02 * rng.standard_normal((class_count + 1, width))).astype(dtype),
            requires_grad=True,
        )
        self.stack = TransformerStack(
            width, n_layers, n_heads, cond_repeat + max_tokens, rng, dtype
        )
        if split.d_inf > 0:
            self.in_proj = Linear(split.d_inf, width, rng, dtype)
            self.inf_head = Linear(width, k_inf * (1 + 2 * split.d_inf), rng, dtype, zero_init=True)
        else:
            self.in_proj = None
            self.inf_head = None
        if split.d_red > 0 and redundant_prior == "learned":
            self.red_head = Linear(width, k_red * (1 + 2 * split.d_red), rng, dtype, zero_init=True)
        else:
            self.red_head = None

    # ------------------------------------------------------------------
    # condition handling

    def _class_rows(self, class_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(class_ids)
        if np.any((ids < NULL_CLASS) | (ids >= self.class_count)):
            raise ValueError(
                f"class ids must be in [0, {self.class_count}) or {NULL_CLASS} for null"
            )
        return np.where(ids == NULL_CLASS, self.class_count, ids)

    def _hidden(self, z_inf: Tensor | None, class_ids: np.ndarray) -> Tensor:
        rows = self._class_rows(class_ids)
        cond = take(self.cond_emb, rows)  # (B, width)
        b = cond.shape[0]
        cond = reshape(cond, (b, 1, cond.shape[-1]))
        pieces = [cond] * self.cond_repeat
        if z_inf is not None and z_inf.shape[1] > 0:
            pieces.append(self.in_proj(z_inf))
        seq = concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
        return self.stack(seq, causal=True)

    # ------------------------------------------------------------------
    # training path (graph tensors)

    def predict_gmms(self, z_inf: Tensor, class_ids: np.ndarray):
        """One causal pass. Returns ((logw, means, scales) for the N
        per-position informative mixtures, and the same triple for the
        single shared redundant mixture or None in baseline mode).

        The informative mixture at position i is read from the hidden state
        after the (cond_repeat + i - 1)-th input, so it conditions only on
        the condition tokens and earlier informative tokens.
        """
        m = self.cond_repeat
        n = z_inf.shape[1]
        h = self._hidden(z_inf, class_ids)
        informative = None
        if self.inf_head is not None and n > 0:
            inf_h = self.inf_head(h[:, m - 1 : m + n - 1])
            informative = gmm_fields_from_head(inf_h, self.k_inf, self.split.d_inf)
        redundant = None
        if self.red_head is not None:
            red_h = self.red_head(h[:, m + n - 1 : m + n])
            redundant = gmm_fields_from_head(red_h, self.k_red, self.split.d_red)
        return informative, redundant

    def sequence_log_lik(self, z: Tensor, class_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        """Exact log-likelihood split into (informative, redundant) parts,
        each of shape (B,). Every redundant token is scored under the one
        shared mixture; in baseline mode that mixture is the fixed standard
        normal."""
        b, n, d = z.shape
        if d != self.split.d:
            raise ValueError(f"tokens have {d} channels, model expects {self.split.d}")
        z_inf = z[..., : self.split.d_inf] if self.split.d_inf > 0 else None
        z_red = z[..., self.split.d_inf :] if self.split.d_red > 0 else None
        informative, redundant = self.predict_gmms(
            z_inf if z_inf is not None else Tensor(np.zeros((b, 0, 0), dtype=z.dtype)),
            class_ids,
        )
        zero = Tensor(np.zeros(b, dtype=z.dtype))
        ll_inf = zero
        if informative is not None:
            logw, means, scales = informative
            ll_inf = gmm_log_prob_t(logw, means, scales, z_inf).sum(axis=1)
        ll_red = zero
        if z_red is not None:
            if self.redundant_prior == "standard" or redundant is None:
                sq = (z_red * z_red).sum(axis=(1, 2))
                count = n * self.split.d_red
                ll_red = sq * (-0.5) - 0.5 * LOG_2PI * count
            else:
                logw, means, scales = redundant
                ll_red = gmm_log_prob_t(logw, means, scales, z_red).sum(axis=1)
        return ll_inf, ll_red

    # ------------------------------------------------------------------
    # sampling path (plain numpy, no graph)

    def _np_gmm(self, fields, batch_index: int = 0, pos_index: int = 0) -> GmmParams:
        logw, means, scales = fields
        return GmmParams(
            logw.data[batch_index, pos_index].astype(np.float64),
            means.data[batch_index, pos_index].astype(np.float64),
            scales.data[batch_index, pos_index].astype(np.float64),
        )

    def informative_gmm(self, prefix: np.ndarray, class_id: int | None) -> GmmParams:
        """Mixture for the next informative token given a sampled prefix of
        shape (i-1, d_inf); an empty prefix conditions on the class alone."""
        if self.inf_head is None:
            raise ValueError("model has no informative channels")
        ids = np.array([NULL_CLASS if class_id is None else class_id])
        with no_grad():
            m = self.cond_repeat
            z = Tensor(np.asarray(prefix, dtype=self.dtype).reshape(1, -1, self.split.d_inf))
            h = self._hidden(z if z.shape[1] > 0 else None, ids)
            raw = self.inf_head(h[:, -1:])
            fields = gmm_fields_from_head(raw, self.k_inf, self.split.d_inf)
        return self._np_gmm(fields)

    def redundant_gmm(self, z_inf: np.ndarray, class_id: int | None) -> GmmParams:
        """Shared mixture for all redundant tokens given the full informative
        sequence. Baseline mode returns the fixed standard normal."""
        if self.split.d_red == 0:
            raise ValueError("model has no redundant channels")
        if self.redundant_prior == "standard":
            return standard_gaussian(self.split.d_red)
        ids = np.array([NULL_CLASS if class_id is None else class_id])
        with no_grad():
            z = Tensor(np.asarray(z_inf, dtype=self.dtype).reshape(1, -1, self.split.d_inf))
            h = self._hidden(z if z.shape[1] > 0 else None, ids)
            raw = self.red_head(h[:, -1:])
            fields = gmm_fields_from_head(raw, self.k_red, self.split.d_red)
        return self._np_gmm(fields)

    def named_parameters(self, prefix: str = "ar"):
        yield f"{prefix}/cond_emb", self.cond_emb
        if self.in_proj is not None:
            yield from self.in_proj.named_parameters(f"{prefix}/in_proj")
        yield from self.stack.named_parameters(f"{prefix}/stack")
        if self.inf_head is not None:
            yield from self.inf_head.named_parameters(f"{prefix}/inf_head")
        if self.red_head is not None:
            yield from self.red_head.named_parameters(f"{prefix}/red_head")
