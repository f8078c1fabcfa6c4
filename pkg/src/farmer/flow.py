"""Invertible autoregressive flow over token sequences.

Each block predicts per-token shift and log-scale from the strictly
preceding tokens, transforms z_i -> (z_i - mu_i) * sigma_i (token 1 is
copied), and contributes the sum of log-scales to the Jacobian log
determinant. Blocks are wrapped in an order-reversing permutation that is
applied before the transform and undone after, so the stored states always
live in the original token order. The forward pass is one parallel
evaluation per block; the inverse recovers tokens sequentially.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Linear, TransformerStack
from .tensor import Tensor, clip, concat, exp, flip, no_grad

LOG_SCALE_LIMIT = float(np.log(1e3))


class NumericsError(RuntimeError):
    """Non-finite value inside a flow block, with the first offending site."""

    def __init__(self, block: int, position: int, what: str):
        super().__init__(f"non-finite {what} in block {block} at token position {position}")
        self.block = block
        self.position = position


def _first_bad_position(data: np.ndarray) -> int:
    finite = np.isfinite(data)
    if finite.all():
        return -1
    bad = np.argwhere(~finite)
    return int(bad[0][-2]) if data.ndim >= 2 else int(bad[0][0])


class FlowConditioner:
    """Causal transformer mapping a token prefix to (shift, log-scale) pairs.

    Output at input index j parameterizes the transform of token j+1, so a
    pass over the first N-1 tokens yields parameters for tokens 2..N. The
    zero-initialized head makes a fresh block the identity transform.
    """

    def __init__(
        self,
        d: int,
        width: int,
        n_layers: int,
        n_heads: int,
        max_positions: int,
        rng: np.random.Generator,
        dtype=np.float32,
        bidirectional: bool = False,
    ):
        self.d = d
        self.bidirectional = bidirectional
        self.in_proj = Linear(d, width, rng, dtype)
        self.stack = TransformerStack(width, n_layers, n_heads, max_positions, rng, dtype)
        self.head = Linear(width, 2 * d, rng, dtype, zero_init=True)
        self.calls = 0

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """(B, m, d) -> shift (B, m, d) and clamped log-scale (B, m, d)."""
        self.calls += 1
        h = self.stack(self.in_proj(tokens), causal=not self.bidirectional)
        out = self.head(h)
        mu = out[..., : self.d]
        log_scale = clip(out[..., self.d :], -LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)
        return mu, log_scale

    def named_parameters(self, prefix: str):
        yield from self.in_proj.named_parameters(f"{prefix}/in_proj")
        yield from self.stack.named_parameters(f"{prefix}/stack")
        yield from self.head.named_parameters(f"{prefix}/head")


class AfBlock:
    def __init__(self, conditioner: FlowConditioner, index: int):
        self.conditioner = conditioner
        self.index = index

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """One parallel pass: returns the transformed sequence and the
        per-item logdet (sum of log-scales over tokens 2..N)."""
        b, n, d = z.shape
        if n == 1:
            return z, Tensor(np.zeros(b, dtype=z.dtype))
        mu, log_scale = self.conditioner(z[:, :-1])
        if not np.isfinite(mu.data).all() or not np.isfinite(log_scale.data).all():
            bad = mu.data if not np.isfinite(mu.data).all() else log_scale.data
            raise NumericsError(self.index, _first_bad_position(bad) + 1, "conditioner output")
        transformed = (z[:, 1:] - mu) * exp(log_scale)
        out = concat([z[:, :1], transformed], axis=1)
        if not np.isfinite(out.data).all():
            raise NumericsError(self.index, _first_bad_position(out.data), "transformed token")
        logdet = log_scale.sum(axis=(1, 2))
        return out, logdet

    def inverse(self, z_next: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sequential inverse: token i is recovered from the already-recovered
        prefix. Returns (z_prev, per-item forward-convention logdet)."""
        b, n, d = z_next.shape
        x = z_next.copy()
        logdet = np.zeros(b, dtype=z_next.dtype)
        with no_grad():
            for i in range(1, n):
                mu, log_scale = self.conditioner(Tensor(x[:, :i]))
                mu_i = mu.data[:, -1]
                a_i = log_scale.data[:, -1]
                x[:, i] = z_next[:, i] / np.exp(a_i) + mu_i
                if not np.isfinite(x[:, i]).all():
                    raise NumericsError(self.index, i, "recovered token")
                logdet += a_i.sum(axis=-1)
        return x, logdet

    def named_parameters(self, prefix: str):
        yield from self.conditioner.named_parameters(f"{prefix}/cond")


@dataclass
class FlowTrace:
    """States Z^0..Z^n in original token order, plus the accumulated logdet."""

    states: list[np.ndarray] = field(default_factory=list)
    logdet: np.ndarray | None = None


class Flow:
    def __init__(
        self,
        d: int,
        n_blocks: int,
        width: int,
        n_layers: int,
        n_heads: int,
        max_positions: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.d = d
        self.width = width
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_positions = max_positions
        self.dtype = dtype
        self.blocks = [
            AfBlock(
                FlowConditioner(d, width, n_layers, n_heads, max_positions, rng, dtype),
                index=t,
            )
            for t in range(n_blocks)
        ]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, FlowTrace]:
        """Full forward pass: returns (latent, logdet, trace).

        Per block: reverse token order, transform, restore order. The
        permutations are volume-preserving, so the logdet is the sum of the
        block logdets. Trace states are recorded after the order restore.
        """
        trace = FlowTrace(states=[x.data.copy()])
        cur = x
        total = Tensor(np.zeros(x.shape[0], dtype=x.dtype))
        for block in self.blocks:
            rev = flip(cur, axis=1)
            out, logdet = block.forward(rev)
            cur = flip(out, axis=1)
            total = total + logdet
            trace.states.append(cur.data.copy())
        trace.logdet = total.data.copy()
        return cur, total, trace

    def inverse(self, z: np.ndarray, return_logdet: bool = False):
        """Sequential inverse through all blocks in reverse order.

        Cost is one conditioner evaluation per recovered token per block.
        The optional logdet is reported in the forward convention (logdet of
        the forward map at the recovered point).
        """
        squeeze = z.ndim == 2
        cur = z[None] if squeeze else z
        total = np.zeros(cur.shape[0], dtype=cur.dtype)
        for block in reversed(self.blocks):
            rev = np.flip(cur, axis=1).copy()
            prev, logdet = block.inverse(rev)
            cur = np.flip(prev, axis=1).copy()
            total += logdet
        if squeeze:
            cur = cur[0]
        return (cur, total) if return_logdet else cur

    def named_parameters(self, prefix: str = "flow"):
        for t, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}/block{t}")

    def conditioner_calls(self) -> int:
        return sum(b.conditioner.calls for b in self.blocks)
