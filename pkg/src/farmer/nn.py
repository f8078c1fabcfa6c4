"""Transformer building blocks on top of the autodiff tensors.

Pre-norm blocks, multi-head attention with learned absolute position
embeddings, and GELU MLPs. Output heads are zero-initialized so freshly
constructed flow blocks are exact identities and density heads start at the
standard normal.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, attention, gelu, layer_norm, matmul, reshape, transpose


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=dtype)
        else:
            w = (rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1]))
        out = matmul(flat, self.w) + self.b
        return reshape(out, lead + (self.w.shape[1],))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}/w", self.w
        yield f"{prefix}/b", self.b


class LayerNorm:
    def __init__(self, width: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}/gamma", self.gamma
        yield f"{prefix}/beta", self.beta


class MultiHeadAttention:
    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.wq = Linear(width, width, rng, dtype)
        self.wk = Linear(width, width, rng, dtype)
        self.wv = Linear(width, width, rng, dtype)
        self.wo = Linear(width, width, rng, dtype)

    def __call__(self, x: Tensor, causal: bool = True) -> Tensor:
        b, n, width = x.shape
        def split_heads(t: Tensor) -> Tensor:
            t = reshape(t, (b, n, self.n_heads, self.head_dim))
            return transpose(t, (0, 2, 1, 3))

        q, k, v = split_heads(self.wq(x)), split_heads(self.wk(x)), split_heads(self.wv(x))
        ctx = attention(q, k, v, causal=causal)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, width))
        return self.wo(ctx)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.wq.named_parameters(f"{prefix}/wq")
        yield from self.wk.named_parameters(f"{prefix}/wk")
        yield from self.wv.named_parameters(f"{prefix}/wv")
        yield from self.wo.named_parameters(f"{prefix}/wo")


class TransformerLayer:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(width, dtype)
        self.attn = MultiHeadAttention(width, n_heads, rng, dtype)
        self.ln2 = LayerNorm(width, dtype)
        self.fc1 = Linear(width, mlp_ratio * width, rng, dtype)
        self.fc2 = Linear(mlp_ratio * width, width, rng, dtype)

    def __call__(self, x: Tensor, causal: bool = True) -> Tensor:
        x = x + self.attn(self.ln1(x), causal=causal)
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.ln1.named_parameters(f"{prefix}/ln1")
        yield from self.attn.named_parameters(f"{prefix}/attn")
        yield from self.ln2.named_parameters(f"{prefix}/ln2")
        yield from self.fc1.named_parameters(f"{prefix}/fc1")
        yield from self.fc2.named_parameters(f"{prefix}/fc2")


class TransformerStack:
    """Position embedding plus a stack of pre-norm layers and a final norm.

    Operates on already-embedded inputs of shape (batch, positions, width).
    Absolute position embeddings make prefix evaluation agree exactly with
    full-sequence evaluation under the causal mask, which the sequential flow
    inverse and the token-by-token sampler both rely on.
    """

    def __init__(
        self,
        width: int,
        n_layers: int,
        n_heads: int,
        max_positions: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.max_positions = max_positions
        self.pos_emb = Tensor(
            (0.02 * rng.standard_normal((max_positions, width))).astype(dtype), requires_grad=True
        )
        self.layers = [TransformerLayer(width, n_heads, rng, dtype) for _ in range(n_layers)]
        self.ln_out = LayerNorm(width, dtype)

    def __call__(self, x: Tensor, causal: bool = True) -> Tensor:
        n = x.shape[1]
        if n > self.max_positions:
            raise ValueError(f"sequence length {n} exceeds max_positions {self.max_positions}")
        h = x + self.pos_emb[:n]
        for layer in self.layers:
            h = layer(h, causal=causal)
        return self.ln_out(h)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}/pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}/layer{i}")
        yield from self.ln_out.named_parameters(f"{prefix}/ln_out")


def parameters_of(module) -> list[Tensor]:
    return [t for _, t in module.named_parameters("")]


def copy_parameters(src, dst) -> None:
    """Copy parameter values between two modules with identical naming."""
    src_params = dict(src.named_parameters("m"))
    dst_params = dict(dst.named_parameters("m"))
    if src_params.keys() != dst_params.keys():
        raise ValueError("parameter name sets differ; modules are not twins")
    for name, tensor in dst_params.items():
        tensor.data = src_params[name].data.copy()
