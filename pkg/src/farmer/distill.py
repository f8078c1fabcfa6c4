"""One-step distillation of the sequential flow inverse.

The student mirrors the teacher's blocks in reverse order with bidirectional
attention, so each block applies the inverse-form transform
x_i = y_i / sigma_i + mu_i in a single parallel pass. It is initialized as a
weight copy of the teacher and trained so that its cascaded block outputs
reproduce the teacher's recorded forward trace, after perturbing the final
latent with uniform-scaled Gaussian noise. Inversion cost drops from one
conditioner evaluation per token per block to one per block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import patchify
from .flow import Flow, FlowConditioner
from .nn import copy_parameters
from .tensor import Tensor, concat, exp, flip, no_grad


class StudentBlock:
    """Parallel inverse-form block: same permutation sandwich as the teacher,
    but the conditioner sees the latent side of the transform with no causal
    mask, and the arithmetic is the algebraic inverse of the teacher's."""

    def __init__(self, conditioner: FlowConditioner, index: int):
        self.conditioner = conditioner
        self.index = index

    def forward(self, z: Tensor) -> Tensor:
        b, n, d = z.shape
        if n == 1:
            return z
        rev = flip(z, axis=1)
        mu, log_scale = self.conditioner(rev[:, :-1])
        transformed = rev[:, 1:] / exp(log_scale) + mu
        out = concat([rev[:, :1], transformed], axis=1)
        return flip(out, axis=1)

    def named_parameters(self, prefix: str):
        yield from self.conditioner.named_parameters(f"{prefix}/cond")


class StudentFlow:
    """Teacher blocks reversed: student block j undoes teacher block n-1-j."""

    def __init__(self, blocks: list[StudentBlock], dtype):
        self.blocks = blocks
        self.dtype = dtype

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def cascade(self, z_noisy: Tensor) -> list[Tensor]:
        """Graph-mode pass feeding each block its predecessor's output.
        Returns the per-block outputs, which target teacher states
        Z^{n-1} .. Z^0."""
        outputs = []
        cur = z_noisy
        for block in self.blocks:
            cur = block.forward(cur)
            outputs.append(cur)
        return outputs

    def inverse(self, z: np.ndarray, return_logdet: bool = False):
        """Single parallel pass per block: n conditioner evaluations total.
        The optional logdet mirrors the teacher's forward convention (sum of
        the student's log-scales)."""
        squeeze = z.ndim == 2
        cur = z[None] if squeeze else z
        total = np.zeros(cur.shape[0], dtype=self.dtype)
        with no_grad():
            t = Tensor(np.asarray(cur, dtype=self.dtype))
            for block in self.blocks:
                if t.shape[1] > 1:
                    rev = flip(t, axis=1)
                    mu, log_scale = block.conditioner(rev[:, :-1])
                    total += log_scale.data.sum(axis=(1, 2))
                    transformed = rev[:, 1:] / exp(log_scale) + mu
                    t = flip(concat([rev[:, :1], transformed], axis=1), axis=1)
        out = t.data[0] if squeeze else t.data
        return (out, total) if return_logdet else out

    def named_parameters(self, prefix: str = "student"):
        for j, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}/block{j}")

    def conditioner_calls(self) -> int:
        return sum(b.conditioner.calls for b in self.blocks)


def init_student(teacher: Flow, rng: np.random.Generator | None = None) -> StudentFlow:
    """Copy the teacher blockwise in reverse order and drop the attention
    masks. Immediately after init the student's parameters equal the
    teacher's exactly."""
    rng = rng or np.random.default_rng(0)
    blocks = []
    for j, teacher_block in enumerate(reversed(teacher.blocks)):
        cond = FlowConditioner(
            d=teacher.d,
            width=teacher.width,
            n_layers=teacher.n_layers,
            n_heads=teacher.n_heads,
            max_positions=teacher.max_positions,
            rng=rng,
            dtype=teacher.dtype,
            bidirectional=True,
        )
        copy_parameters(teacher_block.conditioner, cond)
        blocks.append(StudentBlock(cond, index=j))
    return StudentFlow(blocks, dtype=teacher.dtype)


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-4
    noise_lo: float = 0.0
    noise_hi: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("steps, batch_size and lr must be positive")
        if not 0 <= self.noise_lo <= self.noise_hi:
            raise ValueError("need 0 <= noise_lo <= noise_hi")


def distill_step(
    images: np.ndarray,
    teacher: Flow,
    student: StudentFlow,
    rng: np.random.Generator,
    patch: int,
    noise_lo: float = 0.0,
    noise_hi: float = 0.3,
) -> tuple[Tensor, list[float]]:
    """One distillation loss evaluation.

    The teacher runs without a graph, so no gradient can reach it. The noise
    scale is drawn per batch item. Loss is the blockwise mean squared error
    between the student cascade and the reversed teacher trace, averaged
    over blocks.
    """
    tokens = patchify(images, patch).astype(teacher.dtype)
    with no_grad():
        _, _, trace = teacher.forward(Tensor(tokens))
    n = teacher.n_blocks
    scale = rng.uniform(noise_lo, noise_hi, size=(tokens.shape[0], 1, 1))
    eps = rng.standard_normal(tokens.shape)
    z_noisy = (trace.states[-1] + scale * eps).astype(teacher.dtype)
    outputs = student.cascade(Tensor(z_noisy))
    per_block: list[float] = []
    total = None
    for j, out in enumerate(outputs):
        target = trace.states[n - 1 - j]
        if not np.isfinite(out.data).all():
            raise RuntimeError(f"non-finite student output at block {j}")
        diff = out - Tensor(target)
        block_loss = (diff * diff).mean()
        per_block.append(float(block_loss.data))
        total = block_loss if total is None else total + block_loss
    return total * (1.0 / n), per_block


def run_distillation(
    teacher: Flow,
    student: StudentFlow,
    images: np.ndarray,
    patch: int,
    cfg: DistillConfig,
    on_step=None,
    progress: bool = False,
) -> list[float]:
    """Train the student against the frozen teacher; returns the loss series.

    Optimizer settings mirror the trainer's AdamW at a constant learning
    rate. ``on_step(step, loss)`` fires after every update when given.
    """
    from .tensor import backward
    from .training import AdamW

    opt = AdamW(dict(student.named_parameters("student")), beta1=0.9, beta2=0.95,
                weight_decay=0.03)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    batch = min(cfg.batch_size, len(images))
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(images), size=batch, replace=False)
        loss, _ = distill_step(images[idx], teacher, student, rng, patch,
                               cfg.noise_lo, cfg.noise_hi)
        backward(loss)
        opt.step(cfg.lr)
        opt.zero_grad()
        value = float(loss.data)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if progress and step % 500 == 0:
            print(f"  distill step {step}/{cfg.steps}  mse {value:.6f}", flush=True)
    return losses
