"""End-to-end maximum-likelihood training.

The loss is the negative log-likelihood per dimension: informative and
redundant token likelihoods plus the flow log-determinant, divided by the
token count times the token dimension. AdamW uses decoupled weight decay
with bias-corrected moments; the learning rate warms up linearly and decays
on a cosine; dequantization noise anneals on its own cosine. Checkpoints
capture models, optimizer moments, step, and rng state, so a resumed run
reproduces the unbroken one bit-for-bit.
"""

from __future__ import annotations

import csv
import os
from typing import IO

import numpy as np

from .ar import NULL_CLASS, ArModel, DimSplit
from .checkpoint import (
    CheckpointError,
    bytes_to_tensor,
    decode_rng_state,
    encode_rng_state,
    load_checkpoint,
    save_checkpoint,
    tensor_to_bytes,
)
from .config import TrainConfig, config_from_text, config_to_text
from .data import NoiseSchedule, dequantize, noise_sigma, patchify, synth_dataset
from .flow import Flow
from .tensor import Tensor, backward, flip, no_grad

LN2 = float(np.log(2.0))

METRICS_HEADER = [
    "step",
    "loss",
    "nll_inf",
    "nll_red",
    "logdet",
    "bits_per_dim",
    "lr",
    "sigma_noise",
    "grad_norm",
]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_max over the warmup, then cosine lr_max -> lr_min."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Decoupled weight decay applied separately from the moment update.

    Moments live in one flat buffer per kind; each parameter's slice is
    exposed through the ``m``/``v`` mappings so checkpointing stays
    name-addressed while the update runs in a handful of vectorized ops.
    """

    def __init__(self, named_params: dict[str, Tensor], beta1=0.9, beta2=0.95,
                 weight_decay=0.03, eps=1e-8):
        self.params = dict(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        dtype = next(iter(self.params.values())).data.dtype if self.params else np.float32
        total = sum(p.data.size for p in self.params.values())
        self._m_flat = np.zeros(total, dtype=dtype)
        self._v_flat = np.zeros(total, dtype=dtype)
        self._g_flat = np.zeros(total, dtype=dtype)
        self._slices: dict[str, slice] = {}
        offset = 0
        for name, p in self.params.items():
            self._slices[name] = slice(offset, offset + p.data.size)
            offset += p.data.size

    @property
    def m(self) -> dict[str, np.ndarray]:
        return {k: self._m_flat[s].reshape(self.params[k].data.shape) for k, s in self._slices.items()}

    @m.setter
    def m(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            self._m_flat[self._slices[k]] = np.asarray(arr).reshape(-1)

    @property
    def v(self) -> dict[str, np.ndarray]:
        return {k: self._v_flat[s].reshape(self.params[k].data.shape) for k, s in self._slices.items()}

    @v.setter
    def v(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            self._v_flat[self._slices[k]] = np.asarray(arr).reshape(-1)

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        g = self._g_flat
        for name, p in self.params.items():
            sl = self._slices[name]
            if p.grad is None:
                g[sl] = 0.0
            else:
                g[sl] = p.grad.reshape(-1)
        m, v = self._m_flat, self._v_flat
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        decay = 1.0 - lr * self.weight_decay
        for name, p in self.params.items():
            if self.weight_decay:
                p.data *= decay
            p.data -= update[self._slices[name]].reshape(p.data.shape)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class MetricsWriter:
    """Append-only CSV with the pinned column order."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self._fh: IO[str] | None = None

    def _ensure(self) -> IO[str]:
        if self._fh is None:
            fresh = not os.path.exists(self.path) or os.path.getsize(self.path) == 0
            self._fh = open(self.path, "a", newline="")
            self._writer = csv.writer(self._fh)
            if fresh:
                self._writer.writerow(METRICS_HEADER)
        return self._fh

    def write(self, row: dict) -> None:
        self._ensure()
        self._writer.writerow([row[k] for k in METRICS_HEADER])
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.dtype = config.np_dtype
        self.schedule = NoiseSchedule(config.sigma_start, config.sigma_end, config.total_steps)
        init_rng = np.random.default_rng(config.seed)
        self.flow = Flow(
            d=config.token_dim,
            n_blocks=config.n_blocks,
            width=config.block_width,
            n_layers=config.block_layers,
            n_heads=config.n_heads,
            max_positions=config.max_tokens,
            rng=init_rng,
            dtype=self.dtype,
        )
        self.ar = ArModel(
            split=DimSplit(d=config.token_dim, d_inf=config.d_inf),
            k_inf=config.k_inf,
            k_red=config.k_red,
            width=config.ar_width,
            n_layers=config.ar_layers,
            n_heads=config.n_heads,
            class_count=config.class_count,
            cond_repeat=config.cond_repeat,
            max_tokens=config.max_tokens,
            rng=init_rng,
            dtype=self.dtype,
            redundant_prior=config.redundant_prior,
        )
        self.student = None
        self.opt = AdamW(
            self.named_parameters(),
            beta1=config.beta1,
            beta2=config.beta2,
            weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.train_images, self.train_labels = synth_dataset(
            config.dataset, config.class_count, config.train_size,
            seed=config.seed + 1000, size=config.image_size, channels=config.channels,
        )
        self.holdout_images, self.holdout_labels = synth_dataset(
            config.dataset, config.class_count, config.holdout_size,
            seed=config.seed + 2000, size=config.image_size, channels=config.channels,
        )

    # ------------------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = dict(self.flow.named_parameters("flow"))
        params.update(self.ar.named_parameters("ar"))
        return params

    def total_loss(self, images: np.ndarray, labels: np.ndarray, step: int,
                   rng: np.random.Generator) -> tuple[Tensor, dict]:
        """Dequantize at the annealed noise level, run the flow, score the
        latents, and assemble loss = (nll_inf + nll_red + neg_logdet) / (N*d),
        averaged over the batch. Labels drop to the null condition with the
        configured probability."""
        cfg = self.config
        sigma = noise_sigma(step, self.schedule)
        noisy = dequantize(images.astype(self.dtype), sigma, rng)
        tokens = patchify(noisy, cfg.patch)
        drop = rng.random(len(images)) < cfg.cond_dropout
        ids = np.where(drop, NULL_CLASS, labels)

        z, logdet, _ = self.flow.forward(Tensor(tokens))
        z_ar = flip(z, axis=1) if cfg.final_permute else z
        if cfg.stop_flow_gradient:
            z_ar = z_ar.detach()
        ll_inf, ll_red = self.ar.sequence_log_lik(z_ar, ids)
        denom = cfg.n_tokens * cfg.token_dim
        loss = ((ll_inf + ll_red + logdet) * (-1.0 / denom)).mean()
        parts = {
            "nll_inf": float(-ll_inf.data.mean()) / denom,
            "nll_red": float(-ll_red.data.mean()) / denom,
            "neg_logdet": float(-logdet.data.mean()) / denom,
            "logdet_per_sample": logdet.data.copy(),
            "sigma_noise": sigma,
        }
        if not np.isfinite(loss.data):
            bad = [k for k in ("nll_inf", "nll_red", "neg_logdet") if not np.isfinite(parts[k])]
            raise RuntimeError(f"non-finite loss at step {step}: diverging parts {bad or 'unknown'}")
        return loss, parts

    def train_step(self) -> dict:
        cfg = self.config
        idx = self.rng.choice(len(self.train_images), size=cfg.batch_size, replace=False)
        loss, parts = self.total_loss(
            self.train_images[idx], self.train_labels[idx], self.step, self.rng
        )
        backward(loss)
        grad_norm = clip_global_norm(self.opt.params, cfg.grad_clip)
        lr = lr_at(self.step, cfg)
        self.opt.step(lr)
        self.opt.zero_grad()
        self.step += 1
        loss_value = float(loss.data)
        return {
            "step": self.step,
            "loss": loss_value,
            "nll_inf": parts["nll_inf"],
            "nll_red": parts["nll_red"],
            "logdet": float(parts["logdet_per_sample"].mean()),
            "bits_per_dim": loss_value / LN2,
            "lr": lr,
            "sigma_noise": parts["sigma_noise"],
            "grad_norm": grad_norm,
        }

    def run(self, steps: int | None = None, metrics: MetricsWriter | None = None,
            ckpt_path: str | None = None, progress: bool = False) -> dict:
        cfg = self.config
        target = cfg.total_steps if steps is None else min(self.step + steps, cfg.total_steps)
        last = {}
        while self.step < target:
            last = self.train_step()
            if metrics is not None and (self.step % cfg.log_every == 0 or self.step == target):
                metrics.write(last)
            if ckpt_path is not None and cfg.ckpt_every and self.step % cfg.ckpt_every == 0:
                self.save(ckpt_path)
            if progress and self.step % 500 == 0:
                print(f"  step {self.step}/{target}  loss {last['loss']:.4f}  "
                      f"bits/dim {last['bits_per_dim']:.4f}", flush=True)
        if ckpt_path is not None:
            self.save(ckpt_path)
        return last

    # ------------------------------------------------------------------
    # evaluation

    def eval_tokens(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Held-out scoring convention: dequantize at the final noise level."""
        noisy = dequantize(images.astype(self.dtype), self.config.sigma_end, rng)
        return patchify(noisy, self.config.patch)

    def evaluate(self, images: np.ndarray, labels: np.ndarray, seed: int = 1234) -> dict:
        cfg = self.config
        rng = np.random.default_rng(seed)
        tokens = self.eval_tokens(images, rng)
        denom = cfg.n_tokens * cfg.token_dim
        with no_grad():
            z, logdet, _ = self.flow.forward(Tensor(tokens))
            z_ar = flip(z, axis=1) if cfg.final_permute else z
            ll_inf, ll_red = self.ar.sequence_log_lik(z_ar, labels)
        nats = -(ll_inf.data + ll_red.data + logdet.data) / denom
        train_tokens = self.eval_tokens(self.train_images, np.random.default_rng(seed + 1))
        baseline_bits = gaussian_baseline_bits_per_dim(train_tokens, tokens)
        return {
            "nats_per_dim": float(nats.mean()),
            "bits_per_dim": float(nats.mean()) / LN2,
            "baseline_bits_per_dim": baseline_bits,
            "per_sample_nats": nats,
            "per_sample_logdet": logdet.data.copy(),
        }

    # ------------------------------------------------------------------
    # persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        tensors = {name: p.data for name, p in self.named_parameters().items()}
        if self.student is not None:
            tensors.update({name: p.data for name, p in self.student.named_parameters("student")})
        for name in list(self.opt.params):
            tensors[f"opt/m/{name}"] = self.opt.m[name]
            tensors[f"opt/v/{name}"] = self.opt.v[name]
        tensors["meta/step"] = np.array(float(self.step), dtype=self.dtype)
        tensors["meta/opt_t"] = np.array(float(self.opt.t), dtype=self.dtype)
        tensors["meta/rng"] = encode_rng_state(self.rng, self.dtype)
        tensors["meta/config"] = bytes_to_tensor(config_to_text(self.config).encode(), self.dtype)
        return tensors

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Trainer":
        tensors, _ = load_checkpoint(path)
        if "meta/config" not in tensors:
            raise CheckpointError("checkpoint carries no config echo")
        config = config_from_text(tensor_to_bytes(tensors["meta/config"]).decode())
        trainer = cls(config)
        has_student = any(name.startswith("student/") for name in tensors)
        if has_student:
            from .distill import init_student

            trainer.student = init_student(trainer.flow)
        expected = set(trainer.state_dict())
        got = set(tensors)
        if got != expected:
            unknown = sorted(got - expected)[:5]
            missing = sorted(expected - got)[:5]
            raise CheckpointError(f"tensor names differ: unknown={unknown} missing={missing}")
        params = trainer.named_parameters()
        if trainer.student is not None:
            params.update(trainer.student.named_parameters("student"))
        for name, p in params.items():
            if tensors[name].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            p.data = tensors[name].astype(trainer.dtype)
        trainer.opt.m = {name: tensors[f"opt/m/{name}"] for name in trainer.opt.params}
        trainer.opt.v = {name: tensors[f"opt/v/{name}"] for name in trainer.opt.params}
        trainer.step = int(tensors["meta/step"].reshape(())[()])
        trainer.opt.t = int(tensors["meta/opt_t"].reshape(())[()])
        trainer.rng = decode_rng_state(tensors["meta/rng"])
        return trainer


def gaussian_baseline_bits_per_dim(train_tokens: np.ndarray, eval_tokens: np.ndarray) -> float:
    """Closed-form NLL of one Gaussian per token channel, fitted on the
    training tokens (pooled over samples and positions), scored on the
    evaluation tokens. The reference the learned model must beat."""
    flat_train = train_tokens.reshape(-1, train_tokens.shape[-1]).astype(np.float64)
    flat_eval = eval_tokens.reshape(-1, eval_tokens.shape[-1]).astype(np.float64)
    mu = flat_train.mean(axis=0)
    var = flat_train.var(axis=0) + 1e-12
    nll = 0.5 * np.log(2.0 * np.pi * var) + (flat_eval - mu) ** 2 / (2.0 * var)
    return float(nll.mean()) / LN2
