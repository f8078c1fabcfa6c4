"""Scikit-learn style estimator facade over the full model stack.

``Farmer`` is a density estimator with the fit/transform/sample/score
surface of sklearn's mixture models: ``fit`` trains the flow and the
autoregressive density end to end by exact maximum likelihood,
``transform``/``inverse_transform`` move between images and latent token
sequences, ``sample`` draws class-conditional images through guided
resampling, and ``score_samples`` returns exact per-image log-likelihoods.
Hyperparameters mirror the run configuration field for field, so
``get_params``/``set_params`` compose with sklearn tooling.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import TrainConfig
from .data import unpatchify
from .sampler import CfgConfig, generate
from .training import LN2, MetricsWriter, Trainer


def validate_images(X: np.ndarray, image_size: int, channels: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (image_size, image_size, channels):
        raise ValueError(
            f"expected images (n, {image_size}, {image_size}, {channels}), got {X.shape}"
        )
    return X


def validate_labels(y, n: int, class_count: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= class_count:
        raise ValueError(f"labels must lie in [0, {class_count})")
    return y


class Farmer(BaseEstimator):
    """Exact-likelihood image density estimator and class-conditional sampler."""

    def __init__(
        self,
        image_size: int = 16,
        channels: int = 3,
        patch: int = 4,
        class_count: int = 4,
        n_blocks: int = 4,
        block_layers: int = 1,
        block_width: int = 64,
        ar_layers: int = 2,
        ar_width: int = 128,
        n_heads: int = 4,
        d_inf: int = 8,
        k_inf: int = 8,
        k_red: int = 16,
        cond_repeat: int = 4,
        redundant_prior: str = "learned",
        final_permute: bool = False,
        max_tokens: int = 80,
        total_steps: int = 20_000,
        batch_size: int = 32,
        lr_max: float = 1e-4,
        lr_min: float = 1e-6,
        warmup_steps: int = 500,
        beta1: float = 0.9,
        beta2: float = 0.95,
        weight_decay: float = 0.03,
        grad_clip: float = 1.0,
        sigma_start: float = 0.1,
        sigma_end: float = 0.005,
        cond_dropout: float = 0.1,
        dtype: str = "float32",
        seed: int = 0,
        log_every: int = 50,
        verbose: bool = False,
    ):
        self.image_size = image_size
        self.channels = channels
        self.patch = patch
        self.class_count = class_count
        self.n_blocks = n_blocks
        self.block_layers = block_layers
        self.block_width = block_width
        self.ar_layers = ar_layers
        self.ar_width = ar_width
        self.n_heads = n_heads
        self.d_inf = d_inf
        self.k_inf = k_inf
        self.k_red = k_red
        self.cond_repeat = cond_repeat
        self.redundant_prior = redundant_prior
        self.final_permute = final_permute
        self.max_tokens = max_tokens
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.sigma_start = sigma_start
        self.sigma_end = sigma_end
        self.cond_dropout = cond_dropout
        self.dtype = dtype
        self.seed = seed
        self.log_every = log_every
        self.verbose = verbose

    # ------------------------------------------------------------------

    def _config(self) -> TrainConfig:
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        params = {k: v for k, v in self.get_params().items() if k in fields}
        return TrainConfig(**params)

    def _require_fitted(self) -> Trainer:
        trainer = getattr(self, "trainer_", None)
        if trainer is None:
            raise NotFittedError("this Farmer instance is not fitted yet; call fit first")
        return trainer

    def fit(self, X, y, steps: int | None = None, metrics: MetricsWriter | None = None):
        """Train on images X (n, H, W, C) in [0, 1] with integer labels y.

        The images replace the trainer's synthetic corpus; a held-out tail
        (one batch worth) is reserved for scoring.
        """
        config = self._config()
        X = validate_images(X, config.image_size, config.channels)
        y = validate_labels(y, len(X), config.class_count)
        trainer = Trainer(config)
        split = max(len(X) - config.batch_size, config.batch_size)
        split = min(split, len(X))
        trainer.train_images, trainer.train_labels = X[:split], y[:split]
        if split < len(X):
            trainer.holdout_images, trainer.holdout_labels = X[split:], y[split:]
        trainer.run(steps=steps, metrics=metrics, progress=self.verbose)
        self.trainer_ = trainer
        self.n_tokens_ = config.n_tokens
        self.token_dim_ = config.token_dim
        return self

    def transform(self, X) -> np.ndarray:
        """Images to latent token sequences (n, N, d) via the flow forward."""
        trainer = self._require_fitted()
        from .tensor import Tensor, no_grad

        X = validate_images(X, trainer.config.image_size, trainer.config.channels)
        tokens = trainer.eval_tokens(X, np.random.default_rng(self.seed + 17))
        with no_grad():
            z, _, _ = trainer.flow.forward(Tensor(tokens))
        return z.data

    def inverse_transform(self, Z) -> np.ndarray:
        """Latent sequences back to images through the sequential inverse."""
        trainer = self._require_fitted()
        cfg = trainer.config
        Z = np.asarray(Z, dtype=trainer.dtype)
        if Z.ndim == 2:
            Z = Z[None]
        tokens = trainer.flow.inverse(Z)
        return unpatchify(tokens, cfg.patch, cfg.image_size, cfg.image_size, cfg.channels)

    def score_samples(self, X, y=None) -> np.ndarray:
        """Exact log-likelihood of each image in nats (noise-dequantized)."""
        trainer = self._require_fitted()
        cfg = trainer.config
        X = validate_images(X, cfg.image_size, cfg.channels)
        if y is None:
            labels = np.full(len(X), -1, dtype=np.int64)
        else:
            labels = validate_labels(y, len(X), cfg.class_count)
        report = trainer.evaluate(X, labels, seed=self.seed + 29)
        return -report["per_sample_nats"] * cfg.n_tokens * cfg.token_dim

    def score(self, X, y=None) -> float:
        return float(self.score_samples(X, y).mean())

    def bits_per_dim(self, X, y=None) -> float:
        trainer = self._require_fitted()
        cfg = trainer.config
        nats_per_dim = -self.score(X, y) / (cfg.n_tokens * cfg.token_dim)
        return nats_per_dim / LN2

    def sample(
        self,
        n_samples: int = 1,
        class_id: int | None = 0,
        cfg: CfgConfig | None = None,
        seed: int = 0,
        use_student: bool = False,
    ) -> np.ndarray:
        """Draw class-conditional images via resampling-based guidance."""
        trainer = self._require_fitted()
        config = trainer.config
        cfg = cfg or CfgConfig()
        if use_student:
            if trainer.student is None:
                raise ValueError("no distilled student available; call distill first")
            inverter = trainer.student
        else:
            inverter = trainer.flow
        images = np.zeros(
            (n_samples, config.image_size, config.image_size, config.channels),
            dtype=np.float64,
        )
        for i, seq in enumerate(np.random.SeedSequence(seed).spawn(n_samples)):
            images[i] = generate(
                trainer.ar,
                inverter,
                class_id,
                cfg,
                np.random.default_rng(seq),
                n_tokens=config.n_tokens,
                patch=config.patch,
                height=config.image_size,
                width=config.image_size,
                channels=config.channels,
                final_permute=config.final_permute,
            )
        return images

    def distill(self, steps: int = 5000, seed: int = 0, batch_size: int | None = None):
        """Train the one-step student against the fitted flow."""
        trainer = self._require_fitted()
        from .distill import DistillConfig, init_student, run_distillation

        student = init_student(trainer.flow)
        cfg = DistillConfig(
            steps=steps,
            batch_size=batch_size or trainer.config.batch_size,
            seed=seed,
        )
        run_distillation(trainer.flow, student, trainer.train_images,
                         trainer.config.patch, cfg, progress=self.verbose)
        trainer.student = student
        self.student_ = student
        return self
