"""Command-line surface: train, sample, distill, eval, bench, roundtrip.

Every command validates its configuration before touching the filesystem,
runs deterministically under a fixed --seed (bit-reproducibly in 64-bit
mode), and writes a plain-text manifest listing every artifact it produced
along with the config echo, seeds, and checkpoint content hash.
"""

from __future__ import annotations

import datetime
import os
import sys
import time

import click
import numpy as np

from .checkpoint import checkpoint_hash
from .config import config_to_text, load_config_file, make_config
from .data import synth_dataset
from .distill import DistillConfig, init_student, run_distillation
from .ppm import read_dataset_dir, write_grid, write_ppm
from .sampler import CfgConfig, generate, generate_latents
from .tensor import Tensor, no_grad
from .training import MetricsWriter, Trainer


def _write_manifest(out_dir: str, command: str, info: dict, artifacts: list[str]) -> str:
    path = os.path.join(out_dir, f"manifest_{command}.txt")
    lines = [
        f"command: {command}",
        f"created: {datetime.datetime.now().isoformat(timespec='seconds')}",
        f"argv: {' '.join(sys.argv)}",
    ]
    for key, value in info.items():
        if key == "config":
            lines.append("config: |")
            lines.extend("  " + l for l in value.strip().splitlines())
        else:
            lines.append(f"{key}: {value}")
    lines.append("artifacts:")
    lines.extend(f"  - {name}" for name in artifacts)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.ClickException(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _build_config(config_path, seed, f64, overrides):
    try:
        file_over = load_config_file(config_path) if config_path else {}
        raw = _parse_overrides(overrides)
        from .config import parse_config_text

        typed = parse_config_text("\n".join(f"{k}={v}" for k, v in raw.items()))
        if seed is not None:
            typed["seed"] = seed
        if f64:
            typed["dtype"] = "float64"
        return make_config(file_over, typed)
    except ValueError as exc:
        raise click.ClickException(str(exc))


def _load_trainer(checkpoint: str) -> Trainer:
    from .checkpoint import CheckpointError

    try:
        return Trainer.load(checkpoint)
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        raise click.ClickException(f"cannot load checkpoint {checkpoint}: {exc}")


@click.group()
def main():
    """Invertible-flow + autoregressive-mixture image model, desk scale."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", default="run", show_default=True)
@click.option("--f64", is_flag=True, help="train in float64")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="override any config key (repeatable)")
@click.option("--quiet", is_flag=True)
def train(config_path, seed, out_dir, f64, overrides, quiet):
    """Train from scratch on the configured synthetic corpus."""
    cfg = _build_config(config_path, seed, f64, overrides)
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(cfg)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.farm")
    metrics = MetricsWriter(metrics_path)
    try:
        trainer.run(metrics=metrics, ckpt_path=ckpt_path, progress=not quiet)
    except RuntimeError as exc:
        raise click.ClickException(f"training diverged: {exc}")
    finally:
        metrics.close()
    _write_manifest(out_dir, "train", {
        "seed": cfg.seed,
        "checkpoint_hash": checkpoint_hash(ckpt_path),
        "config": config_to_text(cfg),
    }, ["checkpoint.farm", "metrics.csv"])
    click.echo(f"trained {trainer.step} steps -> {ckpt_path}")


def _sampling_options(fn):
    options = [
        click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False)),
        click.option("--class", "class_id", type=int, default=0, show_default=True),
        click.option("--count", type=int, default=8, show_default=True),
        click.option("--w", type=float, default=1.0, show_default=True),
        click.option("--s_c", type=int, default=5, show_default=True),
        click.option("--s_u", type=int, default=5, show_default=True),
        click.option("--t_pi", type=float, default=1.0, show_default=True),
        click.option("--t_sigma", type=float, default=1.0, show_default=True),
        click.option("--t_pi_v", type=float, default=1.0, show_default=True),
        click.option("--t_sigma_v", type=float, default=1.0, show_default=True),
        click.option("--t_s", type=float, default=1.0, show_default=True),
        click.option("--redundant-mult", type=int, default=4, show_default=True),
        click.option("--redundant-scale", type=float, default=1.0, show_default=True),
        click.option("--student", "use_student", is_flag=True,
                     help="invert with the distilled one-step student"),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--out-dir", default="samples", show_default=True),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _cfg_from_flags(w, s_c, s_u, t_pi, t_sigma, t_pi_v, t_sigma_v, t_s,
                    redundant_mult, redundant_scale) -> CfgConfig:
    try:
        return CfgConfig(w=w, s_c=s_c, s_u=s_u, t_pi=t_pi, t_sigma=t_sigma,
                         t_pi_v=t_pi_v, t_sigma_v=t_sigma_v, t_s=t_s,
                         redundant_multiplier=redundant_mult,
                         redundant_scale=redundant_scale)
    except ValueError as exc:
        raise click.ClickException(str(exc))


@main.command()
@_sampling_options
def sample(checkpoint, class_id, count, w, s_c, s_u, t_pi, t_sigma, t_pi_v,
           t_sigma_v, t_s, redundant_mult, redundant_scale, use_student, seed, out_dir):
    """Generate images from a trained checkpoint and write a PPM grid."""
    cfg = _cfg_from_flags(w, s_c, s_u, t_pi, t_sigma, t_pi_v, t_sigma_v, t_s,
                          redundant_mult, redundant_scale)
    trainer = _load_trainer(checkpoint)
    tc = trainer.config
    if class_id is not None and not 0 <= class_id < tc.class_count:
        raise click.ClickException(f"--class must lie in [0, {tc.class_count})")
    if use_student and trainer.student is None:
        raise click.ClickException("checkpoint has no student; run distill first")
    inverter = trainer.student if use_student else trainer.flow
    os.makedirs(out_dir, exist_ok=True)
    images = np.zeros((count, tc.image_size, tc.image_size, tc.channels))
    logdets = []
    artifacts = []
    for i, seq in enumerate(np.random.SeedSequence(seed).spawn(count)):
        images[i], logdet = generate(
            trainer.ar, inverter, class_id, cfg, np.random.default_rng(seq),
            n_tokens=tc.n_tokens, patch=tc.patch, height=tc.image_size,
            width=tc.image_size, channels=tc.channels,
            final_permute=tc.final_permute, return_logdet=True,
        )
        logdets.append(logdet)
        name = f"sample_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), images[i])
        artifacts.append(name)
    write_grid(os.path.join(out_dir, "grid.ppm"), images)
    artifacts.append("grid.ppm")
    _write_manifest(out_dir, "sample", {
        "seed": seed,
        "class": class_id,
        "checkpoint_hash": checkpoint_hash(checkpoint),
        "guidance": cfg,
        "per_sample_logdet": "[" + ", ".join(f"{v:.6f}" for v in logdets) + "]",
        "config": config_to_text(tc),
    }, artifacts)
    click.echo(f"wrote {count} samples + grid to {out_dir}")


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False),
              help="PPM directory with labels.txt; defaults to a fresh held-out synthetic split")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default="eval_out", show_default=True)
def eval_cmd(checkpoint, dataset_dir, seed, out_dir):
    """Exact likelihood on held-out data: nats/dim, bits/dim, and the
    per-channel Gaussian baseline on the same data."""
    trainer = _load_trainer(checkpoint)
    if dataset_dir:
        images, labels = read_dataset_dir(dataset_dir)
        if images.shape[1:] != (trainer.config.image_size,) * 2 + (trainer.config.channels,):
            raise click.ClickException(
                f"dataset geometry {images.shape[1:]} does not match the model")
        if labels.max() >= trainer.config.class_count:
            raise click.ClickException("dataset labels exceed the model's class count")
    else:
        images, labels = trainer.holdout_images, trainer.holdout_labels
    report = trainer.evaluate(images, labels, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    lines = [
        f"samples: {len(images)}",
        f"nats_per_dim: {report['nats_per_dim']:.6f}",
        f"bits_per_dim: {report['bits_per_dim']:.6f}",
        f"baseline_bits_per_dim: {report['baseline_bits_per_dim']:.6f}",
        f"margin_bits_per_dim: {report['baseline_bits_per_dim'] - report['bits_per_dim']:.6f}",
    ]
    with open(os.path.join(out_dir, "eval.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out_dir, "eval", {
        "seed": seed,
        "checkpoint_hash": checkpoint_hash(checkpoint),
        "config": config_to_text(trainer.config),
    }, ["eval.txt"])
    for line in lines:
        click.echo(line)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False),
              help="teacher checkpoint; left untouched")
@click.option("--steps", type=int, default=5000, show_default=True)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default="distill_out", show_default=True)
@click.option("--quiet", is_flag=True)
def distill(checkpoint, steps, batch_size, lr, seed, out_dir, quiet):
    """Distill the one-step student and save teacher+student together."""
    trainer = _load_trainer(checkpoint)
    try:
        dcfg = DistillConfig(steps=steps, batch_size=batch_size or trainer.config.batch_size,
                             lr=lr, seed=seed)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    os.makedirs(out_dir, exist_ok=True)
    student = init_student(trainer.flow)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    nan = float("nan")

    def on_step(step, loss):
        if step % trainer.config.log_every == 0 or step == dcfg.steps:
            metrics.write({
                "step": step, "loss": loss, "nll_inf": nan, "nll_red": nan,
                "logdet": nan, "bits_per_dim": nan, "lr": dcfg.lr,
                "sigma_noise": nan, "grad_norm": nan,
            })

    run_distillation(trainer.flow, student, trainer.train_images,
                     trainer.config.patch, dcfg, on_step=on_step, progress=not quiet)
    metrics.close()
    trainer.student = student
    out_ckpt = os.path.join(out_dir, "checkpoint.farm")
    trainer.save(out_ckpt)
    _write_manifest(out_dir, "distill", {
        "seed": seed,
        "steps": steps,
        "teacher_checkpoint_hash": checkpoint_hash(checkpoint),
        "checkpoint_hash": checkpoint_hash(out_ckpt),
        "config": config_to_text(trainer.config),
    }, ["checkpoint.farm", "metrics.csv"])
    click.echo(f"distilled student -> {out_ckpt}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False),
              help="checkpoint containing both teacher and student")
@click.option("--n-list", default="8,16,32,64", show_default=True)
@click.option("--reps", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default="bench_out", show_default=True)
def bench(checkpoint, n_list, reps, seed, out_dir):
    """Wall-clock comparison: AR sampling, teacher inverse, student inverse."""
    trainer = _load_trainer(checkpoint)
    if trainer.student is None:
        raise click.ClickException("benchmark needs a student; run distill first")
    try:
        ns = [int(tok) for tok in n_list.split(",") if tok.strip()]
    except ValueError:
        raise click.ClickException(f"--n-list must be comma-separated ints, got {n_list!r}")
    if not ns or min(ns) < 1:
        raise click.ClickException("--n-list needs positive token counts")
    limit = trainer.config.max_tokens
    if max(ns) > limit:
        raise click.ClickException(f"token counts above max_tokens={limit} are not supported")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    d = trainer.config.token_dim
    rows = []
    for n in ns:
        cfg = CfgConfig(w=0.0, s_c=1, s_u=0)
        ar_ms = _best_of(reps, lambda: generate_latents(
            trainer.ar, 0, cfg, np.random.default_rng(seed), n))
        z = rng.normal(size=(1, n, d)).astype(trainer.dtype)
        teacher_ms = _best_of(reps, lambda: trainer.flow.inverse(z))
        student_ms = _best_of(reps, lambda: trainer.student.inverse(z))
        rows.append((n, ar_ms, teacher_ms, student_ms, teacher_ms / student_ms))
    csv_path = os.path.join(out_dir, "bench.csv")
    with open(csv_path, "w") as fh:
        fh.write("N,ar_ms,teacher_inv_ms,student_inv_ms,speedup\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.6f},{row[4]:.6f}\n")
    _write_manifest(out_dir, "bench", {
        "seed": seed,
        "reps": reps,
        "checkpoint_hash": checkpoint_hash(checkpoint),
        "config": config_to_text(trainer.config),
    }, ["bench.csv"])
    for row in rows:
        click.echo(f"N={row[0]:4d}  ar {row[1]:8.2f} ms  teacher {row[2]:8.2f} ms  "
                   f"student {row[3]:8.2f} ms  speedup {row[4]:5.1f}x")


def _best_of(reps: int, fn) -> float:
    """Mean wall-clock milliseconds over reps runs (after one warmup)."""
    fn()
    times = []
    for _ in range(max(1, reps)):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.mean(times))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--count", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", default="roundtrip_out", show_default=True)
def roundtrip(checkpoint, count, seed, out_dir):
    """Reconstruction report: max/mean |F^-1(F(x)) - x| for the teacher and
    |G(F(x)) - x| for the student when present, with per-block worst sites."""
    trainer = _load_trainer(checkpoint)
    tc = trainer.config
    images, _ = synth_dataset(tc.dataset, tc.class_count, count, seed=seed + 3000,
                              size=tc.image_size, channels=tc.channels)
    tokens = trainer.eval_tokens(images, np.random.default_rng(seed))
    with no_grad():
        z, _, _ = trainer.flow.forward(Tensor(tokens))
    back = trainer.flow.inverse(z.data)
    err = np.abs(back - tokens)
    lines = [
        f"samples: {count}",
        f"teacher_max_abs_err: {err.max():.3e}",
        f"teacher_mean_abs_err: {err.mean():.3e}",
    ]
    # per-block worst position: roundtrip each block transform alone
    cur = Tensor(tokens)
    with no_grad():
        for t, block in enumerate(trainer.flow.blocks):
            rev = np.flip(cur.data, axis=1).copy()
            fwd, _ = block.forward(Tensor(rev))
            rec, _ = block.inverse(fwd.data)
            block_err = np.abs(rec - rev).max(axis=(0, 2))
            lines.append(
                f"block {t}: max_err {block_err.max():.3e} worst_position {int(block_err.argmax())}"
            )
            cur = Tensor(np.flip(fwd.data, axis=1).copy())
    if trainer.student is not None:
        student_back = trainer.student.inverse(z.data)
        serr = np.abs(student_back - tokens)
        rmse = float(np.sqrt((serr.astype(np.float64) ** 2).mean()))
        lines.append(f"student_max_abs_err: {serr.max():.3e}")
        lines.append(f"student_rmse_per_dim: {rmse:.4f}")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "roundtrip.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_manifest(out_dir, "roundtrip", {
        "seed": seed,
        "checkpoint_hash": checkpoint_hash(checkpoint),
        "config": config_to_text(trainer.config),
    }, ["roundtrip.txt"])
    for line in lines:
        click.echo(line)


if __name__ == "__main__":
    main()
