"""The noise-conditional training loop, two-phase protocol, and validation.

Training follows the Monte-Carlo objective: per batch, every example draws
its own noise parameters, is corrupted with exactly those parameters, and
the same parameters feed the conditioner.  The clean image is the target
(denoising autoencoder setup); the corruption layer exists only here, never
inside the model's forward pass.

Three named RNG streams derive from the config seed: "shuffle" (epoch
permutations), "noise-params" (per-example parameter draws) and
"corruption" (the Gaussian field).  Validation uses a separate fixed seed so
curves are comparable across independently trained models, and corruption
there depends only on (seed, kind, sigma_val), never on the conditioning
level.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .engine.optim import Adam
from .engine.tensor import Tape, backward
from .engine.ops import mse_loss
from .metrics import MetricRecord, mean_metrics, psnr, ssim
from .model import (
    GROUPS,
    FilmUnet,
    ModelConfig,
    forward,
    group_hash,
    save,
    set_trainable,
)
from .noise import (
    NoiseDistribution,
    corrupt,
    corrupt_batch,
    params_for_level,
    residual_noise_std,
    rng_stream,
    sample_params_batch,
)
from .reports import config_hash

__all__ = [
    "TrainingError",
    "TrainConfig",
    "TrainReport",
    "DEFAULT_EVAL_SEED",
    "train",
    "two_phase_train",
    "validate",
]

DEFAULT_EVAL_SEED = 20240101  # fixed, disjoint from training streams by name


class TrainingError(Exception):
    """Aborted training run (bad config, empty data, non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    noise: NoiseDistribution
    batch_size: int = 64
    epochs: int = 1
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    loss: str = "mse"
    seed: int = 0
    trainable_groups: frozenset[str] = frozenset(GROUPS)
    checkpoint_every: int = 0  # epochs between snapshots; 0 = final only
    pin_conditioning_zero: bool = False  # phase-1 protocol
    # optional per-epoch validation (all three must be set to take effect)
    val_sigma_tr: tuple[float, ...] = ()
    val_sigma_val: tuple[float, ...] = ()
    val_noise_kind: str = "gaussian"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}, only 'mse'")
        groups = frozenset(self.trainable_groups)
        if not groups or not groups.issubset(GROUPS):
            raise ValueError(
                f"trainable_groups must be a non-empty subset of {GROUPS}, got {sorted(groups)}"
            )
        object.__setattr__(self, "trainable_groups", groups)
        # normalize film_sites so this config compares equal to a built model's
        object.__setattr__(
            self, "model", replace(self.model, film_sites=self.model.resolved_sites())
        )


@dataclass
class TrainReport:
    epoch_losses: list[float]
    val_history: list[tuple[int, list[MetricRecord]]]
    wall_clock_s: float
    checkpoint_path: str | None
    seed: int
    config_hash: str

    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def _epoch_loss_name(epoch: int, total: int) -> str:
    return f"model_epoch{epoch:03d}.fuw"


def train(
    model: FilmUnet,
    data: Dataset,
    cfg: TrainConfig,
    val_data: Dataset | None = None,
    out_dir=None,
) -> TrainReport:
    """Run the conditional training loop; returns the per-epoch report.

    When ``out_dir`` is given the final model lands in ``out_dir/model.fuw``
    (plus periodic snapshots if cfg.checkpoint_every > 0).
    """
    if model.config != cfg.model:
        raise TrainingError(
            "TrainConfig.model does not match the model being trained; "
            f"{cfg.model} vs {model.config}"
        )
    if len(data) == 0:
        raise TrainingError("training dataset is empty")
    images = data.stack()
    if images.shape[1:] != tuple(cfg.model.input_shape):
        raise TrainingError(
            f"dataset images {images.shape[1:]} do not match model input {cfg.model.input_shape}"
        )

    set_trainable(model, cfg.trainable_groups)
    frozen_groups = sorted(set(GROUPS) - cfg.trainable_groups)
    frozen_hashes = {g: group_hash(model, g) for g in frozen_groups}

    optimizer = Adam(
        model.trainable_parameters(),
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
    )
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    params_rng = rng_stream(cfg.seed, "noise-params")
    corrupt_rng = rng_stream(cfg.seed, "corruption")

    cfg_hash = config_hash(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n = images.shape[0]
    epoch_losses: list[float] = []
    val_history: list[tuple[int, list[MetricRecord]]] = []
    started = time.perf_counter()
    checkpoint_path: str | None = None

    def snapshot(path: Path, epoch: int) -> str:
        save(model, path, optimizer=optimizer, metadata={
            "epoch": epoch,
            "epochs": cfg.epochs,
            "seed": cfg.seed,
            "noise": {"a_range": list(cfg.noise.a_range),
                      "sigma_range": list(cfg.noise.sigma_range)},
            "trainable_groups": sorted(cfg.trainable_groups),
            "config_hash": cfg_hash,
        })
        return str(path)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            clean = images[idx]
            a_vec, s_vec = sample_params_batch(cfg.noise, len(idx), params_rng)
            noisy = corrupt_batch(clean, a_vec, s_vec, corrupt_rng)
            if cfg.pin_conditioning_zero:
                cond = np.zeros((len(idx), 2), dtype=np.float32)
            else:
                # paired sampling: the conditioner sees exactly the params
                # that corrupted each example
                cond = np.stack([a_vec, s_vec], axis=1)
            optimizer.zero_grad()
            with Tape():
                pred = forward(model, noisy, cond)
                loss = mse_loss(pred, clean)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite loss {loss_val} at epoch {epoch}, "
                    f"batch starting at example {start} (seed {cfg.seed})"
                )
            backward(loss)
            optimizer.step()
            loss_sum += loss_val * len(idx)
        epoch_losses.append(loss_sum / n)

        for g in frozen_groups:
            now = group_hash(model, g)
            if now != frozen_hashes[g]:
                raise TrainingError(
                    f"frozen group {g!r} changed during epoch {epoch}; freezing is broken"
                )

        if val_data is not None and cfg.val_sigma_tr and cfg.val_sigma_val:
            records = validate(
                model, val_data, cfg.val_sigma_tr, cfg.val_sigma_val, cfg.val_noise_kind,
                batch_size=cfg.batch_size,
            )
            val_history.append((epoch, records))

        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            snapshot(out_dir / _epoch_loss_name(epoch, cfg.epochs), epoch)

    if out_dir is not None:
        checkpoint_path = snapshot(out_dir / "model.fuw", cfg.epochs)

    return TrainReport(
        epoch_losses=epoch_losses,
        val_history=val_history,
        wall_clock_s=time.perf_counter() - started,
        checkpoint_path=checkpoint_path,
        seed=cfg.seed,
        config_hash=cfg_hash,
    )


def _film_identity_at_zero(model: FilmUnet) -> bool:
    for site in model.sites:
        if not np.all(model.param(f"film.{site}.gamma.bias").data == 1.0):
            return False
        if not np.all(model.param(f"film.{site}.beta.bias").data == 0.0):
            return False
    return True


def two_phase_train(
    model: FilmUnet,
    data: Dataset,
    phase1: TrainConfig,
    phase2: TrainConfig,
    val_data: Dataset | None = None,
    out_dir=None,
) -> tuple[TrainReport, TrainReport]:
    """Fixed-noise backbone training, then FiLM-only conditioning.

    Phase 1 trains only the backbone at one fixed noise level with the
    conditioning input pinned to zero (the film group stays at its
    identity-preserving init); phase 2 freezes the backbone and trains only
    the conditioner over phase2's noise distribution.  The backbone is
    bit-identical before and after phase 2.
    """
    overlap = phase1.trainable_groups & phase2.trainable_groups
    if overlap:
        raise TrainingError(
            f"phases must train disjoint groups, both train {sorted(overlap)}"
        )
    if phase1.trainable_groups != frozenset({"backbone"}):
        raise TrainingError(
            f"phase 1 must train exactly {{'backbone'}}, got {sorted(phase1.trainable_groups)}"
        )
    if phase2.trainable_groups != frozenset({"film"}):
        raise TrainingError(
            f"phase 2 must train exactly {{'film'}}, got {sorted(phase2.trainable_groups)}"
        )
    if not phase1.noise.is_degenerate:
        raise TrainingError(
            f"phase 1 noise must be a fixed level, got {phase1.noise}"
        )
    if phase2.noise.is_degenerate:
        raise TrainingError("phase 2 noise must be a distribution, not a fixed level")
    if not _film_identity_at_zero(model):
        raise TrainingError(
            "phase 1 requires the film group at its identity init "
            "(gamma bias 1, beta bias 0); build a fresh model"
        )
    phase1 = replace(phase1, pin_conditioning_zero=True)

    out_dir = Path(out_dir) if out_dir is not None else None
    film_before = group_hash(model, "film")
    report1 = train(model, data, phase1, val_data=val_data,
                    out_dir=None if out_dir is None else out_dir / "phase1")
    if group_hash(model, "film") != film_before:
        raise TrainingError("film group changed during phase 1; freezing is broken")

    backbone_before = group_hash(model, "backbone")
    report2 = train(model, data, phase2, val_data=val_data,
                    out_dir=None if out_dir is None else out_dir / "phase2")
    if group_hash(model, "backbone") != backbone_before:
        raise TrainingError("backbone changed during phase 2; freezing is broken")
    return report1, report2


def validate(
    model: FilmUnet,
    data: Dataset,
    sigma_tr_grid,
    sigma_val_grid,
    noise_kind: str = "gaussian",
    batch_size: int = 64,
    eval_seed: int = DEFAULT_EVAL_SEED,
) -> list[MetricRecord]:
    """Mean PSNR/SSIM/residual-std over the (sigma_tr x sigma_val) grid.

    Validation images are corrupted once per sigma_val with an RNG stream
    keyed only by (eval_seed, kind, sigma_val), so every conditioning level
    and every model sees bit-identical corrupted inputs.  Records come back
    ordered sigma_tr-major, matching ``len(tr_grid) * len(val_grid)``.
    """
    sigma_tr_grid = [float(v) for v in sigma_tr_grid]
    sigma_val_grid = [float(v) for v in sigma_val_grid]
    if not sigma_tr_grid or not sigma_val_grid:
        raise ValueError("validation grids must be non-empty")
    if len(data) == 0:
        raise ValueError("validation dataset is empty")
    clean = data.stack()
    if clean.shape[1:] != tuple(model.config.input_shape):
        raise ValueError(
            f"validation images {clean.shape[1:]} do not match model input "
            f"{tuple(model.config.input_shape)}"
        )
    n = clean.shape[0]
    cells: dict[tuple[int, int], MetricRecord] = {}
    for vi, sigma_val in enumerate(sigma_val_grid):
        p_val = params_for_level(noise_kind, sigma_val)
        rng = rng_stream(eval_seed, "validate", noise_kind, repr(sigma_val))
        noisy = corrupt(clean, p_val, rng)
        for ti, sigma_tr in enumerate(sigma_tr_grid):
            cond_row = params_for_level(noise_kind, sigma_tr).as_array()
            per_image: list[MetricRecord] = []
            for start in range(0, n, batch_size):
                chunk = noisy[start : start + batch_size]
                cond = np.tile(cond_row, (chunk.shape[0], 1))
                out = forward(model, chunk, cond).data
                for j in range(chunk.shape[0]):
                    ref = clean[start + j]
                    per_image.append(MetricRecord(
                        sigma_tr=sigma_tr,
                        sigma_val=sigma_val,
                        noise_kind=noise_kind,
                        psnr_db=psnr(out[j], ref),
                        ssim=ssim(out[j], ref),
                        residual_std=residual_noise_std(out[j], ref),
                    ))
            cells[(ti, vi)] = mean_metrics(per_image)
    return [cells[(ti, vi)]
            for ti in range(len(sigma_tr_grid))
            for vi in range(len(sigma_val_grid))]
