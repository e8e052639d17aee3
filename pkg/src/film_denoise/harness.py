"""Experiment commands behind the CLI: train, sweep, denoise, compare.

Every command reads one JSON config, validates it exhaustively, echoes the
fully resolved config (with its hash and seed) into the output directory,
and writes deterministic artifacts: `.fuw` checkpoints, schema-versioned
CSVs, SVG curve plots and PNG images.  Identical config and seed produce
byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    load_config,
    require,
    resolve_dataset,
    resolve_grid,
    resolve_model,
    resolve_noise,
    resolve_train_section,
)
from .data import Dataset, extract_patches, load_cifar10, load_png_corpus, read_png, reassemble, write_png
from .metrics import MetricRecord, mean_metrics, psnr, ssim
from .model import FilmUnet, build, forward, load, save
from .noise import corrupt, params_for_level, residual_noise_std, rng_stream
from .reports import (
    atomic_write_text,
    canonical_json,
    config_hash,
    emit_svg,
    metric_row,
    write_metric_csv,
    write_train_log_csv,
)
from .training import TrainConfig, TrainingError, train, two_phase_train, validate

__all__ = [
    "HarnessError",
    "worker_count",
    "cmd_train",
    "cmd_sweep",
    "cmd_denoise",
    "cmd_compare",
]

THREADS_ENV = "FILM_DENOISE_THREADS"


class HarnessError(Exception):
    """Runtime failure of a harness command (outside config validation)."""


def worker_count() -> int:
    """Worker cap from FILM_DENOISE_THREADS; 0 or unset means auto (cpu count)."""
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        n = int(raw)
    except ValueError:
        raise HarnessError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 0:
        raise HarnessError(f"{THREADS_ENV} must be >= 0, got {n}")
    return n if n > 0 else (os.cpu_count() or 1)


def _resolve_out_dir(raw: dict, base_dir: Path, out_override) -> Path:
    if out_override is not None:
        return Path(out_override)
    value = raw.get("out_dir")
    if value is None:
        raise ConfigError(["output directory required: pass --out or set out_dir in the config"])
    path = Path(value)
    return path if path.is_absolute() else (base_dir / path)


def _resolve_seed(raw: dict, seed_override, errors: list[str]) -> int:
    if seed_override is not None:
        seed = seed_override
    else:
        seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(f"seed must be a non-negative integer, got {seed!r}")
        return 0
    return seed


def _load_dataset(spec: dict, split: str, limit: int | None = None) -> Dataset:
    n = limit if limit is not None else spec.get("limit")
    if spec["kind"] == "cifar10":
        return load_cifar10(spec["dir"], split=split, limit=n)
    ds = load_png_corpus(spec["dir"], spec["patch"], spec["stride"])
    images = ds.images if n is None else ds.images[: int(n)]
    return Dataset(images=images, source=ds.source, split=split)


def _echo_config(out_dir: Path, resolved: dict, seed: int) -> str:
    cfg_hash = config_hash(resolved)
    echo = {"config": resolved, "config_hash": cfg_hash, "seed": seed}
    atomic_write_text(out_dir / "config.resolved.json", canonical_json(echo) + "\n")
    return cfg_hash


def _level_params(kind: str, level: float) -> tuple[float, float]:
    p = params_for_level(kind, level)
    return p.a, p.sigma


# ---------------------------------------------------------------- train


def cmd_train(config_path, out_dir=None, seed=None) -> dict:
    """Train (single or two-phase) per config; writes checkpoint, logs, metrics."""
    raw = load_config(config_path)
    base_dir = Path(config_path).resolve().parent
    errors: list[str] = []

    run_seed = _resolve_seed(raw, seed, errors)
    model_cfg = resolve_model(raw.get("model"), errors)
    data_spec = resolve_dataset(raw.get("dataset"), errors, base_dir)

    has_single = "train" in raw
    has_two = "two_phase" in raw
    if has_single == has_two:
        errors.append("config must contain exactly one of 'train' or 'two_phase'")
    train_kwargs = phase1_kwargs = phase2_kwargs = None
    if has_single and not has_two:
        train_kwargs = resolve_train_section(raw.get("train"), model_cfg, run_seed, errors)
    elif has_two and not has_single:
        two = raw.get("two_phase")
        if not isinstance(two, dict):
            errors.append("two_phase must be an object with phase1 and phase2 sections")
        else:
            phase1_kwargs = resolve_train_section(two.get("phase1"), model_cfg, run_seed,
                                                  errors, where="two_phase.phase1")
            phase2_kwargs = resolve_train_section(two.get("phase2"), model_cfg, run_seed + 1,
                                                  errors, where="two_phase.phase2")

    val_spec = None
    if "validation" in raw:
        vs = raw["validation"]
        if not isinstance(vs, dict):
            errors.append("validation must be an object")
        else:
            val_spec = {
                "sigma_tr": resolve_grid(vs, "sigma_tr", [0.05, 0.1, 0.2, 0.3], errors,
                                         where="validation"),
                "sigma_val": resolve_grid(vs, "sigma_val", [0.05, 0.1, 0.2, 0.3], errors,
                                          where="validation"),
                "kind": vs.get("kind", "gaussian"),
                "images": vs.get("images", 64),
            }
            if val_spec["kind"] not in ("gaussian", "poisson"):
                errors.append(f"validation.kind must be gaussian or poisson, got {val_spec['kind']!r}")
            if not isinstance(val_spec["images"], int) or val_spec["images"] < 1:
                errors.append(f"validation.images must be a positive integer, got {val_spec['images']!r}")

    known = {"model", "dataset", "train", "two_phase", "validation", "seed", "out_dir"}
    unknown = set(raw) - known
    if unknown:
        errors.append(f"unknown top-level fields: {sorted(unknown)}")
    if errors:
        raise ConfigError(errors)

    out = _resolve_out_dir(raw, base_dir, out_dir)
    out.mkdir(parents=True, exist_ok=True)

    resolved = {
        "command": "train",
        "model": asdict(model_cfg),
        "dataset": data_spec,
        "seed": run_seed,
    }
    if train_kwargs is not None:
        resolved["train"] = train_kwargs
    else:
        resolved["two_phase"] = {"phase1": phase1_kwargs, "phase2": phase2_kwargs}
    if val_spec is not None:
        resolved["validation"] = val_spec
    cfg_hash = _echo_config(out, resolved, run_seed)

    train_data = _load_dataset(data_spec, "train")
    val_data = None
    val_fields: dict = {}
    if val_spec is not None:
        val_data = _load_dataset(data_spec, "val", limit=val_spec["images"])
        val_fields = {
            "val_sigma_tr": tuple(val_spec["sigma_tr"]),
            "val_sigma_val": tuple(val_spec["sigma_val"]),
            "val_noise_kind": val_spec["kind"],
        }

    model = build(model_cfg)
    if train_kwargs is not None:
        cfg = TrainConfig(model=model_cfg, **train_kwargs, **val_fields)
        report = train(model, train_data, cfg, val_data=val_data, out_dir=out)
        reports = [("", report)]
    else:
        p1 = TrainConfig(model=model_cfg, trainable_groups=frozenset({"backbone"}),
                         **{k: v for k, v in phase1_kwargs.items() if k != "trainable_groups"})
        p2 = TrainConfig(model=model_cfg, trainable_groups=frozenset({"film"}),
                         **{k: v for k, v in phase2_kwargs.items() if k != "trainable_groups"},
                         **val_fields)
        r1, r2 = two_phase_train(model, train_data, p1, p2, val_data=val_data, out_dir=out)
        save(model, out / "model.fuw", metadata={
            "seed": run_seed, "config_hash": cfg_hash, "two_phase": True,
        })
        reports = [("phase1_", r1), ("phase2_", r2)]

    artifacts = {"checkpoint": str(out / "model.fuw"), "config": str(out / "config.resolved.json")}
    for prefix, report in reports:
        log_path = out / f"{prefix}train_log.csv"
        write_train_log_csv(log_path, cfg_hash=cfg_hash, seed=run_seed,
                            epoch_losses=report.epoch_losses)
        artifacts[f"{prefix}train_log"] = str(log_path)
        if report.val_history:
            _, records = report.val_history[-1]
            kind = val_spec["kind"]
            rows = []
            for rec in records:
                a, s = _level_params(kind, rec.sigma_tr)
                rows.append(metric_row(rec, cfg_hash=cfg_hash, seed=run_seed, method="model",
                                       sigma_tr_a=a, sigma_tr_sigma=s))
            path = out / f"{prefix}metrics.csv"
            write_metric_csv(path, rows)
            artifacts[f"{prefix}metrics"] = str(path)
    return artifacts


# ---------------------------------------------------------------- sweep


def cmd_sweep(config_path, checkpoint, out_dir=None, seed=None) -> dict:
    """Sensitivity curves over (sigma_tr x sigma_val x kind) for one checkpoint."""
    raw = load_config(config_path)
    base_dir = Path(config_path).resolve().parent
    errors: list[str] = []
    run_seed = _resolve_seed(raw, seed, errors)
    data_spec = resolve_dataset(raw.get("dataset"), errors, base_dir)

    section = raw.get("sweep", {})
    if not isinstance(section, dict):
        errors.append("sweep must be an object")
        section = {}
    default_grid = [0.05, 0.10, 0.20, 0.30]
    sigma_tr = resolve_grid(section, "sigma_tr", default_grid, errors, where="sweep")
    sigma_val = resolve_grid(section, "sigma_val", default_grid, errors, where="sweep")
    kinds = section.get("kinds", ["gaussian"])
    if (not isinstance(kinds, list) or not kinds
            or not set(kinds).issubset({"gaussian", "poisson"})):
        errors.append(f"sweep.kinds must be a non-empty subset of ['gaussian', 'poisson'], got {kinds!r}")
        kinds = ["gaussian"]
    images = section.get("images", 64)
    if not isinstance(images, int) or images < 1:
        errors.append(f"sweep.images must be a positive integer, got {images!r}")
        images = 64
    batch_size = section.get("batch_size", 64)
    if not isinstance(batch_size, int) or batch_size < 1:
        errors.append(f"sweep.batch_size must be a positive integer, got {batch_size!r}")
        batch_size = 64

    ckpt_path = Path(checkpoint).resolve() if checkpoint else None
    if ckpt_path is None:
        errors.append("sweep requires --checkpoint")
    elif not ckpt_path.is_file():
        errors.append(f"checkpoint not found: {ckpt_path}")

    known = {"dataset", "sweep", "seed", "out_dir"}
    unknown = set(raw) - known
    if unknown:
        errors.append(f"unknown top-level fields: {sorted(unknown)}")
    if errors:
        raise ConfigError(errors)

    out = _resolve_out_dir(raw, base_dir, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "sweep",
        "dataset": data_spec,
        "sweep": {"sigma_tr": sigma_tr, "sigma_val": sigma_val, "kinds": kinds,
                  "images": images, "batch_size": batch_size},
        "checkpoint": str(ckpt_path),
        "seed": run_seed,
    }
    cfg_hash = _echo_config(out, resolved, run_seed)

    model = load(ckpt_path)
    val_data = _load_dataset(data_spec, "val", limit=images)
    method = ckpt_path.stem

    def run_kind(kind: str) -> list[MetricRecord]:
        return validate(model, val_data, sigma_tr, sigma_val, kind,
                        batch_size=batch_size, eval_seed=run_seed)

    workers = min(worker_count(), len(kinds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_records = list(pool.map(run_kind, kinds))
    else:
        all_records = [run_kind(k) for k in kinds]

    rows = []
    for kind, records in zip(kinds, all_records):
        for rec in records:
            a, s = _level_params(kind, rec.sigma_tr)
            rows.append(metric_row(rec, cfg_hash=cfg_hash, seed=run_seed, method=method,
                                   sigma_tr_a=a, sigma_tr_sigma=s))
    csv_path = out / "sweep.csv"
    write_metric_csv(csv_path, rows)

    artifacts = {"csv": str(csv_path), "config": str(out / "config.resolved.json")}
    for field_name, label in (("psnr_db", "PSNR (dB)"), ("ssim", "SSIM"),
                              ("residual_std", "residual noise std")):
        curves: dict[str, tuple[list[float], list[float]]] = {}
        for kind, records in zip(kinds, all_records):
            for t in sigma_tr:
                series = [r for r in records if r.sigma_tr == t]
                key = f"{kind} tr={t:g}" if len(kinds) > 1 else f"tr={t:g}"
                curves[key] = ([r.sigma_val for r in series],
                               [getattr(r, field_name) for r in series])
        svg_path = out / f"sweep_{field_name}.svg"
        emit_svg(curves, title=f"{method}: {label} vs validation noise",
                 xlabel="sigma_val", ylabel=label, path=svg_path)
        artifacts[f"svg_{field_name}"] = str(svg_path)
    return artifacts


# ---------------------------------------------------------------- denoise


def cmd_denoise(config_path, checkpoint, out_dir=None, seed=None) -> dict:
    """Denoise one PNG through the patch pipeline at a fixed conditioning."""
    raw = load_config(config_path)
    base_dir = Path(config_path).resolve().parent
    errors: list[str] = []
    run_seed = _resolve_seed(raw, seed, errors)

    input_rel = require(raw, "input", errors, kind=str)
    input_path = None
    if input_rel is not None:
        input_path = Path(input_rel)
        input_path = (input_path if input_path.is_absolute() else base_dir / input_path).resolve()
        if not input_path.is_file():
            errors.append(f"input image not found: {input_path}")

    cond = raw.get("condition", {})
    if not isinstance(cond, dict):
        errors.append("condition must be an object with a/sigma")
        cond = {}
    cond_a = cond.get("a", 0.0)
    cond_sigma = cond.get("sigma", 0.0)
    for name, value in (("a", cond_a), ("sigma", cond_sigma)):
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
            errors.append(f"condition.{name} must be a non-negative number, got {value!r}")
    output_name = raw.get("output", "denoised.png")
    if not isinstance(output_name, str) or not output_name:
        errors.append(f"output must be a file name, got {output_name!r}")
    batch_size = raw.get("batch_size", 16)
    if not isinstance(batch_size, int) or batch_size < 1:
        errors.append(f"batch_size must be a positive integer, got {batch_size!r}")
        batch_size = 16

    ckpt_path = Path(checkpoint).resolve() if checkpoint else None
    if ckpt_path is None:
        errors.append("denoise requires --checkpoint")
    elif not ckpt_path.is_file():
        errors.append(f"checkpoint not found: {ckpt_path}")

    known = {"input", "output", "condition", "batch_size", "seed", "out_dir"}
    unknown = set(raw) - known
    if unknown:
        errors.append(f"unknown top-level fields: {sorted(unknown)}")
    if errors:
        raise ConfigError(errors)

    out = _resolve_out_dir(raw, base_dir, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "denoise",
        "input": str(input_path),
        "output": output_name,
        "condition": {"a": float(cond_a), "sigma": float(cond_sigma)},
        "batch_size": batch_size,
        "checkpoint": str(ckpt_path),
        "seed": run_seed,
    }
    _echo_config(out, resolved, run_seed)

    model = load(ckpt_path)
    c, h, w = model.config.input_shape
    if h != w:
        raise HarnessError(
            f"patch pipeline needs a square model input, config has ({h}, {w})"
        )
    img = read_png(input_path)
    if img.shape[1] < h or img.shape[2] < h:
        raise HarnessError(
            f"input {img.shape[1]}x{img.shape[2]} is smaller than the model patch size {h}"
        )
    grid = extract_patches(img, size=h)
    tiles = grid.patches.astype(np.float32)
    cond_row = np.array([cond_a, cond_sigma], dtype=np.float32)
    denoised = np.empty_like(tiles)
    for start in range(0, tiles.shape[0], batch_size):
        chunk = tiles[start : start + batch_size]
        cond_batch = np.tile(cond_row, (chunk.shape[0], 1))
        denoised[start : start + chunk.shape[0]] = forward(model, chunk, cond_batch).data
    restored = reassemble(grid, denoised)
    out_path = out / output_name
    write_png(out_path, restored)
    return {"output": str(out_path), "config": str(out / "config.resolved.json")}


# ---------------------------------------------------------------- compare


def _score_cell(outputs: np.ndarray, clean: np.ndarray, kind: str, level: float) -> MetricRecord:
    per_image = [
        MetricRecord(
            sigma_tr=level, sigma_val=level, noise_kind=kind,
            psnr_db=psnr(outputs[i], clean[i]),
            ssim=ssim(outputs[i], clean[i]),
            residual_std=residual_noise_std(outputs[i], clean[i]),
        )
        for i in range(clean.shape[0])
    ]
    return mean_metrics(per_image)


def _u8_roundtrip(images: np.ndarray) -> np.ndarray:
    q = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / 255.0


def cmd_compare(config_path, checkpoints, out_dir=None, seed=None) -> dict:
    """Score methods on identical corrupted inputs, one CSV row per (method, kind, level).

    Checkpoint methods are run in-process; external methods are ingested as
    PNG directories laid out as ``<dir>/<kind>_<level:g>/<index:05d>.png``.
    The corrupted inputs of one cell are hash-asserted identical across
    methods.  With ``export_corrupted`` the 8-bit corrupted inputs are
    written out for external tools to consume.
    """
    raw = load_config(config_path)
    base_dir = Path(config_path).resolve().parent
    errors: list[str] = []
    run_seed = _resolve_seed(raw, seed, errors)
    data_spec = resolve_dataset(raw.get("dataset"), errors, base_dir)

    section = raw.get("compare", {})
    if not isinstance(section, dict):
        errors.append("compare must be an object")
        section = {}
    levels = resolve_grid(section, "levels", [0.05, 0.10, 0.20, 0.30], errors, where="compare")
    kinds = section.get("kinds", ["gaussian"])
    if (not isinstance(kinds, list) or not kinds
            or not set(kinds).issubset({"gaussian", "poisson"})):
        errors.append(f"compare.kinds must be a non-empty subset of ['gaussian', 'poisson'], got {kinds!r}")
        kinds = ["gaussian"]
    images = section.get("images", 64)
    if not isinstance(images, int) or images < 1:
        errors.append(f"compare.images must be a positive integer, got {images!r}")
        images = 64
    batch_size = section.get("batch_size", 64)
    include_baseline = section.get("include_noisy_baseline", False)
    export_corrupted = section.get("export_corrupted", False)
    for flag_name, flag in (("include_noisy_baseline", include_baseline),
                            ("export_corrupted", export_corrupted)):
        if not isinstance(flag, bool):
            errors.append(f"compare.{flag_name} must be true or false, got {flag!r}")

    ckpt_paths = [Path(p).resolve() for p in (checkpoints or [])]
    for entry in section.get("checkpoints", []):
        p = Path(entry)
        ckpt_paths.append((p if p.is_absolute() else base_dir / p).resolve())
    if not ckpt_paths:
        errors.append("compare requires at least one checkpoint (--checkpoint or compare.checkpoints)")
    for p in ckpt_paths:
        if not p.is_file():
            errors.append(f"checkpoint not found: {p}")
    external = section.get("external", {})
    if not isinstance(external, dict) or not all(isinstance(v, str) for v in external.values()):
        errors.append("compare.external must map method names to directories")
        external = {}
    ext_dirs: dict[str, Path] = {}
    for name, d in sorted(external.items()):
        path = Path(d)
        path = (path if path.is_absolute() else base_dir / path).resolve()
        if not path.is_dir():
            errors.append(f"external method {name!r} directory not found: {path}")
        ext_dirs[name] = path

    known = {"dataset", "compare", "seed", "out_dir"}
    unknown = set(raw) - known
    if unknown:
        errors.append(f"unknown top-level fields: {sorted(unknown)}")
    if errors:
        raise ConfigError(errors)

    out = _resolve_out_dir(raw, base_dir, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "compare",
        "dataset": data_spec,
        "compare": {"levels": levels, "kinds": kinds, "images": images,
                    "batch_size": batch_size,
                    "include_noisy_baseline": include_baseline,
                    "export_corrupted": export_corrupted,
                    "external": {k: str(v) for k, v in ext_dirs.items()}},
        "checkpoints": [str(p) for p in ckpt_paths],
        "seed": run_seed,
    }
    cfg_hash = _echo_config(out, resolved, run_seed)

    val_data = _load_dataset(data_spec, "val", limit=images)
    clean = val_data.stack()
    n = clean.shape[0]

    models: list[tuple[str, FilmUnet]] = []
    for p in ckpt_paths:
        model = load(p)
        if tuple(model.config.input_shape) != tuple(clean.shape[1:]):
            raise HarnessError(
                f"checkpoint {p.name}: model input {model.config.input_shape} does not "
                f"match evaluation images {tuple(clean.shape[1:])}"
            )
        models.append((p.stem, model))

    method_names = [name for name, _ in models] + sorted(ext_dirs)
    if include_baseline:
        method_names.append("noisy-input")
    if len(set(method_names)) != len(method_names):
        raise HarnessError(f"method names must be unique, got {method_names}")

    cells: dict[tuple[str, str, float], MetricRecord] = {}
    for kind in kinds:
        for level in levels:
            p_cell = params_for_level(kind, level)
            rng = rng_stream(run_seed, "compare", kind, repr(float(level)))
            corrupted = corrupt(clean, p_cell, rng)
            cell_hash = hashlib.sha256(corrupted.tobytes()).hexdigest()
            cell_name = f"{kind}_{level:g}"
            if export_corrupted:
                cell_dir = out / "corrupted" / cell_name
                cell_dir.mkdir(parents=True, exist_ok=True)
                for i in range(n):
                    write_png(cell_dir / f"{i:05d}.png", corrupted[i])

            for name, model in models:
                cond = np.tile(p_cell.as_array(), (n, 1))
                outputs = np.empty_like(clean)
                for start in range(0, n, batch_size):
                    chunk = corrupted[start : start + batch_size]
                    outputs[start : start + chunk.shape[0]] = forward(
                        model, chunk, cond[start : start + chunk.shape[0]]
                    ).data
                if hashlib.sha256(corrupted.tobytes()).hexdigest() != cell_hash:
                    raise HarnessError(f"method {name!r} mutated the shared corrupted inputs")
                cells[(name, kind, level)] = _score_cell(outputs, clean, kind, level)

            for name in sorted(ext_dirs):
                cell_dir = ext_dirs[name] / cell_name
                files = sorted(cell_dir.glob("*.png")) if cell_dir.is_dir() else []
                if len(files) != n:
                    raise HarnessError(
                        f"image count mismatch: external method {name!r} has {len(files)} "
                        f"image(s) in {cell_dir}, the comparison uses {n}"
                    )
                outputs = np.stack([read_png(f) for f in files])
                if outputs.shape != clean.shape:
                    raise HarnessError(
                        f"external method {name!r} images have shape {outputs.shape[1:]}, "
                        f"expected {clean.shape[1:]}"
                    )
                cells[(name, kind, level)] = _score_cell(outputs, clean, kind, level)

            if include_baseline:
                baseline = _u8_roundtrip(corrupted)
                if hashlib.sha256(corrupted.tobytes()).hexdigest() != cell_hash:
                    raise HarnessError("baseline quantization mutated the shared corrupted inputs")
                cells[("noisy-input", kind, level)] = _score_cell(baseline, clean, kind, level)

    rows = []
    for name in method_names:
        for kind in kinds:
            for level in levels:
                rec = cells[(name, kind, level)]
                a, s = _level_params(kind, level)
                rows.append(metric_row(rec, cfg_hash=cfg_hash, seed=run_seed, method=name,
                                       sigma_tr_a=a, sigma_tr_sigma=s))
    csv_path = out / "compare.csv"
    write_metric_csv(csv_path, rows)
    return {"csv": str(csv_path), "config": str(out / "config.resolved.json")}
