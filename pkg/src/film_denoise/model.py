"""FiLM-conditioned U-Net and its checkpoint format.

Architecture (depth D, base channels B, input (C, H, W)):

* Encoder level i: two 3x3 conv blocks at B*2^i channels, then 2x2 maxpool.
* Bottleneck: two 3x3 conv blocks at B*2^D channels.
* Decoder level i: nearest 2x upsample, a 3x3 projection conv (ReLU, no
  modulation), channel-concat with the mirrored encoder skip, then two 3x3
  conv blocks.
* Head: linear 1x1 conv back to C channels.

Every paired conv block is a FiLM site: right after the conv's bias add and
before its ReLU the feature map is transformed per sample and channel as
``gamma * r + beta``.  The conditioner maps the 2-vector (a, sigma) through a
small per-site MLP; each site's gamma head starts as weights 0 / bias 1 and
its beta head as all zeros, so a freshly built model is exactly the
unmodulated backbone.

Parameters are split into two groups: ``backbone`` (all convs) and ``film``
(all conditioner MLPs); two-phase training freezes one group at a time.

Checkpoints (`.fuw`) are little-endian: magic, format version u32, then
length-prefixed JSON config and metadata, per-parameter records
(name, group byte, rank, extents, raw float32 data) and optional Adam state.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ops
from .engine.optim import Adam
from .engine.tensor import Parameter, Tensor
from .noise import NoiseParams, rng_stream

__all__ = [
    "ModelConfig",
    "FilmUnet",
    "Checkpoint",
    "CheckpointError",
    "PRESETS",
    "build",
    "condition",
    "forward",
    "forward_backbone",
    "partition",
    "set_trainable",
    "save",
    "load",
    "load_checkpoint",
    "group_hash",
]

GROUPS = ("backbone", "film")
_GROUP_BYTE = {"backbone": 0, "film": 1}
_BYTE_GROUP = {v: k for k, v in _GROUP_BYTE.items()}

MAGIC = b"FUWCKPT1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    depth: int = 3
    base_channels: int = 32
    film_sites: tuple[str, ...] | None = None  # None = every paired conv block
    conditioner_hidden: tuple[int, ...] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        c, h, w = self.input_shape
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"invalid input shape {self.input_shape}")
        factor = 1 << self.depth
        if h % factor or w % factor:
            raise ValueError(
                f"input extents ({h}, {w}) must divide by 2^depth = {factor}"
            )
        if self.film_sites is not None and len(self.film_sites) == 0:
            raise ValueError("film_sites must be non-empty (or None for all blocks)")
        if not self.conditioner_hidden:
            raise ValueError("conditioner_hidden must list at least one width")

    def block_names(self) -> list[str]:
        """All paired conv blocks, i.e. the candidate FiLM sites, in network order."""
        names = []
        for i in range(self.depth):
            names += [f"enc{i}.conv1", f"enc{i}.conv2"]
        names += ["mid.conv1", "mid.conv2"]
        for i in range(self.depth):
            names += [f"dec{i}.conv1", f"dec{i}.conv2"]
        return names

    def resolved_sites(self) -> tuple[str, ...]:
        blocks = self.block_names()
        if self.film_sites is None:
            return tuple(blocks)
        unknown = [s for s in self.film_sites if s not in blocks]
        if unknown:
            raise ValueError(f"film_sites name unknown conv blocks: {unknown}")
        return tuple(self.film_sites)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["film_sites"] = list(self.resolved_sites())
        d["input_shape"] = list(self.input_shape)
        d["conditioner_hidden"] = list(self.conditioner_hidden)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        return cls(
            input_shape=tuple(d["input_shape"]),
            depth=int(d["depth"]),
            base_channels=int(d["base_channels"]),
            film_sites=tuple(d["film_sites"]) if d.get("film_sites") is not None else None,
            conditioner_hidden=tuple(d["conditioner_hidden"]),
            seed=int(d["seed"]),
        )


PRESETS: dict[str, ModelConfig] = {
    # fast unit-test scale
    "tiny16": ModelConfig(input_shape=(3, 16, 16), depth=2, base_channels=8,
                          conditioner_hidden=(8, 8)),
    # reference desk scale: trains in minutes on CPU
    "desk32": ModelConfig(input_shape=(3, 32, 32), depth=3, base_channels=32),
    # large-image preset, qualitative analog of the full-scale model;
    # out of desk-scale budgets by design
    "large128": ModelConfig(input_shape=(3, 128, 128), depth=4, base_channels=64,
                            conditioner_hidden=(64, 64)),
}


def _conv_plan(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(block, c_in, c_out, kernel) for every conv in network order."""
    c_img = cfg.input_shape[0]
    b = cfg.base_channels
    plan: list[tuple[str, int, int, int]] = []
    c_prev = c_img
    for i in range(cfg.depth):
        ch = b << i
        plan.append((f"enc{i}.conv1", c_prev, ch, 3))
        plan.append((f"enc{i}.conv2", ch, ch, 3))
        c_prev = ch
    ch_mid = b << cfg.depth
    plan.append(("mid.conv1", c_prev, ch_mid, 3))
    plan.append(("mid.conv2", ch_mid, ch_mid, 3))
    c_prev = ch_mid
    for i in range(cfg.depth):
        ch = b << (cfg.depth - 1 - i)
        plan.append((f"dec{i}.up", c_prev, ch, 3))
        plan.append((f"dec{i}.conv1", 2 * ch, ch, 3))
        plan.append((f"dec{i}.conv2", ch, ch, 3))
        c_prev = ch
    plan.append(("head", c_prev, c_img, 1))
    return plan


def block_channels(cfg: ModelConfig) -> dict[str, int]:
    """Output channel count per paired conv block (the FiLM site width)."""
    return {name: c_out for name, _, c_out, _ in _conv_plan(cfg) if name in cfg.block_names()}


class FilmUnet:
    """Built model: ordered parameters plus the normalized config.

    Construct via :func:`build`; the constructor only wires given parts.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._params = dict(params)
        self.trainable_groups: frozenset[str] = frozenset(GROUPS)

    @property
    def sites(self) -> tuple[str, ...]:
        return self.config.resolved_sites()

    @property
    def dtype(self):
        return next(iter(self._params.values())).data.dtype

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def parameters(self, groups=None) -> list[Parameter]:
        """Parameters in creation order, optionally filtered by group."""
        if groups is None:
            return list(self._params.values())
        groups = set(groups)
        return [p for p in self._params.values() if p.group in groups]

    def trainable_parameters(self) -> list[Parameter]:
        return self.parameters(self.trainable_groups)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> FilmUnet:
    """Deterministically initialize a FilmUnet from its config seed.

    The same config (seed included) always yields bit-identical parameters;
    passing an explicit ``rng`` overrides the seed-derived stream.
    """
    config = dataclasses.replace(config, film_sites=config.resolved_sites())
    if rng is None:
        rng = rng_stream(config.seed, "init")
    params: dict[str, Parameter] = {}

    def add(name: str, data: np.ndarray, group: str) -> None:
        params[name] = Parameter(np.asarray(data, dtype=dtype), name, group)

    for name, c_in, c_out, k in _conv_plan(config):
        add(f"{name}.weight", _kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype), "backbone")
        add(f"{name}.bias", np.zeros(c_out), "backbone")

    widths = block_channels(config)
    for site in config.resolved_sites():
        c_site = widths[site]
        d_in = 2
        for j, width in enumerate(config.conditioner_hidden):
            add(f"film.{site}.fc{j}.weight", _kaiming(rng, (width, d_in), d_in, dtype), "film")
            add(f"film.{site}.fc{j}.bias", np.zeros(width), "film")
            d_in = width
        # gamma head opens at the identity encoding (weights 0, bias 1);
        # beta head at all zeros, so a fresh model modulates by (1, 0).
        add(f"film.{site}.gamma.weight", np.zeros((c_site, d_in)), "film")
        add(f"film.{site}.gamma.bias", np.ones(c_site), "film")
        add(f"film.{site}.beta.weight", np.zeros((c_site, d_in)), "film")
        add(f"film.{site}.beta.bias", np.zeros(c_site), "film")

    return FilmUnet(config, params)


def _cond_tensor(model: FilmUnet, p, batch: int | None) -> Tensor:
    if isinstance(p, Tensor):
        t = p
    elif isinstance(p, NoiseParams):
        if batch is None:
            raise ValueError("batch size needed to broadcast a single NoiseParams")
        t = Tensor(np.tile(p.as_array().astype(model.dtype), (batch, 1)))
    else:
        t = Tensor(np.asarray(p, dtype=model.dtype))
    if t.ndim != 2 or t.shape[1] != 2:
        raise ValueError(f"conditioning input must be (N, 2), got shape {t.shape}")
    if batch is not None and t.shape[0] != batch:
        raise ValueError(f"conditioning batch {t.shape[0]} does not match image batch {batch}")
    if t.dtype != model.dtype:
        t = Tensor(t.data.astype(model.dtype))
    return t


def condition(model: FilmUnet, p, batch: int | None = None) -> dict[str, tuple[Tensor, Tensor]]:
    """Per-site (gamma, beta), each (N, C_site), from conditioning input ``p``.

    ``p`` may be a (N, 2) array/Tensor of (a, sigma) rows or a single
    NoiseParams with ``batch`` given.  Pure function of ``p`` and the film
    parameters.
    """
    t = _cond_tensor(model, p, batch)
    out: dict[str, tuple[Tensor, Tensor]] = {}
    n_hidden = len(model.config.conditioner_hidden)
    for site in model.sites:
        h = t
        for j in range(n_hidden):
            h = ops.relu(ops.dense(h, model.param(f"film.{site}.fc{j}.weight").tensor,
                                   model.param(f"film.{site}.fc{j}.bias").tensor))
        gamma = ops.dense(h, model.param(f"film.{site}.gamma.weight").tensor,
                          model.param(f"film.{site}.gamma.bias").tensor)
        beta = ops.dense(h, model.param(f"film.{site}.beta.weight").tensor,
                         model.param(f"film.{site}.beta.bias").tensor)
        out[site] = (gamma, beta)
    return out


def _check_input(model: FilmUnet, x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    if t.ndim != 4 or tuple(t.shape[1:]) != tuple(model.config.input_shape):
        raise ValueError(
            f"input shape {t.shape} does not match config (N, {', '.join(map(str, model.config.input_shape))})"
        )
    if t.dtype != model.dtype:
        t = Tensor(t.data.astype(model.dtype))
    return t


def _run_backbone(model: FilmUnet, x: Tensor, mods: dict[str, tuple[Tensor, Tensor]] | None) -> Tensor:
    cfg = model.config

    def conv(name: str, h: Tensor, padding: str = "same") -> Tensor:
        return ops.conv2d(h, model.param(f"{name}.weight").tensor,
                          model.param(f"{name}.bias").tensor, padding=padding)

    def block(name: str, h: Tensor) -> Tensor:
        h = conv(name, h)
        if mods is not None and name in mods:
            gamma, beta = mods[name]
            h = ops.affine_modulate(h, gamma, beta)
        return ops.relu(h)

    skips = []
    h = x
    for i in range(cfg.depth):
        h = block(f"enc{i}.conv1", h)
        h = block(f"enc{i}.conv2", h)
        skips.append(h)
        h = ops.maxpool2d(h, 2)
    h = block("mid.conv1", h)
    h = block("mid.conv2", h)
    for i in range(cfg.depth):
        h = ops.upsample_nearest(h, 2)
        h = ops.relu(conv(f"dec{i}.up", h))
        h = ops.concat_channels(h, skips[cfg.depth - 1 - i])
        h = block(f"dec{i}.conv1", h)
        h = block(f"dec{i}.conv2", h)
    return conv("head", h)


def forward(model: FilmUnet, noisy, p) -> Tensor:
    """Denoised estimate of ``noisy`` (N, C, H, W) conditioned on ``p``."""
    x = _check_input(model, noisy)
    mods = condition(model, p, batch=x.shape[0])
    return _run_backbone(model, x, mods)


def forward_backbone(model: FilmUnet, noisy) -> Tensor:
    """The unmodulated U-Net path; equals :func:`forward` when (gamma, beta) = (1, 0)."""
    x = _check_input(model, noisy)
    return _run_backbone(model, x, None)


def partition(model: FilmUnet) -> tuple[list[Parameter], list[Parameter], dict[str, int]]:
    """Disjoint, exhaustive (backbone, film) split with element counts."""
    backbone = model.parameters(["backbone"])
    film = model.parameters(["film"])
    counts = {
        "backbone": sum(p.size for p in backbone),
        "film": sum(p.size for p in film),
    }
    counts["total"] = counts["backbone"] + counts["film"]
    return backbone, film, counts


def set_trainable(model: FilmUnet, groups) -> None:
    """Select which parameter groups receive gradients and optimizer updates.

    Frozen parameters also stop requiring grad, so backward skips their
    gradient GEMMs entirely.
    """
    groups = frozenset(groups)
    if not groups:
        raise ValueError("trainable group set must not be empty")
    unknown = groups - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}, expected subset of {GROUPS}")
    model.trainable_groups = groups
    for param in model.parameters():
        param.tensor.requires_grad = param.group in groups


def group_hash(model: FilmUnet, group: str) -> str:
    """SHA-256 over the group's raw parameter bytes, in creation order."""
    h = hashlib.sha256()
    for p in model.parameters([group]):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Decoded .fuw contents."""

    version: int
    config: ModelConfig
    metadata: dict
    records: list[tuple[str, str, np.ndarray]]  # (name, group, float32 data)
    optimizer_t: int | None = None
    optimizer_state: dict[str, np.ndarray] | None = None


def _write_exact(buf: io.BufferedIOBase, data: bytes) -> None:
    buf.write(data)


def save(model: FilmUnet, path, optimizer: Adam | None = None, metadata: dict | None = None) -> None:
    """Serialize model (and optionally Adam state) to a .fuw file."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_bytes = model.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name_bytes = p.name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<BB", _GROUP_BYTE[p.group], p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optimizer.t))
        state = optimizer.state_arrays()
        # per-record presence byte: the optimizer may cover only the
        # trainable subset (frozen groups carry no moment estimates)
        for p in params:
            if p.name + ".m" in state:
                buf.write(struct.pack("<B", 1))
                for suffix in (".m", ".v"):
                    buf.write(np.ascontiguousarray(state[p.name + suffix], dtype="<f4").tobytes())
            else:
                buf.write(struct.pack("<B", 0))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint, needed {n} byte(s) for {what} "
                f"at offset {self.pos} but only {len(self.blob) - self.pos} remain"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> Checkpoint:
    """Decode a .fuw file without instantiating a model."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a .fuw checkpoint (bad magic {magic!r})")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version}, expected {FORMAT_VERSION}"
        )
    cfg_len = r.u32("config length")
    try:
        config = ModelConfig.from_json(r.take(cfg_len, "config JSON").decode("utf-8"))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    meta_len = r.u32("metadata length")
    metadata = json.loads(r.take(meta_len, "metadata JSON").decode("utf-8"))
    n_params = r.u32("parameter count")
    records: list[tuple[str, str, np.ndarray]] = []
    for i in range(n_params):
        name_len = r.u32(f"name length of record {i}")
        name = r.take(name_len, f"name of record {i}").decode("utf-8")
        group_byte = r.u8(f"group of {name!r}")
        if group_byte not in _BYTE_GROUP:
            raise CheckpointError(f"{path}: record {name!r} has unknown group byte {group_byte}")
        rank = r.u8(f"rank of {name!r}")
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name!r}"))
        count = int(np.prod(extents, dtype=np.int64)) if rank else 1
        raw = r.take(4 * count, f"data of {name!r}")
        data = np.frombuffer(raw, dtype="<f4").reshape(extents).copy()
        records.append((name, _BYTE_GROUP[group_byte], data))
    opt_flag = r.u8("optimizer flag")
    optimizer_t = None
    optimizer_state = None
    if opt_flag == 1:
        optimizer_t = struct.unpack("<Q", r.take(8, "optimizer step count"))[0]
        optimizer_state = {}
        for name, _, data in records:
            present = r.u8(f"optimizer presence of {name!r}")
            if present not in (0, 1):
                raise CheckpointError(
                    f"{path}: record {name!r} has invalid optimizer presence byte {present}"
                )
            if present:
                for suffix in (".m", ".v"):
                    raw = r.take(4 * data.size, f"optimizer {suffix[1:]} of {name!r}")
                    optimizer_state[name + suffix] = np.frombuffer(raw, dtype="<f4").reshape(data.shape).copy()
    elif opt_flag != 0:
        raise CheckpointError(f"{path}: invalid optimizer flag {opt_flag}")
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing byte(s) after checkpoint data")
    return Checkpoint(version, config, metadata, records, optimizer_t, optimizer_state)


def load(path) -> FilmUnet:
    """Rebuild the model from a .fuw file; forward outputs are bit-identical to save time."""
    ckpt = load_checkpoint(path)
    model = build(ckpt.config)
    expected = {p.name: p for p in model.parameters()}
    seen = set()
    for name, group, data in ckpt.records:
        if name not in expected:
            raise CheckpointError(f"{path}: record {name!r} does not exist in the embedded config's model")
        p = expected[name]
        if data.shape != p.shape:
            raise CheckpointError(
                f"{path}: record {name!r} has shape {tuple(data.shape)}, "
                f"config implies {tuple(p.shape)}"
            )
        if group != p.group:
            raise CheckpointError(
                f"{path}: record {name!r} has group {group!r}, config implies {p.group!r}"
            )
        p.tensor.data = data.astype(model.dtype)
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameter record(s) {missing[:3]}")
    return model
