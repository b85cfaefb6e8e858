"""Experiment configuration schema.

A single JSON file with four sections (dataset, model, train, eval); every
field has a default, unknown keys are rejected, and parse -> serialize ->
parse is the identity. CLI flags override individual keys through dotted
paths (``--set train.rounds=2``).
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

LOSS_MODES = ("patch_feature", "class_feature", "pixel")
STRATEGIES = ("alternating", "simultaneous", "sm_only")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 0
    in_channels: int = 3
    widths: tuple[int, int] = (32, 32)  # conv widths; widths[1] is the patch dim
    patch_size: int = 4
    class_dim: int = 32
    nonlinearity: str = "tanh"

    @property
    def patch_dim(self) -> int:
        return self.widths[1]


@dataclass(frozen=True)
class DenoiserConfig:
    seed: int = 0
    in_channels: int = 3
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    emb_dim: int = 128
    cond_dim: int = 128


@dataclass(frozen=True)
class DatasetConfig:
    n_objects: int = 8
    n_views: int = 12
    resolution: int = 32
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 1
    m_cl: int = 100  # closed-loop steps per round
    n_sm: int = 900  # score-matching steps per round
    cl_denoise_steps: int = 10  # reverse steps unrolled in closed-loop training
    warm_start: int = 2000  # score-matching steps before round 1
    lr_cl: float = 1e-5
    lr_sm: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    batch_sm: int = 32
    batch_cl: int = 8
    grad_accum_sm: int = 1
    grad_accum_cl: int = 1
    loss_mode: str = "patch_feature"
    strategy: str = "alternating"
    lambda_simul: float = 1.0
    seed: int = 0
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    dtype: str = "float32"


@dataclass(frozen=True)
class EvalConfig:
    denoise_steps: int = 10
    gen_seed: int = 0
    pair_seed: int = 0
    pose_grid_az_step_deg: float = 5.0
    pose_grid_el_step_deg: float = 5.0
    aa_thresholds_deg: tuple[float, ...] = (5.0, 10.0, 15.0, 20.0)
    iou_thresholds: tuple[float, ...] = (0.5, 0.7)
    mask_tau: float = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _from_dict(cls, d: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        raise AssertionError(f"not a config class: {cls}")
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name in known:
        if name not in d:
            continue
        val = d[name]
        sub = f"{path}.{name}" if path else name
        ftype = hints[name]
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = _from_dict(ftype, val, sub)
        elif isinstance(val, list):
            kwargs[name] = tuple(val)
        else:
            kwargs[name] = val
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, d, "")
    validate_config(cfg)
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"--set expects KEY=VALUE, got {ov!r}")
        key, _, raw = ov.partition("=")
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        try:
            node[parts[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[parts[-1]] = raw  # bare strings allowed unquoted
    return config_from_dict(d)


def validate_config(cfg: ExperimentConfig) -> None:
    ds, tr, ev = cfg.dataset, cfg.train, cfg.eval
    if ds.resolution not in (16, 32, 64):
        raise ConfigError(f"dataset.resolution: must be one of (16, 32, 64), got {ds.resolution}")
    if ds.n_objects < 1:
        raise ConfigError("dataset.n_objects: must be >= 1")
    if ds.n_views < 2:
        raise ConfigError("dataset.n_views: must be >= 2")
    if tr.loss_mode not in LOSS_MODES:
        raise ConfigError(f"train.loss_mode: must be one of {LOSS_MODES}, got {tr.loss_mode!r}")
    if tr.strategy not in STRATEGIES:
        raise ConfigError(f"train.strategy: must be one of {STRATEGIES}, got {tr.strategy!r}")
    if tr.dtype not in DTYPES:
        raise ConfigError(f"train.dtype: must be one of {DTYPES}, got {tr.dtype!r}")
    if tr.lr_cl <= 0 or tr.lr_sm <= 0:
        raise ConfigError("train.lr_cl and train.lr_sm must be positive")
    if tr.m_cl < 0 or tr.n_sm < 0 or tr.rounds < 0 or tr.warm_start < 0:
        raise ConfigError("train step counts must be non-negative")
    if tr.cl_denoise_steps < 1:
        raise ConfigError("train.cl_denoise_steps must be >= 1")
    if not 1 <= tr.cl_denoise_steps <= tr.timesteps:
        raise ConfigError("train.cl_denoise_steps must be in [1, train.timesteps]")
    if tr.lambda_simul < 0:
        raise ConfigError("train.lambda_simul must be >= 0")
    if tr.batch_sm < 1 or tr.batch_cl < 1 or tr.grad_accum_sm < 1 or tr.grad_accum_cl < 1:
        raise ConfigError("batch sizes and accumulation factors must be >= 1")
    if not 1 <= ev.denoise_steps <= tr.timesteps:
        raise ConfigError("eval.denoise_steps must be in [1, train.timesteps]")
    if not 0.0 < ev.mask_tau < 1.0:
        raise ConfigError("eval.mask_tau must lie in (0, 1)")
    if cfg.model.denoiser.in_channels != 3 or cfg.model.encoder.in_channels != 3:
        raise ConfigError("model channels must be 3 for image training")
    depth = len(cfg.model.denoiser.channel_mults) - 1
    if ds.resolution % (1 << depth):
        raise ConfigError(
            f"dataset.resolution {ds.resolution} not divisible by 2^{depth} (denoiser depth)"
        )
    if ds.resolution % cfg.model.encoder.patch_size:
        raise ConfigError("dataset.resolution must be divisible by encoder.patch_size")
