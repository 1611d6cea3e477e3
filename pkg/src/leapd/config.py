"""Shared domain types, run configuration and seeding."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import random
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

ALTITUDES = ("low", "medium", "high")
VIEWS = ("front", "side", "bird")
WEATHERS = ("day", "night", "foggy")

PROMPT_MODES = ("manual", "learnable", "detector_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class DomainLabel:
    """Shooting condition of one image. ``class_index`` is assigned per dataset."""

    altitude: str
    view: str
    weather: str
    class_index: int = 0

    def __post_init__(self):
        if self.altitude not in ALTITUDES:
            raise ValueError(f"unknown altitude {self.altitude!r}")
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.weather not in WEATHERS:
            raise ValueError(f"unknown weather {self.weather!r}")
        if self.class_index < 0:
            raise ValueError("class_index must be non-negative")

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.altitude, self.view, self.weather)


def triple_sort_key(triple: tuple[str, str, str]) -> tuple[int, int, int]:
    return (ALTITUDES.index(triple[0]), VIEWS.index(triple[1]), WEATHERS.index(triple[2]))


def index_domains(triples: Iterable[tuple[str, str, str]]) -> dict[tuple[str, str, str], int]:
    """Map each distinct triple to a class index, in vocabulary order."""
    distinct = sorted(set(tuple(t) for t in triples), key=triple_sort_key)
    return {t: i for i, t in enumerate(distinct)}


@dataclass
class ImageSample:
    """An image (C, H, W) in [0, 1] with ``(x, y, w, h, category)`` boxes in pixels.

    ``ignored`` holds ``(x, y, w, h)`` regions excluded from training targets and
    evaluation.
    """

    image: np.ndarray
    boxes: list[tuple[float, float, float, float, int]]
    domain: DomainLabel
    id: str
    ignored: list[tuple[float, float, float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be (C, H, W), got shape {self.image.shape}")
        _, h, w = self.image.shape
        for x, y, bw, bh, _cat in self.boxes:
            if bw <= 0 or bh <= 0:
                raise ValueError(f"{self.id}: box with non-positive size {(x, y, bw, bh)}")
            if x < 0 or y < 0 or x + bw > w or y + bh > h:
                raise ValueError(f"{self.id}: box {(x, y, bw, bh)} outside {w}x{h} image")


@dataclass(frozen=True)
class RunConfig:
    embed_dim: int = 64
    prompt_len: int = 8
    temperature: float = 0.01
    lambda_od: float = 1.0
    lambda_lp: float = 1.0
    lambda_di: float = 0.5
    lambda_ds: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    # "weight_decay": the decay figure is an L2 coefficient; "schedule": lr / (1 + decay * step)
    decay_mode: str = "weight_decay"
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0
    clamp_eps: float = 1e-7
    prompt_mode: str = "learnable"
    # 0 means: count distinct training triples
    n_sc: int = 0
    token_dim: int = 32
    text_hidden: int = 64
    vocab_size: int = 1024
    max_seq_len: int = 16
    freeze_image_encoder: bool = True
    # "auto": frozen for learnable prompts, trainable for manual prompts
    freeze_text_encoder: str = "auto"
    ds_target: str = "all"
    align_level: str = "top"
    strides: tuple[int, ...] = (8, 16)
    pyramid_channels: int = 32
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    two_step: bool = False
    stage1_epochs: int = 12

    def __post_init__(self):
        validate(self)

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda_od, self.lambda_lp, self.lambda_di, self.lambda_ds)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()

    @property
    def text_encoder_frozen(self) -> bool:
        if self.freeze_text_encoder == "auto":
            return self.prompt_mode != "manual"
        return self.freeze_text_encoder == "true"


def validate(cfg: RunConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.temperature > 0, "temperature must be positive")
    need(0 < cfg.clamp_eps <= 0.01, "clamp_eps must lie in (0, 0.01]")
    for name in ("lambda_od", "lambda_lp", "lambda_di", "lambda_ds", "weight_decay"):
        need(getattr(cfg, name) >= 0, f"{name} must be non-negative")
    need(cfg.lr > 0, "lr must be positive")
    need(0 <= cfg.momentum < 1, "momentum must lie in [0, 1)")
    need(1 <= cfg.prompt_len <= 64, "prompt_len must lie in [1, 64]")
    for name in ("embed_dim", "token_dim", "text_hidden", "vocab_size", "max_seq_len",
                 "batch_size", "pyramid_channels", "max_detections"):
        need(getattr(cfg, name) >= 1, f"{name} must be at least 1")
    need(cfg.epochs >= 0, "epochs must be non-negative")
    need(cfg.stage1_epochs >= 0, "stage1_epochs must be non-negative")
    need(cfg.n_sc >= 0, "n_sc must be non-negative")
    need(cfg.prompt_mode in PROMPT_MODES, f"prompt_mode must be one of {PROMPT_MODES}")
    need(cfg.decay_mode in ("weight_decay", "schedule"), "decay_mode must be weight_decay or schedule")
    need(cfg.freeze_text_encoder in ("auto", "true", "false"), "freeze_text_encoder must be auto, true or false")
    need(cfg.ds_target in ("all", "own"), "ds_target must be all or own")
    need(cfg.align_level in ("top", "mean") or cfg.align_level.lstrip("-").isdigit(),
         "align_level must be top, mean or an integer level")
    need(len(cfg.strides) >= 2, "at least two pyramid strides are required")
    need(cfg.strides[0] >= 4 and all(b == 2 * a for a, b in zip(cfg.strides, cfg.strides[1:])),
         "strides must start at >= 4 and double per level")
    need(all((s & (s - 1)) == 0 for s in cfg.strides), "strides must be powers of two")
    need(0 <= cfg.nms_iou <= 1, "nms_iou must lie in [0, 1]")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} ({source}:{lineno})")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (string values)."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Seeds:
    """Named, independent random streams derived from one integer seed.

    Each consumer (``"detector"``, ``"prompts"``, ``"shuffle"``...) gets its own
    stream, so adding or removing a consumer never shifts another one's draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def derive(self, name: str) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63 - 1)

    def torch(self, name: str) -> torch.Generator:
        return torch.Generator().manual_seed(self.derive(name))

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.derive(name))


def seed_all(seed: int) -> Seeds:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return Seeds(seed)


class seeded:
    """Context manager: run parameter construction under a derived torch seed.

    Construction also runs with float32 as the default dtype, so initial values
    do not depend on whatever the caller set globally; models are cast to
    float64 afterwards.
    """

    def __init__(self, seeds: Seeds, name: str):
        self._fork = torch.random.fork_rng()
        self._seed = seeds.derive(name)
        self._dtype = None

    def __enter__(self):
        self._fork.__enter__()
        torch.manual_seed(self._seed)
        self._dtype = torch.get_default_dtype()
        torch.set_default_dtype(torch.float32)
        return self

    def __exit__(self, *exc):
        torch.set_default_dtype(self._dtype)
        return self._fork.__exit__(*exc)
