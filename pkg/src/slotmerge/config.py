"""Run configuration: a flat ``key=value`` text file.

Blank lines and lines starting with ``#`` are skipped. Every key must be a
field of ``ModelConfig``; ``none`` sets an optional field to ``None``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

from .errors import ConfigError

MERGE_MODES = ("off", "inference_only", "training")

# keys that fix parameter shapes; a checkpoint only loads into a matching config
ARCHITECTURE_KEYS = ("canvas_h", "canvas_w", "patch_size", "d", "d_slots", "d_attn", "mlp_hidden",
                     "decoder_hidden", "decoder_patch")


@dataclass
class ModelConfig:
    canvas_h: int = 32
    canvas_w: int = 32
    patch_size: int = 4
    d: int = 64
    d_slots: int = 64
    d_attn: int = 64
    mlp_hidden: int = 128
    k_init: int = 6
    iters: int = 3
    decoder_hidden: int = 32
    decoder_patch: int = 4
    mlp_residual: bool = True

    merge_mode: str = "training"
    merge_start_epoch: int = 15
    merge_policy: str = "incremental"
    tau: Optional[float] = None
    force_tau: Optional[float] = None
    detach_gradients: bool = False
    update_attention: bool = True
    calibrate: bool = True
    calib_batches: int = 11
    calib_agg: str = "mean"

    epochs: int = 30
    batch_size: int = 32
    lr_peak: float = 4e-4
    lr_min: float = 4e-7
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    clip_inf_norm: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k_init < 1:
            raise ConfigError("k_init must be at least 1")
        if self.iters < 1:
            raise ConfigError("iters must be at least 1")
        for name in ("canvas_h", "canvas_w"):
            size = getattr(self, name)
            if size % self.patch_size or size % self.decoder_patch:
                raise ConfigError(f"{name}={size} is not divisible by the patch sizes")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge_mode must be one of {MERGE_MODES}")
        if self.merge_policy not in ("naive", "incremental"):
            raise ConfigError("merge_policy must be naive or incremental")
        if self.calib_agg not in ("mean", "mean_minus_std"):
            raise ConfigError("calib_agg must be mean or mean_minus_std")
        for name in ("tau", "force_tau"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lr_peak <= 0 or self.lr_min <= 0 or self.lr_min > self.lr_peak:
            raise ConfigError("need 0 < lr_min <= lr_peak")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("batch_size, epochs and warmup_steps must be non-negative (batch_size >= 1)")
        if self.merge_start_epoch < 0:
            raise ConfigError("merge_start_epoch must be non-negative")

    @property
    def grid(self) -> tuple[int, int]:
        return self.canvas_h // self.patch_size, self.canvas_w // self.patch_size

    @property
    def decoder_grid(self) -> tuple[int, int]:
        return self.canvas_h // self.decoder_patch, self.canvas_w // self.decoder_patch

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in ARCHITECTURE_KEYS}

    # -- text format -----------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(key, types[key], value)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _parse(key: str, typ: str, value: str):
    try:
        if typ.startswith("Optional"):
            if value.lower() == "none":
                return None
            typ = typ[len("Optional["):-1]
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
