"""Run configuration and its flat `key = value` file format.

Sections group keys; unknown keys or sections are errors (typo safety).
Parsing then re-serializing is idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [model]
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    input_size: int = 128
    embed_dim: int = 256
    heads: int = 4
    use_gscb: bool = True
    use_lgsb: bool = True
    use_fsab: bool = True
    dtype: str = "float32"
    # [train]
    seed: int = 0
    steps: int = 200
    batch_pairs: int = 8
    learning_rate: float = 0.001
    lr_floor: float = 0.0
    weight_decay: float = 0.05
    warmup_fraction: float = 0.1
    flip_probability: float = 0.5
    # [loss]
    lambda_ce: float = 0.1
    lambda_infonce: float = 1.0
    lambda_dsa: float = 1.3

    def model_config(self, num_classes):
        return ModelConfig(
            stage_channels=tuple(self.stage_channels),
            blocks_per_stage=self.blocks_per_stage,
            input_size=self.input_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            num_classes=num_classes,
            use_gscb=self.use_gscb,
            use_lgsb=self.use_lgsb,
            use_fsab=self.use_fsab,
            dtype=self.dtype,
        )

    def loss_weights(self):
        return LossWeights(self.lambda_ce, self.lambda_infonce, self.lambda_dsa)


_SECTIONS = {
    "model": ["stage_channels", "blocks_per_stage", "input_size", "embed_dim",
              "heads", "use_gscb", "use_lgsb", "use_fsab", "dtype"],
    "train": ["seed", "steps", "batch_pairs", "learning_rate", "lr_floor",
              "weight_decay", "warmup_fraction", "flip_probability"],
    "loss": ["lambda_ce", "lambda_infonce", "lambda_dsa"],
}

_KEY_SECTION = {k: s for s, keys in _SECTIONS.items() for k in keys}


def _parse_value(key, raw):
    raw = raw.strip()
    if key == "stage_channels":
        return tuple(int(v) for v in raw.split(","))
    if key == "dtype":
        if raw not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {raw!r}")
        return raw
    if key.startswith("use_"):
        if raw not in ("true", "false"):
            raise ConfigError(f"{key} must be true or false, got {raw!r}")
        return raw == "true"
    if key in ("blocks_per_stage", "input_size", "embed_dim", "heads", "seed",
               "steps", "batch_pairs"):
        return int(raw)
    return float(raw)


def parse_config(text) -> RunConfig:
    cfg = RunConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _KEY_SECTION:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if section is not None and _KEY_SECTION[key] != section:
            raise ConfigError(f"line {lineno}: key {key!r} does not belong in "
                              f"section [{section}]")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            val = getattr(cfg, key)
            if key == "stage_channels":
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
