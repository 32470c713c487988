from __future__ import annotations

import os
import re
from typing import Any, Dict, Literal, Mapping, Optional, Tuple

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import UsageError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=None, case_sensitive=False, populate_by_name=True, extra="forbid")

    seed: int = Field(default=0, alias="TKB_SEED")
    threads: int = Field(default=1, ge=1, alias="TKB_THREADS")
    log_level: str = Field(default="INFO", alias="TKB_LOG_LEVEL")
    resize_to: int = Field(default=256, gt=0, alias="TKB_RESIZE_TO")

    # backbone
    patch_size: int = Field(default=16, ge=1, alias="TKB_PATCH_SIZE")
    embed_dim: int = Field(default=64, ge=1, alias="TKB_EMBED_DIM")
    depth: int = Field(default=4, ge=0, alias="TKB_DEPTH")
    num_heads: int = Field(default=4, ge=1, alias="TKB_NUM_HEADS")
    mlp_ratio: float = Field(default=4.0, gt=0, alias="TKB_MLP_RATIO")
    num_patches: int = Field(default=196, ge=1, alias="TKB_NUM_PATCHES")
    channels: int = Field(default=3, alias="TKB_CHANNELS")
    use_pos_embed: bool = Field(default=True, alias="TKB_USE_POS_EMBED")
    pooling: str = Field(default="cls", alias="TKB_POOLING")

    # disruption
    sim_threshold: float = Field(default=0.3, alias="TKB_SIM_THRESHOLD")
    alpha: float = Field(default=1.0, gt=0, alias="TKB_ALPHA")
    balance_granularity: Literal["patch", "cluster"] = Field(default="patch", alias="TKB_BALANCE_GRANULARITY")
    grid_choices: str = Field(default="1,2,4,7,8,14", alias="TKB_GRID_CHOICES")
    warmup_epochs: int = Field(default=10, ge=0, alias="TKB_WARMUP_EPOCHS")
    total_epochs: int = Field(default=50, ge=1, alias="TKB_TOTAL_EPOCHS")

    # episodic
    way: int = Field(default=5, alias="TKB_WAY")
    shot: int = Field(default=5, alias="TKB_SHOT")
    query: int = Field(default=15, alias="TKB_QUERY")
    episodes: int = Field(default=600, alias="TKB_EPISODES")
    metric: str = Field(default="euclidean", alias="TKB_METRIC")

    max_cka_samples: int = Field(default=2048, ge=2, alias="TKB_MAX_CKA_SAMPLES")

    def vit_config(self, **overrides: Any):
        from .vitmini import ViTConfig

        values = dict(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            num_patches=self.num_patches,
            channels=self.channels,
            use_pos_embed=self.use_pos_embed,
            pooling=self.pooling,
        )
        values.update(overrides)
        return _build(ViTConfig, values)

    def disruption_config(self, method: str, **overrides: Any):
        from .disrupt import DisruptionConfig

        values = dict(
            method=method.upper(),
            sim_threshold=self.sim_threshold,
            alpha=self.alpha,
            granularity=self.balance_granularity,
            grid_choices=parse_grid_list(self.grid_choices),
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.total_epochs,
            master_seed=self.seed,
            patch_size=self.patch_size,
            resize_to=self.resize_to,
        )
        values.update(overrides)
        return _build(DisruptionConfig, values)


def _build(model: type, values: Dict[str, Any]):
    try:
        return model(**values)
    except ValidationError as e:
        raise UsageError(f"invalid {model.__name__}: {e}") from e


def parse_grid_list(text: str) -> Tuple[Tuple[int, int], ...]:
    """Parse "1,2,4x4,7*7" into ((1, 1), (2, 2), (4, 4), (7, 7))."""
    out = []
    for part in (text or "").split(","):
        part = part.strip().lower()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)(?:\s*[x*]\s*(\d+))?", part)
        if not m:
            raise UsageError(f"bad grid spec: {part!r}")
        rows = int(m.group(1))
        cols = int(m.group(2) or m.group(1))
        if rows < 1 or cols < 1:
            raise UsageError(f"grid sides must be positive: {part!r}")
        out.append((rows, cols))
    if not out:
        raise UsageError("grid list is empty")
    return tuple(out)


def read_config_file(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)\s*[=:]\s*(.*)", line)
            if not m:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            values[m.group(1).lower()] = m.group(2).strip().strip('"').strip("'")
    return values


def load_settings(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> Settings:
    values: Dict[str, Any] = {}
    if config_path:
        values.update(read_config_file(config_path))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v

    known = set(Settings.model_fields)
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")

    # pass by alias so explicit values win over TKB_* environment variables
    return _build(Settings, {Settings.model_fields[k].alias or k: v for k, v in values.items()})
