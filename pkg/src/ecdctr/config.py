"""Run configuration: defaults, key=value file parsing, fingerprinting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields as dc_fields

from .errors import ConfigError

VARIANTS = ("full", "target_only", "plus_tpm", "plus_cpm",
            "source_only", "sample_merging")
TRANSFER_VARIANTS = ("all", "embeddings_only", "mlp_wo_bn", "all_with_bn")


@dataclass
class RunConfig:
    # world
    users: int = 20000
    items: int = 5000
    latent_dim: int = 8
    drift_rate: float = 0.2
    ad_item_fraction: float = 0.1
    ad_rotation: float = 1.6
    natural_ctr: float = 0.08
    ad_ctr: float = 0.02
    natural_volume_month: int = 200000
    ad_volume_month: int = 20000
    score_scale: float = 1.8
    popularity_scale: float = 0.7
    ad_quality_scale: float = 1.6
    item_exponent: float = 0.4
    user_exponent: float = 0.85
    # model
    embed_dim: int = 16
    tiny_hidden: int = 32
    hidden: tuple[int, ...] = (128, 64, 32)
    share_attention: bool = False
    # schedule
    horizon_months: int = 8
    retention_k: int = 3
    history_months: int = 3
    warmup_months: int = 6
    # training
    tiny_learning_rate: float = 0.01
    tiny_batch: int = 512
    learning_rate: float = 0.001
    batch: int = 256
    epochs: int = 1
    # run
    variant: str = "full"
    transfer_variant: str = "all"
    seeds: tuple[int, ...] = (1, 2, 3)
    out_dir: str = "out"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.transfer_variant not in TRANSFER_VARIANTS:
            raise ConfigError(f"unknown transfer variant {self.transfer_variant!r}")
        if not 1 <= self.history_months <= 3:
            raise ConfigError("history_months must be 1, 2, or 3")
        if self.horizon_months < 1:
            raise ConfigError("horizon_months must be >= 1")
        if min(self.users, self.items, self.latent_dim, self.embed_dim) < 1:
            raise ConfigError("users/items/latent_dim/embed_dim must be >= 1")
        if not 0 < self.ad_item_fraction <= 1:
            raise ConfigError("ad_item_fraction must be in (0, 1]")
        if self.natural_volume_month < 0 or self.ad_volume_month < 0:
            raise ConfigError("volumes must be >= 0")
        if min(self.tiny_batch, self.batch) < 2:
            raise ConfigError("batch sizes must be >= 2 (batch norm)")
        if self.warmup_months < self.retention_k:
            raise ConfigError("warmup_months must cover retention_k months")

    # -- key=value round trip ------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        """Hash of every setting that affects results (out_dir excluded)."""
        text = "\n".join(
            line for line in self.to_text().splitlines()
            if not line.startswith("out_dir="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        cfg = RunConfig(**{f.name: getattr(self, f.name) for f in dc_fields(self)})
        apply_overrides(cfg, overrides)
        return cfg


_FIELD_TYPES = {f.name: f.type for f in dc_fields(RunConfig)}
_TUPLE_FIELDS = {"hidden": int, "seeds": int}
_BOOL_FIELDS = {"share_attention"}


def _parse_value(key: str, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(raw, (int, float, bool, tuple)):
        return raw
    raw = raw.strip()
    if key in _TUPLE_FIELDS:
        if raw == "":
            return ()
        return tuple(_TUPLE_FIELDS[key](x) for x in raw.split(","))
    if key in _BOOL_FIELDS:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply_overrides(cfg: RunConfig, overrides: dict) -> None:
    for key, raw in overrides.items():
        setattr(cfg, key, _parse_value(key, raw))


def load_config(path, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            setattr(cfg, key.strip(), _parse_value(key.strip(), raw))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
