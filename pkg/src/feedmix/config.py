"""Flat key=value configuration with module prefixes
(e.g. `scheduler.tick_interval_s=5`). Unknown keys are a startup error so
typos never silently fall back to defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

ENV_CONFIG_PATH = "FEEDMIX_CONFIG"


class ConfigError(Exception):
    pass


def _as_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass
class AppConfig:
    store_root: str = "feedmix_data"
    admin_listen: str = "127.0.0.1:8687"
    log_level: str = "INFO"

    scheduler_tick_interval_s: float = 5.0
    scheduler_pick_horizon_s: float | None = None
    scheduler_pick_limit: int = 1000
    scheduler_stale_after_s: float = 900.0

    queue_capacity: int = 100_000
    queue_visibility_timeout_s: float = 30.0

    dispatch_target_buffer: int = 100
    dispatch_processed_trigger: int = 25
    dispatch_timeout_trigger_s: float = 2.0
    dispatch_batch_max: int = 10
    dispatch_mailbox_capacity: int = 256
    dispatch_pool_min: int = 1
    dispatch_pool_max: int = 64
    dispatch_explore_probability: float = 0.4
    dispatch_resize_epoch_s: float = 10.0
    dispatch_rng_seed: int = 0

    worker_fetch_timeout_s: float = 10.0

    monitor_bucket_window_s: float = 300.0
    monitor_dead_letter_threshold: int = 100
    monitor_ring_size: int = 10_000
    monitor_alert_webhook_url: str | None = None

    @property
    def admin_host(self) -> str:
        return self.admin_listen.rsplit(":", 1)[0]

    @property
    def admin_port(self) -> int:
        return int(self.admin_listen.rsplit(":", 1)[1])


# Documented key set: dotted config key -> (attribute, caster).
CONFIG_KEYS = {
    "store_root": ("store_root", str),
    "admin_listen": ("admin_listen", str),
    "log_level": ("log_level", str),
    "scheduler.tick_interval_s": ("scheduler_tick_interval_s", float),
    "scheduler.pick_horizon_s": ("scheduler_pick_horizon_s", float),
    "scheduler.pick_limit": ("scheduler_pick_limit", int),
    "scheduler.stale_after_s": ("scheduler_stale_after_s", float),
    "queue.capacity": ("queue_capacity", int),
    "queue.visibility_timeout_s": ("queue_visibility_timeout_s", float),
    "dispatch.target_buffer": ("dispatch_target_buffer", int),
    "dispatch.processed_trigger": ("dispatch_processed_trigger", int),
    "dispatch.timeout_trigger_s": ("dispatch_timeout_trigger_s", float),
    "dispatch.batch_max": ("dispatch_batch_max", int),
    "dispatch.mailbox_capacity": ("dispatch_mailbox_capacity", int),
    "dispatch.pool_min": ("dispatch_pool_min", int),
    "dispatch.pool_max": ("dispatch_pool_max", int),
    "dispatch.explore_probability": ("dispatch_explore_probability", float),
    "dispatch.resize_epoch_s": ("dispatch_resize_epoch_s", float),
    "dispatch.rng_seed": ("dispatch_rng_seed", int),
    "worker.fetch_timeout_s": ("worker_fetch_timeout_s", float),
    "monitor.bucket_window_s": ("monitor_bucket_window_s", float),
    "monitor.dead_letter_threshold": ("monitor_dead_letter_threshold", int),
    "monitor.ring_size": ("monitor_ring_size", int),
    "monitor.alert_webhook_url": ("monitor_alert_webhook_url", str),
}


def parse_config_text(text: str, source: str = "<config>") -> AppConfig:
    cfg = AppConfig()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        attr, caster = CONFIG_KEYS[key]
        try:
            setattr(cfg, attr, caster(value))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    _validate(cfg, source)
    return cfg


def _validate(cfg: AppConfig, source: str) -> None:
    try:
        cfg.admin_port
    except (ValueError, IndexError):
        raise ConfigError(f"{source}: admin_listen must be host:port, got {cfg.admin_listen!r}")
    if cfg.dispatch_pool_min < 1 or cfg.dispatch_pool_max < cfg.dispatch_pool_min:
        raise ConfigError(f"{source}: pool bounds [{cfg.dispatch_pool_min}, {cfg.dispatch_pool_max}] invalid")
    if not (0.0 <= cfg.dispatch_explore_probability <= 1.0):
        raise ConfigError(f"{source}: explore_probability must be in [0, 1]")
    if cfg.dispatch_processed_trigger > cfg.dispatch_target_buffer:
        raise ConfigError(f"{source}: processed_trigger exceeds target_buffer")


def load_config(path: str | Path | None = None) -> AppConfig:
    """Load from an explicit path, or the FEEDMIX_CONFIG fallback, or pure
    defaults when neither is set."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH)
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


__all__ = ["AppConfig", "CONFIG_KEYS", "ConfigError", "ENV_CONFIG_PATH", "load_config", "parse_config_text"]
