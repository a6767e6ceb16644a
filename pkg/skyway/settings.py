"""Environment defaults and YAML experiment manifests.

Environment variables carry process-wide defaults (`SKYWAY_*`, loaded from a
`.env` when present). Experiment manifests are YAML files whose sections map
onto the typed configs of the domain modules; CLI flags override them.
"""
from __future__ import annotations

import copy
import logging
import os
from pathlib import Path
from typing import Any, Mapping

import yaml
from dotenv import load_dotenv

load_dotenv()

LOGGER = logging.getLogger("skyway.settings")


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        LOGGER.warning("Ignoring non-integer %s=%r", name, raw)
        return default


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return float(raw)
    except ValueError:
        LOGGER.warning("Ignoring non-numeric %s=%r", name, raw)
        return default


LOG_LEVEL = os.getenv("SKYWAY_LOG_LEVEL", "INFO").upper()
OUT_DIR = Path(os.getenv("SKYWAY_OUT_DIR", "runs"))
THREADS = max(1, _env_int("SKYWAY_THREADS", 9))
KNOT_INTERVAL = _env_float("SKYWAY_KNOT_INTERVAL", 0.3)
GRID_RESOLUTION = _env_float("SKYWAY_GRID_RESOLUTION", 0.15)
SEED = _env_int("SKYWAY_SEED", 0)

SECTIONS = ("scenario", "env", "reward", "agent", "train", "bench")


class ConfigError(ValueError):
    """Raised for unreadable or malformed experiment manifests."""


def _merge(base: dict[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if value is None:
            continue
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    document: dict[str, Any] = {}
    if path is not None:
        source = Path(path)
        try:
            raw = yaml.safe_load(source.read_text(encoding="utf-8"))
        except OSError as error:
            raise ConfigError(f"cannot read config {source}: {error}") from error
        except yaml.YAMLError as error:
            raise ConfigError(f"invalid YAML in {source}: {error}") from error
        if raw is None:
            raw = {}
        if not isinstance(raw, Mapping):
            raise ConfigError(f"config {source} must be a mapping, got {type(raw).__name__}")
        document = dict(raw)
    label = str(path) if path is not None else "<overrides>"
    merged = _merge(document, overrides or {})
    for key, value in merged.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown section {key!r} in {label}; expected one of {', '.join(SECTIONS)}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"section {key!r} in {label} must be a mapping")
    return {key: dict(merged.get(key, {})) for key in SECTIONS}


def dump_config(config: Mapping[str, Any], path: str | Path) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(yaml.safe_dump(_plain(config), sort_keys=True), encoding="utf-8")
    except OSError as error:
        raise OSError(f"could not write config {target}: {error}") from error
    return target


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        return value.item()
    return value


def _typed(section: Mapping[str, Any], key: str, kind: type, label: str) -> Any:
    value = section[key]
    try:
        if kind is tuple:
            return tuple(value)
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise TypeError(key)
        return kind(value)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"{label}.{key} has bad value {value!r}") from error


def _pick(section: Mapping[str, Any], fields: Mapping[str, type], label: str) -> dict[str, Any]:
    unknown = set(section) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {label}: {', '.join(sorted(unknown))}")
    return {key: _typed(section, key, kind, label) for key, kind in fields.items() if key in section}


def scenario_from_config(config: Mapping[str, Any]):
    from .worldmap import ScenarioSpec, named_scenario

    section = dict(config.get("scenario", {}))
    preset = section.pop("preset", None)
    fields = {
        "kind": str, "extent": tuple, "spacing_near": float, "spacing_far": float,
        "gap_size_range": tuple, "obstacle_count": int, "rng_seed": int, "resolution": float,
        "start": tuple, "goal": tuple, "inflation_voxels": int, "goal_fraction": float,
    }
    values = _pick(section, fields, "scenario")
    if "extent" in values:
        values["extent"] = tuple(tuple(float(c) for c in corner) for corner in values["extent"])
    try:
        if preset is not None:
            base = named_scenario(str(preset), values.pop("rng_seed", SEED))
            spec = base.with_changes(**values)
        else:
            values.setdefault("resolution", GRID_RESOLUTION)
            spec = ScenarioSpec(**values)
        spec.validate()
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid scenario section: {error}") from error
    return spec


def reward_from_config(config: Mapping[str, Any]):
    from .bench import UnknownProfileError, profile_rewards
    from .planner_env import RewardConfig

    section = dict(config.get("reward", {}))
    profile = section.pop("profile", None)
    values = _pick(section, {"k_p": float, "k_f": float, "k_s": float}, "reward")
    try:
        base = RewardConfig() if profile is None or str(profile).lower() == "custom" else profile_rewards(str(profile))
    except UnknownProfileError as error:
        raise ConfigError(str(error)) from error
    return RewardConfig(**{**base.as_dict(), **values})


def env_config_from_config(config: Mapping[str, Any]):
    from .planner_env import ActionSpec, EnvConfig

    section = dict(config.get("env", {}))
    action_fields = {"v_max": float, "a_max": float, "j_max": float, "az_max": float, "vz_max": float}
    action = _pick({k: v for k, v in section.items() if k in action_fields}, action_fields, "env")
    env_fields = {
        "knot_interval": float, "horizon": int, "window": int, "position_scale": float,
        "inflation_voxels": int, "noise_enabled": bool, "noise_position": float, "noise_velocity": float,
    }
    values = _pick({k: v for k, v in section.items() if k not in action_fields}, env_fields, "env")
    values.setdefault("knot_interval", KNOT_INTERVAL)
    try:
        return EnvConfig(action=ActionSpec(**action), reward=reward_from_config(config), **values)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid env section: {error}") from error


def agent_config_from_config(config: Mapping[str, Any]):
    from .sdcq import AgentConfig

    fields = {
        "bins": int, "gamma": float, "learning_rate": float, "batch_size": int, "capacity": int,
        "polyak": float, "target_entropy": float, "hidden": tuple, "seed": int, "initial_kappa": float,
        "kappa_learning_rate": float, "adapt_temperature": bool,
    }
    values = _pick(config.get("agent", {}), fields, "agent")
    if "hidden" in values:
        values["hidden"] = tuple(int(width) for width in values["hidden"])
    values.setdefault("seed", SEED)
    try:
        return AgentConfig(**values)
    except (TypeError, ValueError) as error:
        raise ConfigError(f"invalid agent section: {error}") from error


def train_config_from_config(config: Mapping[str, Any]):
    from .trainer import TrainConfig

    fields = {
        "v_max_set": tuple, "threads": int, "exploration_per_cycle": int, "plan_length": int,
        "eval_period": int, "eval_episodes": int, "total_steps": int, "time_budget_s": float,
        "curriculum": bool, "curriculum_off_kind": str, "updates_per_cycle": int, "publish_every": int,
        "scenario_seed": int, "exploration_seed": int, "eval_seed": int, "out_dir": str,
    }
    values = _pick(config.get("train", {}), fields, "train")
    if "v_max_set" in values:
        values["v_max_set"] = tuple(float(v) for v in values["v_max_set"])
    values.setdefault("threads", THREADS)
    values.setdefault("out_dir", str(OUT_DIR))
    values.setdefault("scenario_seed", SEED)
    try:
        train_config = TrainConfig(
            scenario=scenario_from_config(config) if config.get("scenario") else None,
            env=env_config_from_config(config),
            agent=agent_config_from_config(config),
            **values,
        )
        train_config.validate()
    except (TypeError, ValueError) as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError(f"invalid train section: {error}") from error
    return train_config


def suite_from_config(config: Mapping[str, Any]):
    from .bench import BenchmarkSuite

    fields = {
        "scenario": str, "v_max": float, "checkpoint": str, "episodes": int, "seed": int,
        "profile": str, "out_dir": str, "workers": int,
    }
    values = _pick(config.get("bench", {}), fields, "bench")
    values.setdefault("seed", SEED)
    values.setdefault("out_dir", str(OUT_DIR / "bench"))
    reward = config.get("reward", {})
    if reward and "profile" not in values:
        values["profile"] = "custom"
    try:
        suite = BenchmarkSuite(
            reward=reward_from_config(config) if values.get("profile") == "custom" else None,
            echo=copy.deepcopy(_plain(config)),
            **values,
        )
        suite.validate()
    except (TypeError, ValueError) as error:
        if isinstance(error, ConfigError):
            raise
        raise ConfigError(f"invalid bench section: {error}") from error
    return suite
