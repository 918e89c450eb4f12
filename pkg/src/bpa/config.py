"""Declarative run configuration (YAML) with dotted-path overrides."""

from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .checkpoint import config_hash
from .classifier import ClassifierConfig, LesionClassifier
from .cycle import CycleTranslator
from .dataset import CONDITION_COUNTS
from .progressive import ProgressiveGAN, stage_schedule


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is the dotted path at fault."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# Full-scale pool sizes; the desk profile multiplies them by ``scale``.
POOL_SIZES = {
    "nevus": 6816,            # artifact-free nevi for the bulk phase
    "nevus_artifact": 6059,   # remaining nevi (12,875 in total)
    "apn": 230,
    "transfer_nevus": 2000,   # domain-A sample for the translator
    "nevusG_bases": 20000,    # distinct generated bases
    "diag_nevus": 8000,
    "diag_melanoma": 4000,
    "grade_test_nevus": 500,
    "grade_test_melanoma": 500,
    "test_pos": 134,
    "test_neg": 100,
    "val_pos": 134,
    "val_neg": 100,
}
UNSCALED = {"test_pos", "test_neg", "val_pos", "val_neg"}

DESK = {
    "profile": "desk",
    "seed": 0,
    "output_root": "runs",
    "resolution": 32,
    "scale": 0.05,
    "min_pool": {"grade_test_nevus": 50, "grade_test_melanoma": 50},
    "pools": "toy",
    "excluded_artifacts": ["hair", "measure", "pen"],
    "excluded_test_artifacts": ["acral"],
    "bulk": {
        "latent_dim": 128,
        "target_resolution": 32,
        "fmap_base": 128,
        "fmap_max": 32,
        "images_per_stage": 3000,
        "batch_size": 16,
    },
    "transfer": {"ngf": 16, "ndf": 16, "n_blocks": 3, "n_layers_d": 2, "n_steps": 1500, "batch_size": 4},
    "conditions": ["A", "B", "C", "D"],
    "detector": {
        "backbone": "small_cnn",
        "input_size": 32,
        "learning_rate": 0.01,
        "epochs": 12,
        "batch_size": 32,
    },
    "detector_seeds": [0, 1, 2],
    "grader": {
        "backbone": "small_cnn",
        "input_size": 32,
        "learning_rate": 0.003,
        "epochs": 20,
        "batch_size": 32,
    },
    "grader_seeds": [0, 1, 2],
}

FULL = {
    **copy.deepcopy(DESK),
    "profile": "full",
    "resolution": 256,
    "scale": 1.0,
    "min_pool": {},
    "bulk": {"latent_dim": 512, "target_resolution": 256, "fmap_base": 8192, "fmap_max": 512,
             "images_per_stage": 1_600_000, "batch_size": 16},
    "transfer": {"ngf": 64, "ndf": 64, "n_blocks": 9, "n_layers_d": 3, "n_steps": 200_000, "batch_size": 1},
    "detector": {"backbone": "efficientnet_b1_imagenet", "input_size": 240, "learning_rate": 1e-5,
                 "epochs": 30, "batch_size": 32},
    "grader": {"backbone": "efficientnet_b1_imagenet", "input_size": 240, "learning_rate": 1e-5,
               "epochs": 30, "batch_size": 32},
    "pools": {
        "nevus": "REQUIRED",
        "apn": "REQUIRED",
        "diag_nevus": "REQUIRED",
        "diag_melanoma": "REQUIRED",
        "test_pos": "REQUIRED",
        "test_neg": "REQUIRED",
    },
}
PROFILES = {"desk": DESK, "full": FULL}

# sections whose keys are free-form (estimator kwargs are checked in validate)
OPEN_SECTIONS = {"pools", "min_pool", "bulk", "transfer", "detector", "grader"}
# keys that do not change any produced artifact
UNHASHED = {"output_root"}


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(key, "no such section")
            node = node[p]
        if parts[-1] not in node and parts[0] not in OPEN_SECTIONS:
            raise ConfigError(key, "unknown field")
        node[parts[-1]] = _parse_scalar(value)
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None, profile: str | None = None) -> dict:
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a mapping")
        base_name = raw.get("profile", profile or "desk")
    else:
        raw, base_name = {}, profile or "desk"
    if base_name not in PROFILES:
        raise ConfigError("profile", f"unknown profile {base_name!r}")
    cfg = _merge(copy.deepcopy(PROFILES[base_name]), raw, "")
    cfg = apply_overrides(cfg, overrides or [])
    validate(cfg)
    return cfg


def _merge(base: dict, update: dict, prefix: str) -> dict:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown field")
        if key == "pools" or not (isinstance(base[key], dict) and isinstance(value, dict)):
            base[key] = value
        elif key in OPEN_SECTIONS:
            base[key].update(value)
        else:
            _merge(base[key], value, path + ".")
    return base


def _check_kwargs(section: str, values: dict, cls) -> None:
    allowed = set(cls().get_params()) if hasattr(cls, "get_params") else {f.name for f in fields(cls)}
    for k in values:
        if k not in allowed:
            raise ConfigError(f"{section}.{k}", "unknown parameter")


def validate(cfg: dict) -> None:
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed", "must be an explicit integer")
    if not 0 < float(cfg["scale"]) <= 1:
        raise ConfigError("scale", "must be in (0, 1]")
    try:
        stage_schedule(int(cfg["resolution"]))
    except ValueError as exc:
        raise ConfigError("resolution", str(exc)) from None
    _check_kwargs("bulk", cfg["bulk"], ProgressiveGAN)
    _check_kwargs("transfer", cfg["transfer"], CycleTranslator)
    for section in ("detector", "grader"):
        _check_kwargs(section, cfg[section], LesionClassifier)
        try:
            ClassifierConfig(**cfg[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(section, str(exc)) from None
    if cfg["bulk"].get("target_resolution", cfg["resolution"]) != cfg["resolution"]:
        raise ConfigError("bulk.target_resolution", "must equal resolution")
    for c in cfg["conditions"]:
        if c not in CONDITION_COUNTS:
            raise ConfigError("conditions", f"unknown condition {c!r}")
    for key in ("detector_seeds", "grader_seeds"):
        seeds = cfg[key]
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError(key, "must be a nonempty list of integers")
    pools = cfg["pools"]
    if pools != "toy":
        if not isinstance(pools, dict):
            raise ConfigError("pools", "must be 'toy' or a mapping of pool name to directory")
        for name, entry in pools.items():
            d = entry["dir"] if isinstance(entry, dict) else entry
            if not Path(str(d)).is_dir():
                raise ConfigError(f"pools.{name}", f"directory does not exist: {d}")


def run_hash(cfg: dict) -> str:
    return config_hash({k: v for k, v in cfg.items() if k not in UNHASHED})


def run_dir(cfg: dict) -> Path:
    return Path(cfg["output_root"]) / f"{run_hash(cfg)}-s{cfg['seed']}"


def pool_size(cfg: dict, name: str) -> int:
    n = POOL_SIZES[name]
    if name not in UNSCALED:
        n = max(1, int(n * cfg["scale"] + 0.5))
    return max(n, cfg.get("min_pool", {}).get(name, 0))


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
