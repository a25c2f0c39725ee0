import dataclasses
import hashlib
import importlib
import json
from typing import Any, Dict, List, Mapping

import yaml

from ode_cpd.python_configs.base import DefaultConfigProblemBase
from ode_cpd.src.utils.exceptions import ConfigError
from ode_cpd.src.utils.type_annotations import (
    KNOWN_TYPE_ANNOTATIONS,
    TUPLE_TYPE_ANNOTATIONS,
)
from ode_cpd.src.utils.utils import str_to_bool

# fields that name a run without changing its results
HASH_EXCLUDED_KEYS = ("output_directory", "experiment_name")


def _load_cls(module_path: str, cls_name: str) -> Any:
    """Loads the python class.

    Args:
        module_path: path to the module
        cls_name: name of the class

    Returns:
        Loaded python class
    """

    module_path_fixed = module_path
    if module_path_fixed.endswith(".py"):
        module_path_fixed = module_path_fixed[:-3]
    module_path_fixed = module_path_fixed.replace("/", ".")

    module = importlib.import_module(module_path_fixed)

    if not hasattr(module, cls_name):
        raise ConfigError(f"{module_path} file should contain {cls_name} class")
    return getattr(module, cls_name)


def load_config_py(config_path: str, config_name: str = "ConfigProblemBase"):
    """Loads the config class.

    Args:
        config_path: path to the config file
        config_name: name of the config class

    Returns:
        Loaded config class
    """

    return _load_cls(config_path, config_name)()


def parse_cfg_dataclass(cfg) -> List[Dict]:
    """Returns all single config settings for a given sub-config

    Args:
        cfg: configuration
    """

    items = []

    cfg_dict = cfg.__dict__
    type_annotations = cfg.get_annotations()
    cfg_dict = {key: cfg_dict[key] for key in cfg._get_order()}

    for k, v in cfg_dict.items():
        if k.startswith("_"):
            continue

        type_annotation = type_annotations[k]

        if type_annotation in KNOWN_TYPE_ANNOTATIONS:
            if type_annotation == float:
                v = float(v)
            items.append({k: v})
        elif dataclasses.is_dataclass(v):
            items += parse_cfg_dataclass(cfg=v)

    return items


def convert_cfg_base_to_nested_dictionary(cfg: DefaultConfigProblemBase) -> dict:
    """Returns a grouped config settings dict for a given configuration

    Args:
        cfg: configuration

    Returns:
        Dict of configuration settings
    """

    cfg_dict = cfg.__dict__
    type_annotations = cfg.get_annotations()
    cfg_dict = {key: cfg_dict[key] for key in cfg._get_order()}

    grouped_cfg_dict: Dict[str, Any] = {}

    for k, v in cfg_dict.items():
        if k.startswith("_"):
            continue

        type_annotation = type_annotations[k]

        if type_annotation in KNOWN_TYPE_ANNOTATIONS:
            grouped_cfg_dict.update({k: v})
        elif dataclasses.is_dataclass(v):
            group_items = parse_cfg_dataclass(cfg=v)
            group_items = {
                k: list(v) if isinstance(v, tuple) else v
                for d in group_items
                for k, v in d.items()
            }
            grouped_cfg_dict.update({k: group_items})
        else:
            raise ConfigError(
                f"Cannot convert {k}: not a dataclass and {type_annotation} is not "
                "a known type annotation."
            )

    # not an explicit field in the config
    grouped_cfg_dict["problem_type"] = cfg.problem_type
    return grouped_cfg_dict


def convert_nested_dictionary_to_cfg_base(
    cfg_dict: Dict[str, Any]
) -> DefaultConfigProblemBase:
    """
    Inverse operation of convert_cfg_base_to_nested_dictionary
    """
    problem_type = cfg_dict["problem_type"]
    module_name = f"ode_cpd.python_configs.{problem_type}_config"
    try:
        module = importlib.import_module(module_name)
    except ModuleNotFoundError:
        raise NotImplementedError(f"Problem Type {problem_type} not implemented")
    return module.ConfigProblemBase.from_dict(cfg_dict)


def save_config_yaml(path: str, cfg: DefaultConfigProblemBase) -> None:
    """Saves config as yaml file

    Args:
        path: path of file to save to
        cfg: config to save
    """
    cfg_dict = convert_cfg_base_to_nested_dictionary(cfg)
    with open(path, "w") as fp:
        yaml.dump(cfg_dict, fp, indent=4)


def load_config_yaml(path: str):
    """Loads config from yaml file

    Args:
        path: path of file to load from
    Returns:
        config object
    """
    with open(path, "r") as fp:
        cfg_dict = yaml.load(fp, Loader=yaml.FullLoader)
    return convert_nested_dictionary_to_cfg_base(cfg_dict)


def config_hash(cfg: DefaultConfigProblemBase) -> str:
    """SHA-256 of the canonical JSON of the nested config, without run names."""

    cfg_dict = convert_cfg_base_to_nested_dictionary(cfg)
    for key in HASH_EXCLUDED_KEYS:
        cfg_dict.pop(key, None)
    canonical = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_value(raw: Any, type_annotation: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    if type_annotation == bool:
        return str_to_bool(raw)
    if type_annotation in (int, float, str):
        return type_annotation(raw)
    if type_annotation in TUPLE_TYPE_ANNOTATIONS:
        item_type = type_annotation.__args__[0]
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p]
        return tuple(item_type(p.strip()) for p in parts)
    return raw


def apply_overrides(cfg: DefaultConfigProblemBase, overrides: Mapping[str, Any]):
    """Sets `group.field` (or top-level `field`) values from strings.

    Args:
        cfg: configuration, modified in place
        overrides: dotted keys to raw values

    Returns:
        The modified configuration
    """

    for key, raw in overrides.items():
        group_name, _, name = key.rpartition(".")
        target = getattr(cfg, group_name, None) if group_name else cfg
        if target is None or not dataclasses.is_dataclass(target):
            raise ConfigError(f"Unknown config group in override {key}.")
        annotations = target.get_annotations()
        if name not in annotations:
            raise ConfigError(f"Unknown config field in override {key}.")
        try:
            value = _parse_value(raw, annotations[name])
        except ValueError as exc:
            raise ConfigError(f"Cannot parse override {key}={raw!r}: {exc}")
        setattr(target, name, value)
    return cfg
