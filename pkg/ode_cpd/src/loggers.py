import dataclasses
import logging
from typing import Any, Dict, List, Optional

import numpy as np
from sqlitedict import SqliteDict

__all__ = ["Loggers", "MainLogger", "LocalLogger", "DummyLogger", "get_cfg"]

logger = logging.getLogger(__name__)


def get_cfg(cfg: Any, prefix: str = "") -> Dict:
    """Returns flattened config elements keyed by `group.field`

    Args:
        cfg: configuration

    Returns:
        Dict of config elements
    """

    items: Dict = {}
    type_annotations = cfg.get_annotations()

    for k in cfg._get_order():
        if k.startswith("_"):
            continue
        v = getattr(cfg, k)
        if dataclasses.is_dataclass(v):
            items = {**items, **get_cfg(cfg=v, prefix=f"{prefix}{k}.")}
        elif type_annotations.get(k) == float:
            items[f"{prefix}{k}"] = float(v)
        elif isinstance(v, tuple):
            items[f"{prefix}{k}"] = list(v)
        else:
            items[f"{prefix}{k}"] = v

    return items


class ConsoleLogger:
    """Echoes scalar traces to the python logger at debug level."""

    def __init__(self, cfg: Any):
        self.experiment_name = cfg.experiment_name

    def log(self, subset: str, name: str, value: Any, step: Optional[int] = None):
        logger.debug(f"[{self.experiment_name}] {subset}/{name} step={step}: {value}")


class LocalLogger:
    """Stores traces in `charts.db` in the output directory."""

    def __init__(self, cfg: Any):
        logging.getLogger("sqlitedict").setLevel(logging.ERROR)

        self.logs = f"{cfg.output_directory}/charts.db"

        params = get_cfg(cfg)

        with SqliteDict(self.logs) as logs:
            logs["cfg"] = params
            logs.commit()

    def log(self, subset: str, name: str, value: Any, step: Optional[int] = None):
        if not np.isscalar(value) or isinstance(value, str):
            with SqliteDict(self.logs) as logs:
                subset_dict = logs[subset] if subset in logs else dict()
                subset_dict[name] = value
                logs[subset] = subset_dict
                logs.commit()
            return

        value = float(value)
        if np.isnan(value):
            value = None
        with SqliteDict(self.logs) as logs:
            subset_dict = logs[subset] if subset in logs else dict()
            if name not in subset_dict:
                subset_dict[name] = {"steps": [], "values": []}

            subset_dict[name]["steps"].append(step)
            subset_dict[name]["values"].append(value)

            logs[subset] = subset_dict
            logs.commit()

    def export(self) -> Dict[str, Any]:
        with SqliteDict(self.logs) as logs:
            return {k: logs[k] for k in logs.keys()}


class DummyLogger:
    def __init__(self, cfg: Optional[Any] = None):
        return

    def log(self, subset: str, name: str, value: Any, step: Optional[int] = None):
        return


class MainLogger:
    """Main logger"""

    def __init__(self, cfg: Any):
        self.loggers = {
            "local": LocalLogger(cfg),
            "external": Loggers.get(cfg.logging.logger),
        }

        try:
            self.loggers["external"] = self.loggers["external"](cfg)
        except Exception as e:
            logger.warning(
                f"Error when initializing logger. "
                f"Disabling custom logging functionality: {e}"
            )
            self.loggers["external"] = DummyLogger(cfg)

    def log(self, subset: str, name: str, value: Any, step: Optional[int] = None):
        for logger in self.loggers.values():
            logger.log(subset=subset, name=name, value=value, step=step)

    def export(self) -> Dict[str, Any]:
        return self.loggers["local"].export()


class Loggers:
    """Loggers factory."""

    _loggers = {"None": DummyLogger, "Console": ConsoleLogger}

    @classmethod
    def names(cls) -> List[str]:
        return sorted(cls._loggers.keys())

    @classmethod
    def get(cls, name: str) -> Any:
        """Access to Loggers.

        Args:
            name: loggers name
        Returns:
            A class to build the Loggers
        """

        return cls._loggers.get(name, DummyLogger)
