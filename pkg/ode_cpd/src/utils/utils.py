import logging
import time
from typing import List

import coolname
import numpy as np

logger = logging.getLogger(__name__)


def spawn_seeds(seed: int, n: int) -> List[int]:
    """Derives `n` independent child seeds from a parent seed.

    Args:
        seed: parent seed
        n: number of child seeds

    Returns:
        List of integer seeds, stable for a given (seed, n)
    """

    children = np.random.SeedSequence(seed).spawn(n)
    return [int(child.generate_state(1)[0]) for child in children]


def str_to_bool(value: str) -> bool:
    value = str(value).lower()
    if value in ("y", "yes", "t", "true", "on", "1"):
        return True
    if value in ("n", "no", "f", "false", "off", "0"):
        return False
    raise ValueError(f"invalid truth value {value}")


def format_runtime(seconds: float) -> str:
    if seconds > 86400:
        return time.strftime("%-jd %H:%M:%S", time.gmtime(float(seconds - 86400)))
    return time.strftime("%H:%M:%S", time.gmtime(float(seconds)))


def generate_experiment_name() -> str:
    """
    Generates a random human-readable experiment name in kebab-case.

    Returns:
        The random name.
    """
    return coolname.generate_slug(2)
