import logging
from typing import Dict, List

from ode_cpd.python_configs.base import DefaultConfigProblemBase
from ode_cpd.src.systems import Systems

logger = logging.getLogger(__name__)

__all__ = ["check_config_for_errors"]


def check_config_for_errors(cfg: DefaultConfigProblemBase) -> dict:
    """
    Checks the configuration for consistency.
        Parameters:
    - cfg (DefaultConfigProblemBase):
    The config object to be checked.

    Returns:
    A dictionary with two keys:
    - "title": A list of error titles.
    - "message": A list of error messages.
    """
    errors = check_for_common_errors(cfg)
    problem_type_errors = cfg.check()
    errors["title"].extend(problem_type_errors["title"])
    errors["message"].extend(problem_type_errors["message"])
    return errors


def check_for_common_errors(cfg: DefaultConfigProblemBase) -> dict:
    errors: Dict[str, List] = {"title": [], "message": []}

    detector = cfg.detector
    if not 0 < detector.min_window <= detector.window_size:
        errors["title"] += ["Invalid window sizes"]
        errors["message"] += [
            f"The minimum window ({detector.min_window}) must be positive and not "
            f"larger than the window size ({detector.window_size})."
        ]
    if not 1 <= detector.detection_zone < detector.window_size:
        errors["title"] += ["Invalid detection zone"]
        errors["message"] += [
            f"The detection zone ({detector.detection_zone}) must hold at least one "
            f"observation and fit into the window ({detector.window_size})."
        ]
    if detector.change_separation < detector.min_window:
        errors["title"] += ["Invalid change separation"]
        errors["message"] += [
            "The minimal distance between changes must not be smaller than the "
            "minimum window."
        ]

    system_cls = Systems.get(cfg.system.name)
    if system_cls is None:
        errors["title"] += ["Unknown system"]
        errors["message"] += [f"System {cfg.system.name} is not implemented."]
        return errors

    dims = system_cls.dimensions()
    expected = {
        "system.theta": (cfg.system.theta, dims["theta"]),
        "system.psi": (cfg.system.psi, dims["psi"]),
        "system.theta_low": (cfg.system.theta_low, dims["theta"]),
        "system.theta_high": (cfg.system.theta_high, dims["theta"]),
        "uq.sigma0": (cfg.uq.sigma0, dims["theta"]),
        "uq.theta_min": (cfg.uq.theta_min, dims["theta"]),
        "uq.theta_max": (cfg.uq.theta_max, dims["theta"]),
    }
    if len(cfg.system.x0) > 0:
        expected["system.x0"] = (cfg.system.x0, dims["states"])
    for name, (value, length) in expected.items():
        if len(value) != length:
            errors["title"] += [f"Invalid length of {name}"]
            errors["message"] += [
                f"{name} has {len(value)} entries but {cfg.system.name} expects "
                f"{length}."
            ]

    if any(lo >= hi for lo, hi in zip(cfg.system.theta_low, cfg.system.theta_high)):
        errors["title"] += ["Invalid parameter bounds"]
        errors["message"] += ["Every lower parameter bound must be below its upper."]
    if any(lo >= hi for lo, hi in zip(cfg.uq.theta_min, cfg.uq.theta_max)):
        errors["title"] += ["Invalid slab bounds"]
        errors["message"] += ["Every slab lower bound must be below its upper bound."]

    if any(d >= dims["states"] for d in cfg.data.observed_components):
        errors["title"] += ["Invalid observed components"]
        errors["message"] += [
            f"Observed components {cfg.data.observed_components} exceed the "
            f"{dims['states']} states of {cfg.system.name}."
        ]

    if cfg.data.change_mode == "windows":
        n_changes = len(cfg.data.change_parameters)
        for name in ["change_values", "change_window_low", "change_window_high"]:
            if len(getattr(cfg.data, name)) != n_changes:
                errors["title"] += [f"Invalid length of data.{name}"]
                errors["message"] += [
                    f"data.{name} needs one entry per changing parameter."
                ]
    elif cfg.data.change_mode == "poisson":
        if len(cfg.data.change_parameters) != 1 or len(cfg.data.change_values) < 1:
            errors["title"] += ["Invalid switching specification"]
            errors["message"] += [
                "Poisson changes need exactly one switching parameter and at least "
                "one switching value."
            ]

    multiplicative = cfg.data.noise_model == "multiplicative-lognormal"
    if multiplicative and not cfg.system.log_transform:
        logger.warning(
            "Multiplicative noise without the log transform keeps the observation "
            "likelihood misspecified."
        )

    return errors
