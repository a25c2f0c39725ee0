from typing import Any, Dict, Optional


class OdeCpdException(Exception):
    pass


class ConfigError(OdeCpdException):
    pass


class ContractViolationError(OdeCpdException, ValueError):
    pass


class NumericalDomainError(OdeCpdException):
    def __init__(self, message: str, component: Optional[int] = None):
        super().__init__(message)
        self.component = component


class IntegrationDivergenceError(OdeCpdException):
    def __init__(self, message: str, time: Optional[float] = None):
        super().__init__(message)
        self.time = time


class ObservationDomainError(OdeCpdException):
    pass


class IllConditionedKernelError(OdeCpdException):
    def __init__(self, message: str, condition_number: float = float("nan")):
        super().__init__(message)
        self.condition_number = condition_number


class HyperparameterFitError(OdeCpdException):
    def __init__(self, message: str, diagnostics: Optional[Any] = None):
        super().__init__(message)
        self.diagnostics = diagnostics


class LikelihoodError(OdeCpdException):
    def __init__(self, message: str, term: str = "", component: Optional[int] = None):
        super().__init__(message)
        self.term = term
        self.component = component


class SimulationError(OdeCpdException):
    def __init__(self, message: str, series: Optional[int] = None):
        super().__init__(message)
        self.series = series


class SamplerInitializationError(OdeCpdException):
    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MetricUndefinedError(OdeCpdException):
    pass
