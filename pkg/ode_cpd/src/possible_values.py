from dataclasses import dataclass
from typing import Any, Optional, Sequence, Union


class Value:
    def contains(self, value: Any) -> bool:
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError


@dataclass
class Number(Value):
    min: Optional[float] = None
    max: Optional[float] = None
    step: Union[str, float] = 1.0

    def contains(self, value: Any) -> bool:
        if isinstance(value, (tuple, list)):
            return all(self.contains(v) for v in value)
        try:
            value = float(value)
        except (TypeError, ValueError):
            return False
        if value != value:
            return False
        if self.min is not None and value < self.min:
            return False
        if self.max is not None and value > self.max:
            return False
        return True

    def describe(self) -> str:
        return f"a number in [{self.min}, {self.max}]"


@dataclass
class String(Value):
    # Each element of the tuple can be either:
    # - a tuple of (value, name)
    # - a string. In that case the same value will be used for name and value
    values: Any = None
    allow_custom: bool = False

    def _allowed(self) -> Sequence[str]:
        return [v[0] if isinstance(v, tuple) else v for v in self.values]

    def contains(self, value: Any) -> bool:
        if self.allow_custom:
            return True
        if isinstance(value, (tuple, list)):
            return all(self.contains(v) for v in value)
        return value in self._allowed()

    def describe(self) -> str:
        return f"one of {tuple(self._allowed())}"


def from_sequence(poss_values: Sequence) -> Value:
    """Interprets the shorthand `(min, max, step)` or tuple-of-strings notation."""

    if all(x is None or isinstance(x, (float, int)) for x in poss_values):
        return Number(min=poss_values[0], max=poss_values[1], step=poss_values[2])
    if all(isinstance(x, str) for x in poss_values):
        return String(tuple(poss_values))
    raise ValueError(f"Could not interpret {poss_values} as any possible value class.")
