import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ode_cpd.src.utils.exceptions import ContractViolationError, MetricUndefinedError

logger = logging.getLogger(__name__)

__all__ = [
    "DetectionRecord",
    "Matching",
    "Partition",
    "DetectionScore",
    "match_detections",
    "far",
    "edd",
    "mae",
    "mar",
    "jaccard",
    "covering",
    "Metrics",
]


@dataclass(frozen=True)
class DetectionRecord:
    """One alarm in observation-index units.

    `estimated_index` is the first observation the detector assigns to the
    new segment, comparable with a true change index.
    """

    detection_index: int
    estimated_index: int

    def __post_init__(self):
        if self.estimated_index > self.detection_index:
            raise ContractViolationError(
                f"Estimated change {self.estimated_index} lies after its "
                f"detection {self.detection_index}."
            )


@dataclass
class Matching:
    pairs: List[Tuple[DetectionRecord, int]] = field(default_factory=list)
    false_positives: List[DetectionRecord] = field(default_factory=list)
    misses: List[int] = field(default_factory=list)

    @property
    def n_truths(self) -> int:
        return len(self.pairs) + len(self.misses)


def match_detections(
    detections: Iterable[DetectionRecord],
    truths: Iterable[int],
    tolerance_window: int,
) -> Matching:
    """Greedy one-to-one matching of detections to true change indices.

    Detections are visited in order of detection; each takes the nearest
    unmatched truth within `tolerance_window` of its estimated index.
    """

    remaining = sorted(int(t) for t in truths)
    ordered = sorted(detections, key=lambda d: (d.detection_index, d.estimated_index))
    matching = Matching()
    for detection in ordered:
        candidates = [
            t
            for t in remaining
            if abs(detection.estimated_index - t) <= tolerance_window
        ]
        if not candidates:
            matching.false_positives.append(detection)
            continue
        truth = min(candidates, key=lambda t: (abs(detection.estimated_index - t), t))
        remaining.remove(truth)
        matching.pairs.append((detection, truth))
    matching.misses = remaining
    return matching


def far(matching: Matching, n_tests: int) -> float:
    """False positives per tested time point that carries no true change."""

    n_fp = len(matching.false_positives)
    denominator = n_fp + n_tests - matching.n_truths
    if n_fp == 0:
        return 0.0
    if denominator <= 0:
        return 1.0
    return min(1.0, n_fp / denominator)


def edd(matching: Matching) -> float:
    if not matching.pairs:
        raise MetricUndefinedError("EDD needs at least one matched detection.")
    return float(np.mean([d.detection_index - t for d, t in matching.pairs]))


def mae(matching: Matching) -> float:
    if not matching.pairs:
        raise MetricUndefinedError("MAE needs at least one matched detection.")
    return float(np.mean([abs(d.estimated_index - t) for d, t in matching.pairs]))


def mar(matching: Matching) -> float:
    """Share of true changes left without a detection."""
    if matching.n_truths == 0:
        return 0.0
    return len(matching.misses) / matching.n_truths


@dataclass(frozen=True)
class Partition:
    """Contiguous segments [start, stop) covering the indices 0..T-1."""

    segments: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if not self.segments or self.segments[0][0] != 0:
            raise ContractViolationError("A partition starts at index 0.")
        for (a, b), (c, _) in zip(self.segments, self.segments[1:]):
            if b != c:
                raise ContractViolationError("Partition segments must be contiguous.")
        if any(b <= a for a, b in self.segments):
            raise ContractViolationError("Partition segments must be nonempty.")

    @property
    def length(self) -> int:
        return self.segments[-1][1]

    @classmethod
    def from_change_points(cls, change_points: Iterable[int], T: int) -> "Partition":
        """Segments split at every change index, the first index of a new segment."""
        cuts = sorted({int(c) for c in change_points if 0 < int(c) < T})
        bounds = [0] + cuts + [T]
        return cls(tuple(zip(bounds[:-1], bounds[1:])))


def jaccard(a: Tuple[int, int], b: Tuple[int, int]) -> float:
    """Intersection over union of two index ranges [start, stop)."""
    intersection = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - intersection
    return intersection / union


def covering(truth: Any, predicted: Partition) -> float:
    """Length-weighted best Jaccard overlap of the true segments.

    `truth` is a Partition or a sequence of Partitions, in which case the
    coverings are averaged.
    """

    if not isinstance(truth, Partition):
        truths = list(truth)
        if not truths:
            raise MetricUndefinedError("Covering needs at least one true partition.")
        return float(np.mean([covering(t, predicted) for t in truths]))

    if truth.length != predicted.length:
        raise ContractViolationError(
            f"Partitions cover {truth.length} and {predicted.length} indices."
        )
    total = 0.0
    for segment in truth.segments:
        best = max(jaccard(segment, other) for other in predicted.segments)
        total += (segment[1] - segment[0]) * best
    return total / truth.length


@dataclass
class DetectionScore:
    """Everything needed to score one detection run."""

    matching: Matching
    n_tests: int
    truth_partition: Partition
    predicted_partition: Partition

    @classmethod
    def from_run(
        cls,
        detections: Sequence[DetectionRecord],
        truths: Sequence[int],
        n_tests: int,
        n_observations: int,
        tolerance_window: int,
    ) -> "DetectionScore":
        return cls(
            matching=match_detections(detections, truths, tolerance_window),
            n_tests=n_tests,
            truth_partition=Partition.from_change_points(truths, n_observations),
            predicted_partition=Partition.from_change_points(
                [d.estimated_index for d in detections], n_observations
            ),
        )


class Metrics:
    """
    Metrics factory. Returns:
        - metric function of a DetectionScore
        - should it be maximized or minimized
    """

    _metrics: Dict[str, Tuple[Callable[[DetectionScore], float], str]] = {
        "far": (lambda s: far(s.matching, s.n_tests), "min"),
        "edd": (lambda s: edd(s.matching), "min"),
        "mae": (lambda s: mae(s.matching), "min"),
        "cover": (lambda s: covering(s.truth_partition, s.predicted_partition), "max"),
        "mar": (lambda s: mar(s.matching), "min"),
    }

    @classmethod
    def names(cls) -> List[str]:
        return list(cls._metrics.keys())

    @classmethod
    def get(cls, name: str) -> Tuple[Callable[[DetectionScore], float], str]:
        """Access to Metrics.

        Args:
            name: metric name
        Returns:
            The metric function and its optimization direction
        """
        if name not in cls._metrics:
            raise NotImplementedError(f"Unknown metric {name}.")
        return cls._metrics[name]

    @classmethod
    def evaluate(
        cls, score: DetectionScore, names: Optional[Sequence[str]] = None
    ) -> Dict[str, float]:
        """All requested metrics; undefined ones are reported as NaN."""

        values: Dict[str, float] = {}
        for name in names or cls.names():
            fn, _ = cls.get(name)
            try:
                values[name] = float(fn(score))
            except MetricUndefinedError as exc:
                logger.debug(f"Metric {name} undefined: {exc}")
                values[name] = float("nan")
        return values
