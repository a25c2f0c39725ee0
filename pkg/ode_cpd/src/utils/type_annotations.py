from typing import Tuple

# types which can be written to yaml directly without any extra nesting
KNOWN_TYPE_ANNOTATIONS = [
    int,
    float,
    bool,
    str,
    Tuple[str, ...],
    Tuple[int, ...],
    Tuple[float, ...],
]

TUPLE_TYPE_ANNOTATIONS = [Tuple[str, ...], Tuple[int, ...], Tuple[float, ...]]
