"""Small shared helpers: deterministic parallel map, canonical JSON, rounding."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "LIEQ_THREADS"


def resolve_threads(requested: int | None = None) -> int:
    """Worker count: explicit argument, else LIEQ_THREADS, else cpu count."""
    if requested is not None:
        n = int(requested)
    else:
        env = os.environ.get(THREADS_ENV_VAR, "").strip()
        if env:
            n = int(env)
        else:
            n = os.cpu_count() or 1
    return max(1, n)


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Map fn over items, optionally on a thread pool.

    Results come back in input order regardless of completion order, so the
    reduction downstream is bit-identical to the sequential run.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def round_half_away(x: np.ndarray | float) -> np.ndarray | float:
    """Round to nearest integer with ties going away from zero.

    np.round rounds ties to even, which is the wrong convention here.
    """
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators; ends with newline.

    Byte-stable across runs for equal input, which report emission relies on.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def json_float(x: Any) -> float | None:
    """Cast numpy scalars to plain floats for JSON; None passes through."""
    if x is None:
        return None
    return float(x)


def json_float_list(xs: Iterable[Any]) -> list[float]:
    return [float(x) for x in xs]
