"""Hard symbolic program evaluation over ground-truth scene records.

This is the oracle substrate: the data generator uses it to compute gold
answers, and executor tests compare against it. Selections are plain sets of
object indices; relations come from mask centroids.
"""

from __future__ import annotations

from typing import Any, Optional

import numpy as np

from .programs import Program
from .scene import ObjectRecord, SceneRecord


class AmbiguousReferent(ValueError):
    """Query over a selection that does not contain exactly one object."""


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """(row, col) centroid of a mask; mask must be non-empty."""
    rows, cols = np.nonzero(mask)
    return float(rows.mean()), float(cols.mean())


def relation_holds(
    relation: str, subject: tuple[float, float], anchor: tuple[float, float]
) -> bool:
    """Whether `subject` stands in `relation` to `anchor` (both centroids)."""
    (sr, sc), (ar, ac) = subject, anchor
    if relation == "left-of":
        return sc < ac
    if relation == "right-of":
        return sc > ac
    if relation == "above":
        return sr < ar
    if relation == "below":
        return sr > ar
    raise ValueError(f"unknown relation '{relation}'")


def object_matches(obj: ObjectRecord, concept: str) -> bool:
    return concept in obj.attributes.values()


def evaluate(program: Program, record: SceneRecord) -> Any:
    """Execute a program symbolically; returns str, int, or bool."""
    centroids = [mask_centroid(o.mask) for o in record.objects]
    selection: Optional[set[int]] = None
    value: Any = None
    for op in program:
        if op.op == "scene":
            selection = set(range(len(record.objects)))
        elif op.op == "filter":
            selection = {
                i for i in selection if object_matches(record.objects[i], op.arg)
            }
        elif op.op == "relate":
            selection = {
                i
                for i in range(len(record.objects))
                if any(
                    j != i and relation_holds(op.arg, centroids[i], centroids[j])
                    for j in selection
                )
            }
        elif op.op == "exist":
            value = len(selection) > 0
        elif op.op == "count":
            value = len(selection)
        elif op.op == "query":
            if len(selection) != 1:
                raise AmbiguousReferent(
                    f"query over {len(selection)} objects, expected exactly 1"
                )
            (idx,) = selection
            value = record.objects[idx].attributes[op.arg]
        elif op.op == "equal":
            value = value == op.arg
        else:
            raise ValueError(f"unknown op '{op.op}'")
    return value


def referents(program: Program, record: SceneRecord) -> set[int]:
    """Object indices selected by a filter/relate chain (no terminal op)."""
    centroids = [mask_centroid(o.mask) for o in record.objects]
    selection: set[int] = set()
    for op in program:
        if op.op == "scene":
            selection = set(range(len(record.objects)))
        elif op.op == "filter":
            selection = {
                i for i in selection if object_matches(record.objects[i], op.arg)
            }
        elif op.op == "relate":
            selection = {
                i
                for i in range(len(record.objects))
                if any(
                    j != i and relation_holds(op.arg, centroids[i], centroids[j])
                    for j in selection
                )
            }
        else:
            raise ValueError(f"'{op.op}' not allowed in a referring expression")
    return selection
