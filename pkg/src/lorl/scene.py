"""Shared domain types: vocabularies, ground-truth scenes, QA examples.

Everything here is a plain value record over numpy arrays; no learned
parameters. Images are float arrays of shape (H, W, 3) with values in [0, 1];
ground-truth masks are boolean arrays of shape (H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .programs import Program

N_MAX_COUNT = 10


def check_image(pixels: np.ndarray) -> np.ndarray:
    """Validate an (H, W, 3) image in [0, 1] and return it as float32."""
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {pixels.shape}")
    if not np.all(np.isfinite(pixels)):
        raise ValueError("image contains non-finite values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return pixels


@dataclass(frozen=True)
class ConceptVocabulary:
    """Attribute -> ordered concept names, plus relation names.

    Concept names are unique across attributes, so a bare concept word
    (e.g. "red") identifies its attribute.
    """

    attributes: dict[str, list[str]]
    relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for attr, concepts in self.attributes.items():
            if len(concepts) < 2:
                raise ValueError(f"attribute '{attr}' needs >= 2 concepts")
            for c in concepts:
                if c in seen:
                    raise ValueError(f"concept '{c}' appears under '{seen[c]}' and '{attr}'")
                seen[c] = attr

    @property
    def concept_attributes(self) -> dict[str, str]:
        return {c: a for a, cs in self.attributes.items() for c in cs}

    @property
    def all_concepts(self) -> list[str]:
        return [c for cs in self.attributes.values() for c in cs]

    def attribute_of(self, concept: str) -> str:
        try:
            return self.concept_attributes[concept]
        except KeyError:
            raise KeyError(f"unknown concept '{concept}'") from None

    def answer_vocabulary(self) -> list[Any]:
        """Flat categorical answer space: concepts, counts 0..N, yes/no."""
        return [*self.all_concepts, *range(N_MAX_COUNT + 1), True, False]

    def to_json(self) -> dict:
        return {"attributes": self.attributes, "relations": self.relations}

    @staticmethod
    def from_json(obj: dict) -> "ConceptVocabulary":
        return ConceptVocabulary(
            attributes={a: list(cs) for a, cs in obj["attributes"].items()},
            relations=list(obj["relations"]),
        )


@dataclass(frozen=True)
class ObjectRecord:
    """One ground-truth object: boolean mask plus attribute -> concept map."""

    mask: np.ndarray
    attributes: dict[str, str]


@dataclass(frozen=True)
class SceneRecord:
    """Ground truth for one generated image."""

    image_id: str
    objects: list[ObjectRecord]
    background: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.background.shape


@dataclass(frozen=True)
class QAExample:
    question: str
    program: Program
    answer: Any  # str (word) | int (count) | bool
    scene_id: str


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run-length encode a boolean mask over row-major pixel order.

    The encoding is a list of alternating run lengths, starting with a run of
    zeros (possibly of length 0).
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    runs: list[int] = []
    current, length = False, 0
    for v in flat:
        if v == current:
            length += 1
        else:
            runs.append(length)
            current, length = v, 1
    runs.append(length)
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    total = int(np.prod(shape))
    if sum(runs) != total:
        raise ValueError(f"RLE length {sum(runs)} does not match shape {shape}")
    flat = np.zeros(total, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)


def validate_scene_record(
    record: SceneRecord, vocab: Optional[ConceptVocabulary] = None
) -> list[str]:
    """Check SceneRecord invariants; violations are data, not exceptions."""
    violations: list[str] = []
    shape = record.background.shape
    occupancy = record.background.astype(np.int32).copy()
    for i, obj in enumerate(record.objects):
        if obj.mask.shape != shape:
            violations.append(f"object {i}: mask shape {obj.mask.shape} != {shape}")
            continue
        if not obj.mask.any():
            violations.append(f"object {i}: non-empty mask violated")
        occupancy += obj.mask.astype(np.int32)
        if vocab is not None:
            for attr, value in obj.attributes.items():
                if value not in vocab.attributes.get(attr, ()):
                    violations.append(
                        f"object {i}: '{value}' not in vocabulary under '{attr}'"
                    )
    for i, obj in enumerate(record.objects):
        if obj.mask.shape != shape:
            continue
        for j in range(i + 1, len(record.objects)):
            other = record.objects[j]
            if other.mask.shape == shape and np.any(obj.mask & other.mask):
                violations.append(f"objects {i},{j}: disjointness violated")
    if (occupancy > 1).any():
        # already reported pairwise for objects; catch background overlap too
        if any(np.any(o.mask & record.background) for o in record.objects if o.mask.shape == shape):
            violations.append("background overlaps an object mask")
    if (occupancy == 0).any():
        violations.append("objects and background do not cover all pixels")
    return violations
