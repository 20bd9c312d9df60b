"""Question/description templates and the deterministic template parser.

Each template pairs a surface pattern (with typed placeholders) with a program
skeleton. Rendering instantiates both from a binding; parsing inverts the
rendering by matching the text against every template with vocabulary-
restricted placeholders and requiring a unique match.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Optional

from .programs import Program, ProgramOp
from .scene import ConceptVocabulary, N_MAX_COUNT


class NoTemplateMatch(ValueError):
    pass


class AmbiguousMatch(ValueError):
    pass


# Surface phrase used for each relation name, in rendered text.
RELATION_SURFACES = {
    "left-of": "to the left of",
    "right-of": "to the right of",
    "above": "above",
    "below": "below",
}


@dataclass(frozen=True)
class PlaceholderSpec:
    """What a pattern placeholder may bind to.

    kind: 'concept' (optionally restricted to one attribute), 'attribute',
    'relation', or 'int'.
    """

    kind: str
    attribute: Optional[str] = None
    plural: bool = False


@dataclass(frozen=True)
class QuestionTemplate:
    name: str
    pattern: str
    placeholders: dict[str, PlaceholderSpec]
    skeleton: tuple[tuple[str, Any], ...]  # (op, arg); '$name' args are bindings

    def program(self, bindings: dict[str, Any]) -> Program:
        ops = []
        for op, arg in self.skeleton:
            if isinstance(arg, str) and arg.startswith("$"):
                arg = bindings[arg[1:]]
            ops.append(ProgramOp(op, arg))
        return Program(ops)

    def render(self, bindings: dict[str, Any]) -> str:
        def sub(match: re.Match) -> str:
            name = match.group(1)
            spec = self.placeholders[name]
            return _render_value(spec, bindings[name])

        return re.sub(r"\{(\w+)\}", sub, self.pattern)


def _render_value(spec: PlaceholderSpec, value: Any) -> str:
    if spec.kind == "relation":
        return RELATION_SURFACES[value]
    if spec.kind == "int":
        return str(value)
    word = str(value)
    return word + "s" if spec.plural else word


def _surface_map(spec: PlaceholderSpec, vocab: ConceptVocabulary) -> dict[str, Any]:
    """surface form -> bound value, for one placeholder."""
    if spec.kind == "concept":
        if spec.attribute is not None:
            words = vocab.attributes[spec.attribute]
        else:
            words = vocab.all_concepts
        return {(w + "s" if spec.plural else w): w for w in words}
    if spec.kind == "attribute":
        return {a: a for a in vocab.attributes}
    if spec.kind == "relation":
        return {RELATION_SURFACES[r]: r for r in vocab.relations}
    if spec.kind == "int":
        return {str(i): i for i in range(N_MAX_COUNT + 1)}
    raise ValueError(f"unknown placeholder kind '{spec.kind}'")


def _compile(template: QuestionTemplate, vocab: ConceptVocabulary) -> re.Pattern:
    parts = re.split(r"\{(\w+)\}", template.pattern)
    out = []
    for i, part in enumerate(parts):
        if i % 2 == 0:
            out.append(re.escape(part))
        else:
            spec = template.placeholders[part]
            surfaces = sorted(_surface_map(spec, vocab), key=len, reverse=True)
            out.append(f"(?P<{part}>{'|'.join(re.escape(s) for s in surfaces)})")
    return re.compile("^" + "".join(out) + "$")


def parse_question(
    text: str, templates: list[QuestionTemplate], vocab: ConceptVocabulary
) -> Program:
    """Invert template rendering; the match must be unique."""
    matches = []
    for template in templates:
        m = _compile(template, vocab).match(text)
        if m is None:
            continue
        bindings = {
            name: _surface_map(template.placeholders[name], vocab)[m.group(name)]
            for name in template.placeholders
        }
        matches.append(template.program(bindings))
    if not matches:
        raise NoTemplateMatch(f"no template matches: {text!r}")
    if len(matches) > 1:
        raise AmbiguousMatch(f"{len(matches)} templates match: {text!r}")
    return matches[0]


def _t(name, pattern, placeholders, skeleton):
    return QuestionTemplate(name, pattern, placeholders, tuple(skeleton))


_CAT = PlaceholderSpec("concept", "category")
_CAT_PL = PlaceholderSpec("concept", "category", plural=True)
_ANYC = PlaceholderSpec("concept")
_ATTR = PlaceholderSpec("attribute")
_REL = PlaceholderSpec("relation")
_PART = PlaceholderSpec("concept", "part")
_PART_PL = PlaceholderSpec("concept", "part", plural=True)
_COLOR = PlaceholderSpec("concept", "color")
_INT = PlaceholderSpec("int")

HOUSEHOLD_TEMPLATES = [
    _t(
        "query-cat",
        "What is the {attr} of the {cat}?",
        {"attr": _ATTR, "cat": _CAT},
        [("scene", None), ("filter", "$cat"), ("query", "$attr")],
    ),
    _t(
        "query-concept-cat",
        "What is the {attr} of the {c} {cat}?",
        {"attr": _ATTR, "c": _ANYC, "cat": _CAT},
        [("scene", None), ("filter", "$c"), ("filter", "$cat"), ("query", "$attr")],
    ),
    _t(
        "query-relate",
        "What is the {attr} of the {cat} {rel} the {cat2}?",
        {"attr": _ATTR, "cat": _CAT, "rel": _REL, "cat2": _CAT},
        [
            ("scene", None),
            ("filter", "$cat2"),
            ("relate", "$rel"),
            ("filter", "$cat"),
            ("query", "$attr"),
        ],
    ),
    _t(
        "exist-cat",
        "Is there a {cat}?",
        {"cat": _CAT},
        [("scene", None), ("filter", "$cat"), ("exist", None)],
    ),
    _t(
        "exist-concept-cat",
        "Is there a {c} {cat}?",
        {"c": _ANYC, "cat": _CAT},
        [("scene", None), ("filter", "$c"), ("filter", "$cat"), ("exist", None)],
    ),
    _t(
        "count-cat",
        "How many {cat} are there?",
        {"cat": _CAT_PL},
        [("scene", None), ("filter", "$cat"), ("count", None)],
    ),
    _t(
        "count-concept",
        "How many {c} objects are there?",
        {"c": _ANYC},
        [("scene", None), ("filter", "$c"), ("count", None)],
    ),
]

CHAIR_TEMPLATES = [
    _t(
        "desc-count",
        "There are {n} {part}.",
        {"n": _INT, "part": _PART_PL},
        [("scene", None), ("filter", "$part"), ("count", None), ("equal", "$n")],
    ),
    _t(
        "desc-color",
        "The {part} is {color}.",
        {"part": _PART, "color": _COLOR},
        [
            ("scene", None),
            ("filter", "$part"),
            ("query", "color"),
            ("equal", "$color"),
        ],
    ),
    _t(
        "desc-exist",
        "There is a {color} {part}.",
        {"color": _COLOR, "part": _PART},
        [
            ("scene", None),
            ("filter", "$color"),
            ("filter", "$part"),
            ("exist", None),
            ("equal", True),
        ],
    ),
    _t(
        "desc-relate-color",
        "The {part} {rel} the {part2} is {color}.",
        {"part": _PART, "rel": _REL, "part2": _PART, "color": _COLOR},
        [
            ("scene", None),
            ("filter", "$part2"),
            ("relate", "$rel"),
            ("filter", "$part"),
            ("query", "color"),
            ("equal", "$color"),
        ],
    ),
]


def templates_for_family(family: str) -> list[QuestionTemplate]:
    if family == "household":
        return HOUSEHOLD_TEMPLATES
    if family == "composite-chair":
        return CHAIR_TEMPLATES
    raise ValueError(f"unknown dataset family '{family}'")
