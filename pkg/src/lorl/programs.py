"""Typed program chains for the reasoning DSL.

A program is a flat chain of operations: it opens with ``scene``, threads a
soft selection over slots through ``filter``/``relate`` steps, and ends in a
single terminal (``query``/``exist``/``count``), optionally wrapped by an
``equal`` comparison against a literal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence, TYPE_CHECKING

if TYPE_CHECKING:
    from .scene import ConceptVocabulary

OP_NAMES = ("scene", "filter", "relate", "query", "exist", "count", "equal")

# Ops whose output is a soft selection over slots.
MASK_OPS = frozenset({"scene", "filter", "relate"})
# Ops that terminate the chain with an answer-typed value.
TERMINAL_OPS = frozenset({"query", "exist", "count"})


class ProgramError(ValueError):
    """A program failed validation or execution type-checking."""


@dataclass(frozen=True)
class ProgramOp:
    op: str
    arg: Any = None

    def to_json(self) -> dict:
        return {"op": self.op, "arg": self.arg}

    @staticmethod
    def from_json(obj: dict) -> "ProgramOp":
        return ProgramOp(op=obj["op"], arg=obj.get("arg"))


@dataclass(frozen=True)
class Program:
    ops: tuple[ProgramOp, ...]

    def __init__(self, ops: Iterable[ProgramOp]):
        object.__setattr__(self, "ops", tuple(ops))

    def __iter__(self):
        return iter(self.ops)

    def __len__(self):
        return len(self.ops)

    def to_json(self) -> list[dict]:
        return [op.to_json() for op in self.ops]

    @staticmethod
    def from_json(items: Sequence[dict]) -> "Program":
        return Program(ProgramOp.from_json(o) for o in items)

    def terminal_kind(self) -> str:
        """Answer type of the chain: 'word', 'int', or 'bool'."""
        for op in reversed(self.ops):
            if op.op == "equal" or op.op == "exist":
                return "bool"
            if op.op == "query":
                return "word"
            if op.op == "count":
                return "int"
        raise ProgramError("program has no terminal operation")


def _arg_kind(op: ProgramOp) -> Optional[str]:
    return {
        "scene": None,
        "filter": "concept",
        "relate": "relation",
        "query": "attribute",
        "exist": None,
        "count": None,
        "equal": "literal",
    }[op.op]


def validate_program(program: Program, vocab: "ConceptVocabulary") -> list[str]:
    """Return a list of violation messages; empty iff the program is valid."""
    violations: list[str] = []
    ops = program.ops
    if not ops:
        return ["empty program"]
    if ops[0].op != "scene":
        violations.append("missing Scene at position 0")
    state = "start"  # start -> mask -> terminal -> done
    terminal_op: Optional[str] = None
    for i, op in enumerate(ops):
        if op.op not in OP_NAMES:
            violations.append(f"op {i}: unknown op '{op.op}'")
            continue
        if state in ("terminal", "done") and op.op != "equal":
            violations.append(f"op {i}: op after terminal")
        if op.op == "scene":
            if i != 0:
                violations.append(f"op {i}: Scene only allowed at position 0")
            state = "mask"
        elif op.op in ("filter", "relate"):
            if state != "mask":
                violations.append(f"op {i}: {op.op} requires a slot-mask input")
            state = "mask"
        elif op.op in TERMINAL_OPS:
            if state != "mask":
                violations.append(f"op {i}: {op.op} requires a slot-mask input")
            terminal_op = op.op
            state = "terminal"
        elif op.op == "equal":
            if state != "terminal":
                violations.append(
                    f"op {i}: equal must follow exactly one of Query/Exist/Count"
                )
            state = "done"
        violations.extend(_validate_arg(i, op, terminal_op, vocab))
    if state == "mask":
        violations.append("missing terminal op (Query | Exist | Count | Equal)")
    return violations


def _validate_arg(
    i: int, op: ProgramOp, terminal_op: Optional[str], vocab: "ConceptVocabulary"
) -> list[str]:
    kind = _arg_kind(op)
    if kind is None:
        if op.arg is not None:
            return [f"op {i}: {op.op} takes no argument"]
        return []
    if op.arg is None:
        return [f"op {i}: {op.op} requires an argument"]
    if kind == "concept" and op.arg not in vocab.concept_attributes:
        return [f"op {i}: unknown concept '{op.arg}'"]
    if kind == "relation" and op.arg not in vocab.relations:
        return [f"op {i}: unknown relation '{op.arg}'"]
    if kind == "attribute" and op.arg not in vocab.attributes:
        return [f"op {i}: unknown attribute '{op.arg}'"]
    if kind == "literal" and terminal_op is not None:
        expected = {"query": str, "exist": bool, "count": int}[terminal_op]
        # bool is a subclass of int; keep count literals strictly integral.
        if expected is int and isinstance(op.arg, bool):
            return [f"op {i}: equal literal must be an integer"]
        if not isinstance(op.arg, expected):
            return [f"op {i}: equal literal type does not match {terminal_op}"]
        if expected is str and op.arg not in vocab.concept_attributes:
            return [f"op {i}: unknown literal concept '{op.arg}'"]
    return []
