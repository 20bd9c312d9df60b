import pytest

from lorl.datagen import HOUSEHOLD_VOCAB
from lorl.programs import Program, ProgramOp, validate_program


def prog(*ops):
    return Program([ProgramOp(op, arg) for op, arg in ops])


class TestProgramBasics:
    def test_json_roundtrip(self):
        p = prog(("scene", None), ("filter", "mug"), ("count", None), ("equal", 3))
        assert Program.from_json(p.to_json()) == p

    def test_terminal_kind(self):
        assert prog(("scene", None), ("exist", None)).terminal_kind() == "bool"
        assert prog(("scene", None), ("count", None)).terminal_kind() == "int"
        assert prog(("scene", None), ("query", "color")).terminal_kind() == "word"
        assert prog(("scene", None), ("count", None), ("equal", 2)).terminal_kind() == "bool"

    def test_ops_are_immutable(self):
        op = ProgramOp("filter", "mug")
        with pytest.raises(AttributeError):
            op.arg = "pan"


class TestValidateProgram:
    def check(self, *ops):
        return validate_program(prog(*ops), HOUSEHOLD_VOCAB)

    def test_valid_query(self):
        assert self.check(("scene", None), ("filter", "mug"), ("query", "color")) == []

    def test_valid_relate_chain(self):
        assert self.check(
            ("scene", None), ("filter", "pan"), ("relate", "left-of"),
            ("filter", "mug"), ("exist", None),
        ) == []

    def test_valid_equal_after_count(self):
        assert self.check(
            ("scene", None), ("filter", "mug"), ("count", None), ("equal", 4),
        ) == []

    def test_must_start_with_scene(self):
        assert self.check(("filter", "mug"), ("exist", None))

    def test_missing_terminal(self):
        assert self.check(("scene", None), ("filter", "mug"))

    def test_ops_after_terminal(self):
        assert self.check(("scene", None), ("exist", None), ("filter", "mug"))

    def test_unknown_concept(self):
        assert self.check(("scene", None), ("filter", "unicorn"), ("exist", None))

    def test_unknown_relation(self):
        assert self.check(
            ("scene", None), ("filter", "mug"), ("relate", "inside-of"),
            ("exist", None),
        )

    def test_unknown_attribute(self):
        assert self.check(("scene", None), ("filter", "mug"), ("query", "weight"))

    def test_equal_literal_type_mismatch(self):
        # boolean literal is not a valid count literal
        assert self.check(("scene", None), ("count", None), ("equal", True))

    def test_equal_without_terminal(self):
        assert self.check(("scene", None), ("filter", "mug"), ("equal", 3))
