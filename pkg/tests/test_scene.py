import numpy as np
import pytest
from hypothesis import given, strategies as st

from lorl.scene import (
    ConceptVocabulary,
    ObjectRecord,
    SceneRecord,
    check_image,
    rle_decode,
    rle_encode,
    validate_scene_record,
)
from conftest import block_scene


class TestRunLengthEncoding:
    def test_known_example(self):
        mask = np.array([[0, 1, 1], [0, 0, 1]], dtype=bool)
        assert rle_encode(mask) == [1, 2, 2, 1]

    def test_leading_one_starts_with_zero_run(self):
        mask = np.array([[1, 0]], dtype=bool)
        assert rle_encode(mask) == [0, 1, 1]

    def test_all_zeros(self):
        mask = np.zeros((2, 2), dtype=bool)
        assert rle_encode(mask) == [4]

    @given(st.lists(st.booleans(), min_size=1, max_size=120))
    def test_roundtrip(self, bits):
        mask = np.array(bits, dtype=bool).reshape(1, -1)
        assert np.array_equal(rle_decode(rle_encode(mask), mask.shape), mask)

    def test_decode_length_mismatch(self):
        with pytest.raises(ValueError):
            rle_decode([3], (2, 2))


class TestCheckImage:
    def test_accepts_valid(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        out = check_image(img)
        assert out.dtype == np.float32

    @pytest.mark.parametrize(
        "bad",
        [
            np.zeros((4, 4)),  # wrong rank
            np.full((2, 2, 3), 1.5),  # out of range
            np.full((2, 2, 3), np.nan),  # non-finite
        ],
    )
    def test_rejects_invalid(self, bad):
        with pytest.raises(ValueError):
            check_image(bad)


class TestConceptVocabulary:
    def test_duplicate_concept_rejected(self):
        with pytest.raises(ValueError, match="appears under"):
            ConceptVocabulary({"a": ["x", "y"], "b": ["y", "z"]})

    def test_singleton_attribute_rejected(self):
        with pytest.raises(ValueError):
            ConceptVocabulary({"a": ["only"]})

    def test_attribute_of(self):
        vocab = ConceptVocabulary({"color": ["red", "blue"], "size": ["big", "tiny"]})
        assert vocab.attribute_of("red") == "color"
        assert vocab.attribute_of("tiny") == "size"
        with pytest.raises(KeyError):
            vocab.attribute_of("nope")

    def test_answer_vocabulary_layout(self):
        vocab = ConceptVocabulary({"color": ["red", "blue"]})
        answers = vocab.answer_vocabulary()
        assert answers[:2] == ["red", "blue"]
        assert answers[2:13] == list(range(11))
        assert answers[13:] == [True, False]

    def test_json_roundtrip(self):
        vocab = ConceptVocabulary(
            {"color": ["red", "blue"], "size": ["big", "tiny"]}, ["left-of"]
        )
        assert ConceptVocabulary.from_json(vocab.to_json()) == vocab


class TestValidateSceneRecord:
    def test_clean_scene_passes(self):
        assert validate_scene_record(block_scene()) == []

    def test_overlap_detected(self):
        record = block_scene()
        m = record.objects[0].mask.copy()
        bad = ObjectRecord(m, dict(record.objects[1].attributes))
        broken = SceneRecord("x", [record.objects[0], bad], record.background)
        assert any("disjointness" in v for v in validate_scene_record(broken))

    def test_empty_mask_detected(self):
        record = block_scene()
        empty = ObjectRecord(np.zeros(record.shape, dtype=bool), {"category": "mug"})
        broken = SceneRecord("x", [*record.objects, empty], record.background)
        assert any("non-empty" in v for v in validate_scene_record(broken))

    def test_coverage_gap_detected(self):
        record = block_scene()
        bg = record.background.copy()
        bg[0, 0] = False
        broken = SceneRecord("x", list(record.objects), bg)
        assert any("cover" in v for v in validate_scene_record(broken))

    def test_vocabulary_membership(self):
        from lorl.datagen import HOUSEHOLD_VOCAB

        record = block_scene()
        off = ObjectRecord(record.objects[0].mask, {"category": "spaceship"})
        broken = SceneRecord("x", [off, record.objects[1]], record.background)
        assert any("spaceship" in v for v in validate_scene_record(broken, HOUSEHOLD_VOCAB))
        assert validate_scene_record(record, HOUSEHOLD_VOCAB) == []
