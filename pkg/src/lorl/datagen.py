"""Synthetic dataset generation: scenes, ground truth, and paired language.

Two families are supported. `household` scenes scatter 2-6 multi-part glyphs
(each glyph one object) with category/color/size/material attributes on a
plain background and pair each image with questions. `composite-chair` scenes
draw a single chair whose parts (back, seat, legs, arms) are the objects,
paired with true descriptive sentences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .programs import Program
from .scene import (
    ConceptVocabulary,
    N_MAX_COUNT,
    ObjectRecord,
    QAExample,
    SceneRecord,
    rle_decode,
    rle_encode,
)
from .symbolic import AmbiguousReferent, evaluate
from .templates import QuestionTemplate, templates_for_family


class GenerationError(RuntimeError):
    pass


class DataError(RuntimeError):
    """Malformed dataset files."""


RELATIONS = ["left-of", "right-of", "above", "below"]

COLOR_RGB = {
    "red": (0.75, 0.12, 0.12),
    "green": (0.12, 0.65, 0.18),
    "blue": (0.15, 0.28, 0.80),
    "yellow": (0.85, 0.78, 0.15),
    "purple": (0.58, 0.18, 0.70),
}

BACKGROUND_GRAY = 0.86

HOUSEHOLD_VOCAB = ConceptVocabulary(
    attributes={
        "category": ["mug", "pan", "toaster", "blender", "plate", "kettle"],
        "color": list(COLOR_RGB),
        "size": ["small", "large"],
        "material": ["metal", "rubber"],
    },
    relations=RELATIONS,
)

CHAIR_VOCAB = ConceptVocabulary(
    attributes={
        "part": ["back", "seat", "leg", "arm"],
        "color": list(COLOR_RGB),
    },
    relations=RELATIONS,
)


def vocabulary_for_family(family: str) -> ConceptVocabulary:
    if family == "household":
        return HOUSEHOLD_VOCAB
    if family == "composite-chair":
        return CHAIR_VOCAB
    raise ValueError(f"unknown dataset family '{family}'")


@dataclass(frozen=True)
class DatasetSpec:
    family: str = "household"
    image_size: int = 64
    n_scenes: int = 100
    min_objects: int = 2
    max_objects: int = 6
    questions_per_image: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("household", "composite-chair"):
            raise ValueError(f"unknown dataset family '{self.family}'")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("invalid objects-per-scene range")


# ---------------------------------------------------------------------------
# Glyph rendering (household)
# ---------------------------------------------------------------------------

def _draw_glyph(draw: ImageDraw.ImageDraw, category: str, cx: float, cy: float, r: float):
    """Draw one category glyph centered at (cx, cy) with radius scale r.

    Each glyph has sub-parts sharing one mask (e.g. pan = disk + handle), so
    that whole-object segmentation is non-trivial.
    """
    if category == "mug":
        draw.rectangle([cx - 0.7 * r, cy - 0.8 * r, cx + 0.5 * r, cy + 0.8 * r], fill=1)
        draw.rectangle([cx + 0.5 * r, cy - 0.35 * r, cx + r, cy + 0.35 * r], fill=1)
    elif category == "pan":
        draw.ellipse([cx - 0.75 * r, cy - 0.75 * r, cx + 0.75 * r, cy + 0.75 * r], fill=1)
        draw.rectangle([cx + 0.6 * r, cy - 0.18 * r, cx + 1.5 * r, cy + 0.18 * r], fill=1)
    elif category == "toaster":
        draw.rectangle([cx - 0.9 * r, cy - 0.5 * r, cx + 0.7 * r, cy + 0.6 * r], fill=1)
        draw.rectangle([cx + 0.7 * r, cy - 0.1 * r, cx + 1.0 * r, cy + 0.25 * r], fill=1)
    elif category == "blender":
        draw.polygon(
            [(cx - 0.7 * r, cy - 0.9 * r), (cx + 0.7 * r, cy - 0.9 * r),
             (cx + 0.35 * r, cy + 0.3 * r), (cx - 0.35 * r, cy + 0.3 * r)],
            fill=1,
        )
        draw.rectangle([cx - 0.55 * r, cy + 0.3 * r, cx + 0.55 * r, cy + 0.85 * r], fill=1)
    elif category == "plate":
        draw.ellipse([cx - r, cy - 0.45 * r, cx + r, cy + 0.45 * r], fill=1)
    elif category == "kettle":
        draw.ellipse([cx - 0.7 * r, cy - 0.6 * r, cx + 0.7 * r, cy + 0.8 * r], fill=1)
        draw.polygon(
            [(cx - 0.65 * r, cy - 0.3 * r), (cx - 1.2 * r, cy - 0.75 * r),
             (cx - 0.45 * r, cy + 0.1 * r)],
            fill=1,
        )
        draw.rectangle([cx - 0.3 * r, cy - 1.0 * r, cx + 0.3 * r, cy - 0.55 * r], fill=1)
    else:
        raise ValueError(f"unknown category '{category}'")


def _glyph_mask(category: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    layer = PILImage.new("L", (size, size), 0)
    _draw_glyph(ImageDraw.Draw(layer), category, cx, cy, r)
    return np.asarray(layer, dtype=bool)


def _paint(image: np.ndarray, mask: np.ndarray, color: str, material: str):
    rgb = np.array(COLOR_RGB[color], dtype=np.float64)
    image[mask] = rgb
    if material == "metal":
        # diagonal highlight stripes stand in for specular texture
        h, w = mask.shape
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        stripes = ((rows + cols) % 6 < 2) & mask
        image[stripes] = np.minimum(image[stripes] + 0.22, 1.0)


def _gen_household_scene(
    spec: DatasetSpec, rng: np.random.Generator, image_id: str
) -> tuple[np.ndarray, SceneRecord]:
    size = spec.image_size
    vocab = HOUSEHOLD_VOCAB
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    image = np.full((size, size, 3), BACKGROUND_GRAY, dtype=np.float64)
    occupied = np.zeros((size, size), dtype=bool)
    objects: list[ObjectRecord] = []
    for _ in range(n_objects):
        placed = False
        for _attempt in range(200):
            category = str(rng.choice(vocab.attributes["category"]))
            color = str(rng.choice(vocab.attributes["color"]))
            obj_size = str(rng.choice(vocab.attributes["size"]))
            material = str(rng.choice(vocab.attributes["material"]))
            r = rng.uniform(*((3.8, 5.2) if obj_size == "small" else (6.5, 8.5)))
            r *= size / 64.0
            cx = rng.uniform(0.12 * size, 0.88 * size)
            cy = rng.uniform(0.12 * size, 0.88 * size)
            mask = _glyph_mask(category, cx, cy, r, size)
            # keep glyphs inside the frame and apart from each other
            if not mask.any() or mask[0, :].any() or mask[-1, :].any() \
                    or mask[:, 0].any() or mask[:, -1].any():
                continue
            dilated = _dilate(mask)
            if np.any(dilated & occupied):
                continue
            occupied |= mask
            _paint(image, mask, color, material)
            objects.append(
                ObjectRecord(
                    mask=mask,
                    attributes={
                        "category": category,
                        "color": color,
                        "size": obj_size,
                        "material": material,
                    },
                )
            )
            placed = True
            break
        if not placed:
            raise GenerationError("object placement failed after bounded retries")
    record = SceneRecord(image_id=image_id, objects=objects, background=~occupied)
    return np.clip(image, 0.0, 1.0), record


def _dilate(mask: np.ndarray, it: int = 2) -> np.ndarray:
    out = mask
    for _ in range(it):
        padded = np.pad(out, 1)
        out = (
            padded[1:-1, 1:-1] | padded[:-2, 1:-1] | padded[2:, 1:-1]
            | padded[1:-1, :-2] | padded[1:-1, 2:]
        )
    return out


# ---------------------------------------------------------------------------
# Chair rendering (composite-chair)
# ---------------------------------------------------------------------------

# Six layouts: (n_legs, n_arms, back style). The part list of a scene is
# fully determined by its layout.
CHAIR_LAYOUTS = [
    (4, 0, "tall"),
    (4, 2, "tall"),
    (1, 0, "tall"),
    (1, 2, "tall"),
    (4, 2, "wide"),
    (1, 0, "wide"),
]


def _gen_chair_scene(
    spec: DatasetSpec, rng: np.random.Generator, image_id: str
) -> tuple[np.ndarray, SceneRecord]:
    size = spec.image_size
    s = size / 64.0
    layout = CHAIR_LAYOUTS[int(rng.integers(len(CHAIR_LAYOUTS)))]
    n_legs, n_arms, back_style = layout
    cx = 32 * s + rng.uniform(-4, 4) * s
    seat_y = 36 * s + rng.uniform(-3, 3) * s
    seat_w = rng.uniform(26, 32) * s
    seat_h = rng.uniform(5, 7) * s
    parts: list[tuple[str, list[tuple[float, float, float, float]]]] = []

    # seat
    seat_box = (cx - seat_w / 2, seat_y, cx + seat_w / 2, seat_y + seat_h)
    parts.append(("seat", [seat_box]))
    # back sits on the seat
    if back_style == "tall":
        back_w, back_h = seat_w * 0.55, rng.uniform(18, 22) * s
    else:
        back_w, back_h = seat_w * 0.95, rng.uniform(10, 13) * s
    parts.append(("back", [(cx - back_w / 2, seat_y - back_h, cx + back_w / 2, seat_y)]))
    # legs hang from the seat
    leg_h = rng.uniform(12, 16) * s
    leg_y0, leg_y1 = seat_y + seat_h, seat_y + seat_h + leg_h
    if n_legs == 4:
        leg_w = 2.6 * s
        xs = np.linspace(cx - seat_w / 2 + leg_w, cx + seat_w / 2 - leg_w, 4)
        for lx in xs:
            parts.append(("leg", [(lx - leg_w / 2, leg_y0, lx + leg_w / 2, leg_y1)]))
    else:
        leg_w = 5.5 * s
        parts.append(
            ("leg", [
                (cx - leg_w / 2, leg_y0, cx + leg_w / 2, leg_y1),
                (cx - seat_w * 0.3, leg_y1, cx + seat_w * 0.3, leg_y1 + 3 * s),
            ])
        )
    # arms flank the seat
    if n_arms == 2:
        arm_w, arm_h = 2.8 * s, rng.uniform(10, 13) * s
        for side in (-1, 1):
            ax = cx + side * (seat_w / 2 + arm_w / 2 + 1.2 * s)
            parts.append(("arm", [(ax - arm_w / 2, seat_y - arm_h, ax + arm_w / 2, seat_y + seat_h)]))

    image = np.full((size, size, 3), BACKGROUND_GRAY, dtype=np.float64)
    occupied = np.zeros((size, size), dtype=bool)
    objects: list[ObjectRecord] = []
    for name, boxes in parts:
        layer = PILImage.new("L", (size, size), 0)
        draw = ImageDraw.Draw(layer)
        for box in boxes:
            draw.rectangle(list(box), fill=1)
        mask = np.asarray(layer, dtype=bool) & ~occupied
        if not mask.any():
            raise GenerationError(f"chair part '{name}' rendered empty")
        occupied |= mask
        color = str(rng.choice(CHAIR_VOCAB.attributes["color"]))
        image[mask] = np.array(COLOR_RGB[color], dtype=np.float64)
        objects.append(ObjectRecord(mask=mask, attributes={"part": name, "color": color}))
    record = SceneRecord(image_id=image_id, objects=objects, background=~occupied)
    return np.clip(image, 0.0, 1.0), record


def gen_scene(spec: DatasetSpec, scene_seed: int) -> tuple[np.ndarray, SceneRecord]:
    """Deterministic under (spec.seed, scene_seed)."""
    image_id = f"{scene_seed:06d}"
    for retry in range(20):
        rng = np.random.default_rng([spec.seed, scene_seed, retry])
        try:
            if spec.family == "household":
                return _gen_household_scene(spec, rng, image_id)
            return _gen_chair_scene(spec, rng, image_id)
        except GenerationError:
            continue
    raise GenerationError(f"scene {scene_seed} failed after bounded retries")


# ---------------------------------------------------------------------------
# Question generation
# ---------------------------------------------------------------------------

def _question_mix(n: int, rng: np.random.Generator) -> list[str]:
    """count : exist : query at 1:1:7."""
    kinds = []
    for i in range(n):
        slot = i % 9
        kinds.append("count" if slot == 0 else "exist" if slot == 1 else "query")
    return kinds


def _sample_household_question(
    record: SceneRecord, kind: str, rng: np.random.Generator
) -> tuple[QuestionTemplate, dict]:
    from . import templates as T

    vocab = HOUSEHOLD_VOCAB
    by_name = {t.name: t for t in T.HOUSEHOLD_TEMPLATES}
    objs = record.objects

    def scene_obj():
        return objs[int(rng.integers(len(objs)))]

    if kind == "count":
        if rng.random() < 0.5:
            return by_name["count-cat"], {"cat": _rand_concept(vocab, "category", rng, objs)}
        attr = str(rng.choice(["color", "size", "material"]))
        return by_name["count-concept"], {"c": _rand_concept(vocab, attr, rng, objs)}
    if kind == "exist":
        if rng.random() < 0.5:
            return by_name["exist-cat"], {"cat": _rand_concept(vocab, "category", rng, objs)}
        attr = str(rng.choice(["color", "size", "material"]))
        return by_name["exist-concept-cat"], {
            "c": _rand_concept(vocab, attr, rng, objs),
            "cat": _rand_concept(vocab, "category", rng, objs),
        }
    # query: anchor on a real object so a unique referent is likely
    obj = scene_obj()
    attrs = ["color", "size", "material"]
    attr = str(rng.choice(attrs))
    choice = rng.random()
    if choice < 0.45:
        return by_name["query-cat"], {"attr": attr, "cat": obj.attributes["category"]}
    if choice < 0.8:
        mods = [a for a in attrs if a != attr]
        mod = str(rng.choice(mods))
        return by_name["query-concept-cat"], {
            "attr": attr,
            "c": obj.attributes[mod],
            "cat": obj.attributes["category"],
        }
    anchor = scene_obj()
    return by_name["query-relate"], {
        "attr": attr,
        "cat": obj.attributes["category"],
        "rel": str(rng.choice(RELATIONS)),
        "cat2": anchor.attributes["category"],
    }


def _rand_concept(vocab, attr, rng, objs) -> str:
    # bias toward concepts present in the scene so answers vary
    if rng.random() < 0.6 and objs:
        obj = objs[int(rng.integers(len(objs)))]
        if attr in obj.attributes:
            return obj.attributes[attr]
    return str(rng.choice(vocab.attributes[attr]))


def _sample_chair_description(
    record: SceneRecord, rng: np.random.Generator
) -> tuple[QuestionTemplate, dict]:
    from . import templates as T

    by_name = {t.name: t for t in T.CHAIR_TEMPLATES}
    objs = record.objects
    obj = objs[int(rng.integers(len(objs)))]
    part = obj.attributes["part"]
    choice = rng.random()
    if choice < 0.3:
        n = sum(1 for o in objs if o.attributes["part"] == part)
        return by_name["desc-count"], {"n": n, "part": part}
    if choice < 0.55:
        return by_name["desc-color"], {"part": part, "color": obj.attributes["color"]}
    if choice < 0.8:
        return by_name["desc-exist"], {"part": part, "color": obj.attributes["color"]}
    anchor = objs[int(rng.integers(len(objs)))]
    return by_name["desc-relate-color"], {
        "part": part,
        "rel": str(rng.choice(RELATIONS)),
        "part2": anchor.attributes["part"],
        "color": obj.attributes["color"],
    }


def gen_questions(
    record: SceneRecord,
    templates: list[QuestionTemplate],
    q_seed: int,
    spec: DatasetSpec,
) -> list[QAExample]:
    """Generate questions whose answers are computed symbolically."""
    rng = np.random.default_rng([spec.seed, q_seed, 1_000_003])
    examples: list[QAExample] = []
    kinds = _question_mix(spec.questions_per_image, rng)
    for kind in kinds:
        for _attempt in range(300):
            try:
                if spec.family == "household":
                    template, bindings = _sample_household_question(record, kind, rng)
                else:
                    template, bindings = _sample_chair_description(record, rng)
                program = template.program(bindings)
                answer = evaluate(program, record)
            except AmbiguousReferent:
                continue
            if isinstance(answer, int) and not isinstance(answer, bool) and answer > N_MAX_COUNT:
                continue
            if spec.family == "composite-chair" and answer is not True:
                continue  # descriptions must be true statements
            examples.append(
                QAExample(
                    question=template.render(bindings),
                    program=program,
                    answer=answer,
                    scene_id=record.image_id,
                )
            )
            break
        else:
            raise GenerationError(
                f"no answerable question of kind '{kind}' for scene {record.image_id}"
            )
    return examples


def gen_refexps(
    record: SceneRecord, vocab: ConceptVocabulary, seed: int, n: int = 4
) -> list[Program]:
    """Referring expressions: filter/relate chains with non-empty referents."""
    from .programs import ProgramOp
    from .symbolic import referents

    rng = np.random.default_rng([seed, 7_777_777])
    out: list[Program] = []
    attrs = list(vocab.attributes)
    for _ in range(n):
        for _attempt in range(100):
            obj = record.objects[int(rng.integers(len(record.objects)))]
            picked = [a for a in attrs if rng.random() < 0.5 and a in obj.attributes]
            if not picked:
                picked = [attrs[int(rng.integers(len(attrs)))]]
            ops = [ProgramOp("scene")]
            for a in picked:
                ops.append(ProgramOp("filter", obj.attributes[a]))
            if rng.random() < 0.25 and len(record.objects) > 1:
                anchor = record.objects[int(rng.integers(len(record.objects)))]
                a = attrs[int(rng.integers(len(attrs)))]
                ops = [
                    ProgramOp("scene"),
                    ProgramOp("filter", anchor.attributes[a]),
                    ProgramOp("relate", str(rng.choice(vocab.relations))),
                ] + [ProgramOp("filter", obj.attributes[a2]) for a2 in picked]
            program = Program(ops)
            if referents(program, record):
                out.append(program)
                break
    return out


# ---------------------------------------------------------------------------
# Dataset IO
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    spec: DatasetSpec
    vocab: ConceptVocabulary
    records: list[SceneRecord]
    questions: list[QAExample]

    def __len__(self) -> int:
        return len(self.records)

    def image(self, index: int) -> np.ndarray:
        path = self.root / "images" / f"{self.records[index].image_id}.png"
        arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32)
        return arr / 255.0

    def questions_for_scene(self, scene_id: str) -> list[QAExample]:
        return [q for q in self.questions if q.scene_id == scene_id]

    @property
    def scene_index(self) -> dict[str, int]:
        return {r.image_id: i for i, r in enumerate(self.records)}


def write_dataset(spec: DatasetSpec, out_dir: str | Path) -> Dataset:
    """Generate a dataset to the on-disk layout and return a handle to it."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    vocab = vocabulary_for_family(spec.family)
    templates = templates_for_family(spec.family)
    records, questions = [], []
    scene_entries = []
    for i in range(spec.n_scenes):
        image, record = gen_scene(spec, i)
        records.append(record)
        questions.extend(gen_questions(record, templates, i, spec))
        arr = np.round(image * 255.0).astype(np.uint8)
        PILImage.fromarray(arr).save(root / "images" / f"{record.image_id}.png")
        scene_entries.append(
            {
                "image_id": record.image_id,
                "objects": [
                    {"attributes": o.attributes, "mask": rle_encode(o.mask)}
                    for o in record.objects
                ],
                "background": rle_encode(record.background),
            }
        )
    scenes_doc = {
        "height": spec.image_size,
        "width": spec.image_size,
        "vocab": vocab.to_json(),
        "scenes": scene_entries,
    }
    (root / "scenes.json").write_text(json.dumps(scenes_doc))
    questions_doc = [
        {
            "question": q.question,
            "program": q.program.to_json(),
            "answer": q.answer,
            "scene_id": q.scene_id,
        }
        for q in questions
    ]
    (root / "questions.json").write_text(json.dumps(questions_doc))
    (root / "spec.json").write_text(json.dumps(asdict(spec)))
    return Dataset(root=root, spec=spec, vocab=vocab, records=records, questions=questions)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    try:
        scenes_doc = json.loads((root / "scenes.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{root / 'scenes.json'}: {e}") from e
    try:
        questions_doc = json.loads((root / "questions.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{root / 'questions.json'}: {e}") from e
    try:
        spec = DatasetSpec(**json.loads((root / "spec.json").read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{root / 'spec.json'}: {e}") from e

    shape = (scenes_doc["height"], scenes_doc["width"])
    vocab = ConceptVocabulary.from_json(scenes_doc["vocab"])
    records = []
    for entry in scenes_doc["scenes"]:
        try:
            objects = [
                ObjectRecord(
                    mask=rle_decode(o["mask"], shape),
                    attributes=dict(o["attributes"]),
                )
                for o in entry["objects"]
            ]
            background = rle_decode(entry["background"], shape)
        except (KeyError, ValueError) as e:
            raise DataError(f"{root / 'scenes.json'}: scene {entry.get('image_id')}: {e}") from e
        records.append(
            SceneRecord(image_id=entry["image_id"], objects=objects, background=background)
        )
    questions = []
    for entry in questions_doc:
        try:
            questions.append(
                QAExample(
                    question=entry["question"],
                    program=Program.from_json(entry["program"]),
                    answer=entry["answer"],
                    scene_id=entry["scene_id"],
                )
            )
        except KeyError as e:
            raise DataError(f"{root / 'questions.json'}: missing field {e}") from e
    return Dataset(root=root, spec=spec, vocab=vocab, records=records, questions=questions)
