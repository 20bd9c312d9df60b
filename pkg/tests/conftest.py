import numpy as np
import pytest
import torch

from lorl.datagen import DatasetSpec, write_dataset
from lorl.scene import ObjectRecord, SceneRecord


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def household_ds(tmp_path_factory):
    spec = DatasetSpec(
        family="household", image_size=32, n_scenes=12,
        min_objects=2, max_objects=4, questions_per_image=9, seed=7,
    )
    return write_dataset(spec, tmp_path_factory.mktemp("household"))


@pytest.fixture(scope="session")
def chair_ds(tmp_path_factory):
    spec = DatasetSpec(
        family="composite-chair", image_size=32, n_scenes=8,
        questions_per_image=8, seed=3,
    )
    return write_dataset(spec, tmp_path_factory.mktemp("chairs"))


def block_scene(shape=(8, 8)) -> SceneRecord:
    """Tiny hand-built scene: red mug upper-left, blue pan lower-right."""
    h, w = shape
    m1 = np.zeros(shape, dtype=bool)
    m1[1:3, 1:3] = True
    m2 = np.zeros(shape, dtype=bool)
    m2[h - 3 : h - 1, w - 3 : w - 1] = True
    objects = [
        ObjectRecord(m1, {"category": "mug", "color": "red", "size": "small",
                          "material": "metal"}),
        ObjectRecord(m2, {"category": "pan", "color": "blue", "size": "large",
                          "material": "rubber"}),
    ]
    background = ~(m1 | m2)
    return SceneRecord("000000", objects, background)
